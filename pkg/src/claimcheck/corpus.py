"""Dataset and knowledge-store ingestion, sentence splitting, chunking.

A dataset file is a JSON array of claims with optional gold labels and
question-answer evidence. A knowledge store is a JSON-lines file (or a
directory of per-claim files) of pre-scraped documents, each already
split into sentences. Documents are packed greedily into character-bounded
chunks that carry their neighbours' text as context.
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass
from enum import Enum

from .errors import ValidationError

log = logging.getLogger(__name__)

DEFAULT_MAX_CHARS = 2048


class VeracityLabel(Enum):
    SUPPORTED = "Supported"
    REFUTED = "Refuted"
    NOT_ENOUGH_EVIDENCE = "Not Enough Evidence"
    CONFLICTING = "Conflicting Evidence/Cherrypicking"


# Order used when probability ties must be broken without an LLM preference.
LABEL_TIE_ORDER = [
    VeracityLabel.SUPPORTED,
    VeracityLabel.REFUTED,
    VeracityLabel.CONFLICTING,
    VeracityLabel.NOT_ENOUGH_EVIDENCE,
]


class AnswerType(Enum):
    EXTRACTIVE = "Extractive"
    ABSTRACTIVE = "Abstractive"
    BOOLEAN = "Boolean"
    UNANSWERABLE = "Unanswerable"


def parse_label(value: str) -> VeracityLabel:
    """Strict label parse: only canonical serialization strings pass."""
    for label in VeracityLabel:
        if value == label.value:
            return label
    raise ValidationError(f"unknown veracity label: {value!r}")


def parse_answer_type(value: str) -> AnswerType:
    for at in AnswerType:
        if value == at.value:
            return at
    raise ValidationError(f"unknown answer type: {value!r}")


@dataclass(frozen=True)
class GoldQA:
    question: str
    answer: str
    answer_type: AnswerType


@dataclass(frozen=True)
class Claim:
    id: int
    text: str
    claim_date: str | None = None
    gold_label: VeracityLabel | None = None
    gold_evidence: tuple[GoldQA, ...] = ()

    def __post_init__(self):
        if self.id < 0:
            raise ValidationError(f"claim id must be >= 0, got {self.id}")
        if not self.text or not self.text.strip():
            raise ValidationError(f"claim {self.id} has empty text")
        if self.gold_label is not None and not self.gold_evidence:
            raise ValidationError(
                f"claim {self.id} has a gold label but no gold evidence"
            )


@dataclass(frozen=True)
class Document:
    url: str
    sentences: tuple[str, ...]

    def __post_init__(self):
        if not self.sentences:
            raise ValidationError(f"document {self.url!r} has no sentences")


@dataclass(frozen=True)
class Chunk:
    doc_url: str
    index_in_doc: int
    sentences: tuple[str, ...]
    text: str
    prev_context: str | None = None
    next_context: str | None = None
    oversized: bool = False

    @property
    def key(self) -> str:
        return f"{self.doc_url}#{self.index_in_doc}"


@dataclass(frozen=True)
class StoreLoadResult:
    documents: tuple[Document, ...]
    dropped_empty: int


def load_dataset(path: str) -> list[Claim]:
    """Load a JSON-array dataset file into Claim objects.

    Ids come from an explicit "claim_id" field when present, else from the
    array position. Unknown fields are ignored. Multiple answers to one
    question are joined with "; " into a single gold answer.
    """
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise ValidationError(f"{path}: expected a JSON array at top level")

    claims = []
    for pos, item in enumerate(data):
        try:
            claims.append(_claim_from_json(item, pos))
        except ValidationError as exc:
            raise ValidationError(f"{path}: element {pos}: {exc}") from exc
    return claims


def _claim_from_json(item: dict, position: int) -> Claim:
    if not isinstance(item, dict):
        raise ValidationError("element is not an object")
    claim_id = item.get("claim_id", position)
    if not isinstance(claim_id, int):
        raise ValidationError(f"claim_id must be an integer, got {claim_id!r}")
    text = item.get("claim")
    if not isinstance(text, str):
        raise ValidationError("missing or non-string 'claim' field")

    label = None
    raw_label = item.get("label")
    if raw_label is not None:
        label = parse_label(raw_label)

    evidence = []
    for q in item.get("questions", []) or []:
        question = q.get("question", "")
        answers = q.get("answers", []) or []
        answer = "; ".join(a.get("answer", "") for a in answers)
        at = AnswerType.ABSTRACTIVE
        if answers:
            raw_type = answers[0].get("answer_type")
            if raw_type is not None:
                at = parse_answer_type(raw_type)
        evidence.append(GoldQA(question=question, answer=answer, answer_type=at))

    return Claim(
        id=claim_id,
        text=text,
        claim_date=item.get("claim_date"),
        gold_label=label,
        gold_evidence=tuple(evidence),
    )


def _store_file_for_claim(path: str, claim_id: int) -> str | None:
    if os.path.isdir(path):
        for name in (f"{claim_id}.json", f"{claim_id}.jsonl"):
            candidate = os.path.join(path, name)
            if os.path.isfile(candidate):
                return candidate
        return None
    return path


def load_knowledge_store(path: str, claim_id: int) -> StoreLoadResult:
    """Load the documents for one claim from a knowledge store.

    `path` may be a single JSON-lines file holding many claims (lines are
    filtered by claim_id) or a directory of per-claim files named
    {claim_id}.json. Lines with an empty sentence list are dropped and
    counted rather than erroring: scraped stores routinely contain them.
    """
    target = _store_file_for_claim(path, claim_id)
    if target is None:
        log.warning("no knowledge store file for claim %d under %s", claim_id, path)
        return StoreLoadResult(documents=(), dropped_empty=0)

    documents = []
    dropped = 0
    with open(target, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(
                    f"{target}: line {lineno}: not valid JSON: {exc}"
                ) from exc
            if obj.get("claim_id", claim_id) != claim_id:
                continue
            sentences = tuple(
                s for s in obj.get("url2text", []) if isinstance(s, str) and s.strip()
            )
            if not sentences:
                dropped += 1
                continue
            documents.append(Document(url=obj.get("url", ""), sentences=sentences))
    if dropped:
        log.info("claim %d: dropped %d empty documents", claim_id, dropped)
    return StoreLoadResult(documents=tuple(documents), dropped_empty=dropped)


# Words that end with a period without ending a sentence.
_ABBREVIATIONS = {
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "Sen.", "Rep.", "Gov.", "Gen.",
    "St.", "Mt.", "Jr.", "Sr.", "vs.", "etc.", "e.g.", "i.e.", "cf.",
    "U.S.", "U.K.", "U.N.", "No.", "Inc.", "Ltd.", "Co.", "Corp.", "Fig.",
    "Jan.", "Feb.", "Mar.", "Apr.", "Jun.", "Jul.", "Aug.", "Sep.", "Sept.",
    "Oct.", "Nov.", "Dec.", "approx.",
}

_BOUNDARY_RE = re.compile(r"([.!?]+)(\s+)(?=[A-Z0-9])")


def _word_ending_at(text: str, end: int) -> str:
    start = end
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    return text[start:end]


def split_sentences(text: str) -> list[str]:
    """Rule-based sentence segmentation.

    Splits on terminal punctuation followed by whitespace and an
    uppercase letter or digit, except after known abbreviations and
    single-letter initials. Whitespace-normalized concatenation of the
    output reproduces the input.
    """
    if not text or not text.strip():
        return []
    cut_points = []
    for m in _BOUNDARY_RE.finditer(text):
        if m.group(1).endswith("."):
            word = _word_ending_at(text, m.end(1))
            if word in _ABBREVIATIONS:
                continue
            # single-letter initials such as "J. Edgar"
            if len(word) == 2 and word[0].isupper() and word[1] == ".":
                continue
        cut_points.append((m.end(1), m.end()))

    sentences = []
    start = 0
    for sentence_end, next_start in cut_points:
        sentences.append(text[start:sentence_end])
        start = next_start
    sentences.append(text[start:])
    return [s.strip() for s in sentences if s.strip()]


def chunk_document(doc: Document, max_chars: int = DEFAULT_MAX_CHARS) -> list[Chunk]:
    """Pack sentences greedily into chunks of at most max_chars characters.

    Length is measured on sentences joined by single spaces. A lone
    sentence longer than the bound becomes its own chunk flagged
    oversized; sentences are never split mid-way so that source text
    stays quotable verbatim.
    """
    if max_chars < 1:
        raise ValidationError(f"max_chars must be >= 1, got {max_chars}")

    groups: list[tuple[str, ...]] = []
    current: list[str] = []
    length = 0
    for sentence in doc.sentences:
        added = len(sentence) if not current else length + 1 + len(sentence)
        if current and added > max_chars:
            groups.append(tuple(current))
            current = [sentence]
            length = len(sentence)
        else:
            current.append(sentence)
            length = added
    if current:
        groups.append(tuple(current))

    texts = [" ".join(g) for g in groups]
    chunks = []
    for i, (group, text) in enumerate(zip(groups, texts)):
        chunks.append(
            Chunk(
                doc_url=doc.url,
                index_in_doc=i,
                sentences=group,
                text=text,
                prev_context=texts[i - 1] if i > 0 else None,
                next_context=texts[i + 1] if i + 1 < len(texts) else None,
                oversized=len(text) > max_chars,
            )
        )
    return chunks
