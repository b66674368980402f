"""Tokenization and Okapi BM25 ranking.

BM25 is used in two places: pruning a claim's chunk set down to the
omega best-matching chunks before embedding, and picking the most
similar training claims for few-shot prompting. Indexes are cheap to
build and rebuilt per claim rather than persisted.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .errors import ValidationError

_ALNUM_RE = re.compile(r"[a-z0-9]+")
_ALNUM_KEEP_CASE_RE = re.compile(r"[A-Za-z0-9]+")


@dataclass(frozen=True)
class TokenizerConfig:
    lowercase: bool = True
    strip_non_alphanumeric: bool = True
    min_token_len: int = 1

    def __post_init__(self):
        if self.min_token_len < 1:
            raise ValidationError("min_token_len must be >= 1")


DEFAULT_TOKENIZER = TokenizerConfig()


def tokenize(text: str, cfg: TokenizerConfig = DEFAULT_TOKENIZER) -> list[str]:
    """Lowercase, strip punctuation, length-filter, in that order."""
    if cfg.lowercase:
        text = text.lower()
    if cfg.strip_non_alphanumeric:
        pattern = _ALNUM_RE if cfg.lowercase else _ALNUM_KEEP_CASE_RE
        tokens = pattern.findall(text)
    else:
        tokens = text.split()
    if cfg.min_token_len > 1:
        tokens = [t for t in tokens if len(t) >= cfg.min_token_len]
    return tokens


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if self.k1 < 0:
            raise ValidationError("k1 must be >= 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValidationError("b must be in [0, 1]")


@dataclass(frozen=True)
class Bm25Index:
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: tuple[int, ...]
    avg_doc_length: float
    doc_count: int
    params: Bm25Params = field(default=Bm25Params())


def build_index(docs: list[list[str]], params: Bm25Params = Bm25Params()) -> Bm25Index:
    """Build an inverted index over tokenized documents."""
    if not docs:
        raise ValidationError("cannot build a BM25 index over zero documents")
    doc_lengths = tuple(len(d) for d in docs)
    total = sum(doc_lengths)
    if total == 0:
        raise ValidationError("all documents are empty of tokens")

    postings: dict[str, list[tuple[int, int]]] = {}
    for ordinal, doc in enumerate(docs):
        counts: dict[str, int] = {}
        for token in doc:
            counts[token] = counts.get(token, 0) + 1
        for term, tf in counts.items():
            postings.setdefault(term, []).append((ordinal, tf))

    return Bm25Index(
        postings=postings,
        doc_lengths=doc_lengths,
        avg_doc_length=total / len(docs),
        doc_count=len(docs),
        params=params,
    )


def idf(index: Bm25Index, term: str) -> float:
    """Non-negative idf: ln(1 + (N - df + 0.5) / (df + 0.5))."""
    df = len(index.postings.get(term, ()))
    if df == 0:
        return 0.0
    return math.log(1.0 + (index.doc_count - df + 0.5) / (df + 0.5))


def tf_weight(tf: int, doc_length: int, avg_doc_length: float, params: Bm25Params) -> float:
    """Okapi saturation term: tf*(k1+1) / (tf + k1*(1 - b + b*dl/avgdl))."""
    norm = params.k1 * (1.0 - params.b + params.b * doc_length / avg_doc_length)
    return tf * (params.k1 + 1.0) / (tf + norm)


def bm25_top(
    index: Bm25Index, query_tokens: list[str], omega: int
) -> list[tuple[int, float]]:
    """Top-omega documents by BM25 score, descending.

    Repeated query tokens contribute once per occurrence. Ties break by
    ascending document ordinal; documents scoring zero are excluded.
    Contributions accumulate in query-token order so results are
    bit-identical to a per-document loop over the same formula.
    """
    if omega < 1:
        raise ValidationError(f"omega must be >= 1, got {omega}")
    scores: dict[int, float] = {}
    for token in query_tokens:
        plist = index.postings.get(token)
        if not plist:
            continue
        token_idf = idf(index, token)
        for ordinal, tf in plist:
            w = token_idf * tf_weight(
                tf, index.doc_lengths[ordinal], index.avg_doc_length, index.params
            )
            scores[ordinal] = scores.get(ordinal, 0.0) + w

    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return [(ordinal, score) for ordinal, score in ranked if score > 0.0][:omega]
