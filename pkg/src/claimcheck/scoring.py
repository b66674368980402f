"""Evaluation: METEOR-lite text similarity, Hungarian matching, reports.

Predicted question-answer pairs are matched one-to-one against gold
pairs by maximizing total METEOR similarity (an assignment problem);
the per-claim score normalizes by the gold count. A claim passes at a
threshold when its label is right and its matched evidence clears the
threshold; the headline score is the passing fraction.

METEOR here is a two-stage variant (exact match, then Porter-stem
match) without the synonym stage, so absolute values can differ from
scorers that use a synonym database; comparisons within one run are
consistent.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .corpus import Claim, VeracityLabel, parse_label
from .errors import ValidationError
from .lexical import DEFAULT_TOKENIZER, tokenize
from .porter import stem

# Full enumeration of alignment choices is abandoned past this many
# combinations in favour of a deterministic first-occurrence greedy.
_ALIGN_BUDGET = 100_000


@dataclass(frozen=True)
class MeteorParams:
    alpha: float = 0.9
    beta: float = 3.0
    gamma: float = 0.5
    stemming: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must be in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError("gamma must be in [0, 1]")


@dataclass(frozen=True)
class ScoringConfig:
    thresholds: tuple[float, ...] = (0.25,)
    mode: str = "QA"

    def __post_init__(self):
        if not self.thresholds:
            raise ValidationError("thresholds must be non-empty")
        for t in self.thresholds:
            if not 0.0 < t <= 1.0:
                raise ValidationError(f"threshold {t} outside (0, 1]")
        if self.mode not in ("Q_only", "QA"):
            raise ValidationError(f"mode must be Q_only or QA, got {self.mode!r}")


# ---------------------------------------------------------------------------
# METEOR-lite


def _pair_in_order(chosen_c: tuple[int, ...], chosen_r: tuple[int, ...]):
    return list(zip(sorted(chosen_c), sorted(chosen_r)))


def _group_edge_options(surfaces: list[tuple[list[int], list[int]]]):
    """All edge sets for one stem group, or None when over budget.

    A group is the set of positions sharing a stem. Exact matching
    happens per surface form (taking min counts, positions free);
    whatever positions remain may pair across surfaces as stem matches.
    Chosen position sets are always paired in increasing order: any
    crossing-minimal alignment has that shape, so nothing optimal is
    lost.
    """
    per_surface = []
    for pc, pr in surfaces:
        k = min(len(pc), len(pr))
        picks = [
            (cc, rr)
            for cc in itertools.combinations(pc, k)
            for rr in itertools.combinations(pr, k)
        ]
        per_surface.append(picks)
        if math.prod(len(p) for p in per_surface) > _ALIGN_BUDGET:
            return None

    all_c = sorted(p for pc, _pr in surfaces for p in pc)
    all_r = sorted(p for _pc, pr in surfaces for p in pr)

    options = []
    for combo in itertools.product(*per_surface):
        exact_edges = []
        used_c = set()
        used_r = set()
        for cc, rr in combo:
            exact_edges.extend(_pair_in_order(cc, rr))
            used_c.update(cc)
            used_r.update(rr)
        left_c = [p for p in all_c if p not in used_c]
        left_r = [p for p in all_r if p not in used_r]
        kg = min(len(left_c), len(left_r))
        stem_picks = [
            _pair_in_order(cc, rr)
            for cc in itertools.combinations(left_c, kg)
            for rr in itertools.combinations(left_r, kg)
        ]
        for stem_edges in stem_picks:
            options.append(exact_edges + stem_edges)
            if len(options) > _ALIGN_BUDGET:
                return None
    return options


def _greedy_group_edges(surfaces: list[tuple[list[int], list[int]]]):
    """First-occurrence fallback used when enumeration is too large."""
    edges = []
    used_c = set()
    used_r = set()
    for pc, pr in surfaces:
        k = min(len(pc), len(pr))
        edges.extend(_pair_in_order(tuple(pc[:k]), tuple(pr[:k])))
        used_c.update(pc[:k])
        used_r.update(pr[:k])
    all_c = sorted(p for pc, _pr in surfaces for p in pc)
    all_r = sorted(p for _pc, pr in surfaces for p in pr)
    left_c = [p for p in all_c if p not in used_c]
    left_r = [p for p in all_r if p not in used_r]
    kg = min(len(left_c), len(left_r))
    edges.extend(_pair_in_order(tuple(left_c[:kg]), tuple(left_r[:kg])))
    return edges


def _crossings(pairs: list[tuple[int, int]]) -> int:
    count = 0
    for (c1, r1), (c2, r2) in itertools.combinations(pairs, 2):
        if (c1 - c2) * (r1 - r2) < 0:
            count += 1
    return count


def _chunk_count(pairs: list[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    ordered = sorted(pairs)
    chunks = 1
    for (c1, r1), (c2, r2) in zip(ordered, ordered[1:]):
        if not (c2 == c1 + 1 and r2 == r1 + 1):
            chunks += 1
    return chunks


def align_tokens(
    cand: list[str], ref: list[str], stemming: bool = True
) -> list[tuple[int, int]]:
    """Two-stage unigram alignment between token lists.

    Exact matches are maximized first, stem matches fill in from the
    leftovers; among maximal alignments the result minimizes crossings,
    then chunk count, then compares pair lists lexicographically. The
    match counts themselves are forced by token multiplicities, so the
    search is only over which duplicate positions pair up.
    """
    stems_c = [stem(t) for t in cand] if stemming else list(cand)
    stems_r = [stem(t) for t in ref] if stemming else list(ref)

    groups: dict[str, tuple[list[int], list[int]]] = {}
    for i, s in enumerate(stems_c):
        groups.setdefault(s, ([], []))[0].append(i)
    for j, s in enumerate(stems_r):
        groups.setdefault(s, ([], []))[1].append(j)

    group_surfaces = []
    for s in sorted(groups):
        pc_all, pr_all = groups[s]
        if not pc_all or not pr_all:
            continue
        by_surface: dict[str, tuple[list[int], list[int]]] = {}
        for i in pc_all:
            by_surface.setdefault(cand[i], ([], []))[0].append(i)
        for j in pr_all:
            by_surface.setdefault(ref[j], ([], []))[1].append(j)
        group_surfaces.append([by_surface[w] for w in sorted(by_surface)])

    option_lists = []
    over_budget = False
    total = 1
    for surfaces in group_surfaces:
        options = _group_edge_options(surfaces)
        if options is None:
            over_budget = True
            break
        option_lists.append(options)
        total *= len(options)
        if total > _ALIGN_BUDGET:
            over_budget = True
            break

    if over_budget:
        pairs: list[tuple[int, int]] = []
        for surfaces in group_surfaces:
            pairs.extend(_greedy_group_edges(surfaces))
        return sorted(pairs)

    best = None
    best_key = None
    for combo in itertools.product(*option_lists):
        pairs = sorted(edge for edges in combo for edge in edges)
        key = (_crossings(pairs), _chunk_count(pairs), tuple(pairs))
        if best_key is None or key < best_key:
            best_key = key
            best = pairs
    return best if best is not None else []


def meteor_lite(candidate: str, reference: str, p: MeteorParams = MeteorParams()) -> float:
    """METEOR with exact and stem stages only.

    P = m/|cand|, R = m/|ref|, F = P*R/(alpha*P + (1-alpha)*R),
    penalty = gamma*(chunks/m)^beta, score = F*(1-penalty).
    """
    cand = tokenize(candidate, DEFAULT_TOKENIZER)
    ref = tokenize(reference, DEFAULT_TOKENIZER)
    if not cand or not ref:
        return 0.0
    pairs = align_tokens(cand, ref, stemming=p.stemming)
    m = len(pairs)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    f_mean = precision * recall / (p.alpha * precision + (1.0 - p.alpha) * recall)
    penalty = p.gamma * (_chunk_count(pairs) / m) ** p.beta
    return f_mean * (1.0 - penalty)


# ---------------------------------------------------------------------------
# Hungarian assignment


def _solve_min_assignment(cost: np.ndarray):
    """Shortest-augmenting-path assignment with potentials, O(n^3).

    Returns (col_to_row, u, v), all 1-indexed with a 0 sentinel slot.
    """
    n = cost.shape[0]
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            row = cost[i0 - 1]
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return p, u, v


def _can_complete(tight: np.ndarray, start: int, used_cols: list[bool]) -> bool:
    """Can rows start..n-1 be perfectly matched into the unused columns?"""
    n = tight.shape[0]
    match_col = [-1] * n

    def try_row(r: int, visited: list[bool]) -> bool:
        for c in range(n):
            if used_cols[c] or visited[c] or not tight[r, c]:
                continue
            visited[c] = True
            if match_col[c] == -1 or try_row(match_col[c], visited):
                match_col[c] = r
                return True
        return False

    for r in range(start, n):
        if not try_row(r, [False] * n):
            return False
    return True


def hungarian_max(matrix) -> tuple[list[tuple[int, int]], float]:
    """Maximum-total one-to-one assignment of rows to columns.

    Rectangular input is zero-padded to square; the returned pairs
    cover min(rows, cols) real cells. Among optimal assignments the
    lexicographically smallest (by ascending row, then column) is
    returned, found by walking rows in order and keeping a column only
    if the remaining rows can still be matched within the tight
    subgraph of the optimal potentials.
    """
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValidationError("matrix must be 2-d and nonempty")
    if np.any(np.isnan(arr)):
        raise ValidationError("matrix contains NaN")
    if np.any(np.isinf(arr)):
        raise ValidationError("matrix contains infinity")

    rows, cols = arr.shape
    n = max(rows, cols)
    padded = np.zeros((n, n), dtype=np.float64)
    padded[:rows, :cols] = arr
    cost = -padded

    _p, u, v = _solve_min_assignment(cost)
    eps = 1e-9 * max(1.0, float(np.abs(cost).max()))
    reduced = cost - np.array(u[1:])[:, None] - np.array(v[1:])[None, :]
    tight = reduced <= eps

    assigned = [-1] * n
    used_cols = [False] * n
    for i in range(n):
        for j in range(n):
            if used_cols[j] or not tight[i, j]:
                continue
            used_cols[j] = True
            if _can_complete(tight, i + 1, used_cols):
                assigned[i] = j
                break
            used_cols[j] = False
        if assigned[i] == -1:
            raise ValidationError("assignment extraction failed; matrix ill-formed")

    pairs = [
        (r, assigned[r]) for r in range(n) if r < rows and assigned[r] < cols
    ]
    total = 0.0
    for r, c in pairs:
        total += float(arr[r, c])
    return pairs, total


# ---------------------------------------------------------------------------
# Per-claim and dataset-level scores


def _pair_text(item, mode: str) -> str:
    if mode == "Q_only":
        return item.question
    return f"{item.question} {item.answer}"


def hu_meteor(claim_pred, claim_gold, mode: str, p: MeteorParams = MeteorParams()) -> float:
    """Best one-to-one METEOR matching of predictions to gold, over |gold|.

    Normalizing by the gold count means padding out extra predictions
    can never raise the score.
    """
    if not claim_gold:
        raise ValidationError("hu_meteor requires non-empty gold evidence")
    if mode not in ("Q_only", "QA"):
        raise ValidationError(f"mode must be Q_only or QA, got {mode!r}")
    if not claim_pred:
        return 0.0
    matrix = [
        [meteor_lite(_pair_text(pred, mode), _pair_text(gold, mode), p) for gold in claim_gold]
        for pred in claim_pred
    ]
    _pairs, total = hungarian_max(matrix)
    return total / len(claim_gold)


@dataclass(frozen=True)
class PredEvidence:
    question: str
    answer: str
    source_url: str = ""
    answer_type: str = ""


@dataclass(frozen=True)
class PredictionRecord:
    claim_id: int
    claim: str
    evidence: tuple[PredEvidence, ...]
    verdict: VeracityLabel
    ratings: dict | None = None


def load_predictions(path: str) -> list[PredictionRecord]:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise ValidationError(f"{path}: expected a JSON array")
    records = []
    for pos, item in enumerate(data):
        try:
            evidence = tuple(
                PredEvidence(
                    question=str(e["question"]),
                    answer=str(e["answer"]),
                    source_url=str(e.get("source_url", "")),
                    answer_type=str(e.get("answer_type", "")),
                )
                for e in item.get("evidence", [])
            )
            records.append(
                PredictionRecord(
                    claim_id=int(item["claim_id"]),
                    claim=str(item.get("claim", "")),
                    evidence=evidence,
                    verdict=parse_label(item["verdict"]),
                    ratings=item.get("ratings"),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: element {pos}: {exc}") from exc
    return records


@dataclass(frozen=True)
class PerClaimScore:
    claim_id: int
    hu_meteor_q: float
    hu_meteor_qa: float
    label_pred: VeracityLabel
    label_gold: VeracityLabel

    @property
    def label_correct(self) -> bool:
        return self.label_pred == self.label_gold


@dataclass(frozen=True)
class ScoreReport:
    q_score: float
    qa_score: float
    averitec_score: dict[float, float]
    accuracy: float
    macro_f1: float
    per_claim: tuple[PerClaimScore, ...]

    def to_json_dict(self) -> dict:
        return {
            "q_score": self.q_score,
            "qa_score": self.qa_score,
            "averitec_score": {f"{t:g}": s for t, s in self.averitec_score.items()},
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_claim": [
                {
                    "claim_id": c.claim_id,
                    "hu_meteor_q": c.hu_meteor_q,
                    "hu_meteor_qa": c.hu_meteor_qa,
                    "label_pred": c.label_pred.value,
                    "label_gold": c.label_gold.value,
                    "label_correct": c.label_correct,
                }
                for c in self.per_claim
            ],
        }

    def csv_rows(self, thresholds: tuple[float, ...]) -> list[list[str]]:
        header = ["claim_id", "q", "qa", "label_pred", "label_gold"]
        header += [f"pass@{t:g}" for t in thresholds]
        rows = [header]
        for c in self.per_claim:
            row = [
                str(c.claim_id),
                f"{c.hu_meteor_q:.6f}",
                f"{c.hu_meteor_qa:.6f}",
                c.label_pred.value,
                c.label_gold.value,
            ]
            row += [
                str(int(c.label_correct and c.hu_meteor_qa >= t)) for t in thresholds
            ]
            rows.append(row)
        return rows


def macro_f1_score(
    golds: list[VeracityLabel], preds: list[VeracityLabel]
) -> float:
    """Unweighted mean of per-label F1 over all four labels.

    A label absent from both gold and predictions contributes 0, which
    keeps the metric comparable across runs at the cost of punishing
    small fixtures that do not exercise every label.
    """
    scores = []
    for label in VeracityLabel:
        tp = sum(1 for g, p in zip(golds, preds) if g == label and p == label)
        fp = sum(1 for g, p in zip(golds, preds) if g != label and p == label)
        fn = sum(1 for g, p in zip(golds, preds) if g == label and p != label)
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return sum(scores) / len(scores)


def averitec_score(
    preds: list[PredictionRecord],
    golds: list[Claim],
    cfg: ScoringConfig = ScoringConfig(),
    p: MeteorParams = MeteorParams(),
) -> ScoreReport:
    """Dataset-level evaluation of a prediction file against gold claims.

    A claim counts toward the score at threshold t when its predicted
    label is correct and its QA-mode Hu-METEOR is at least t.
    """
    by_id: dict[int, PredictionRecord] = {}
    duplicates = []
    for record in preds:
        if record.claim_id in by_id:
            duplicates.append(record.claim_id)
        by_id[record.claim_id] = record
    if duplicates:
        raise ValidationError(f"duplicate predictions for claim ids {sorted(set(duplicates))}")

    gold_ids = {c.id for c in golds}
    missing = sorted(gold_ids - set(by_id))
    extra = sorted(set(by_id) - gold_ids)
    if missing or extra:
        raise ValidationError(
            f"prediction/gold id mismatch: missing {missing}, extra {extra}"
        )

    unlabeled = [c.id for c in golds if c.gold_label is None or not c.gold_evidence]
    if unlabeled:
        raise ValidationError(
            f"gold claims without label or evidence cannot be scored: {unlabeled}"
        )

    per_claim = []
    for gold_claim in golds:
        record = by_id[gold_claim.id]
        per_claim.append(
            PerClaimScore(
                claim_id=gold_claim.id,
                hu_meteor_q=hu_meteor(
                    record.evidence, gold_claim.gold_evidence, "Q_only", p
                ),
                hu_meteor_qa=hu_meteor(
                    record.evidence, gold_claim.gold_evidence, "QA", p
                ),
                label_pred=record.verdict,
                label_gold=gold_claim.gold_label,
            )
        )

    n = len(per_claim)
    thresholds_score = {
        t: sum(1 for c in per_claim if c.label_correct and c.hu_meteor_qa >= t) / n
        for t in cfg.thresholds
    }
    return ScoreReport(
        q_score=sum(c.hu_meteor_q for c in per_claim) / n,
        qa_score=sum(c.hu_meteor_qa for c in per_claim) / n,
        averitec_score=thresholds_score,
        accuracy=sum(1 for c in per_claim if c.label_correct) / n,
        macro_f1=macro_f1_score(
            [c.label_gold for c in per_claim], [c.label_pred for c in per_claim]
        ),
        per_claim=tuple(per_claim),
    )
