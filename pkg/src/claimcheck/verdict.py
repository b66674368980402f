"""Likert ratings to label probabilities, ensembling, final label choice.

The generator's per-label agreement ratings become a distribution via
softmax. Optionally that distribution is averaged with probabilities
from an external classifier supplied as a file; the final label is the
argmax with deterministic tie handling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .corpus import LABEL_TIE_ORDER, VeracityLabel
from .errors import ConfigError, ValidationError
from .generator import validate_ratings

_SUM_TOL = 1e-9


@dataclass(frozen=True)
class EnsembleConfig:
    """weight_external presets used in practice: 0.5, 0.3, 0.1."""

    weight_external: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.weight_external <= 1.0:
            raise ConfigError("weight_external must be in [0, 1]")


def softmax(values: list[float]) -> list[float]:
    exps = [math.exp(v) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def validate_distribution(p: dict) -> None:
    if set(p.keys()) != set(VeracityLabel):
        raise ValidationError("distribution must cover exactly the four labels")
    total = 0.0
    for label, prob in p.items():
        if not 0.0 <= prob <= 1.0:
            raise ValidationError(
                f"probability for {label.value} out of [0, 1]: {prob}"
            )
        total += prob
    if abs(total - 1.0) > _SUM_TOL:
        raise ValidationError(f"distribution sums to {total}, expected 1")


def likert_softmax(ratings: dict) -> dict:
    """p(label) = exp(rating) / sum of exp(ratings)."""
    validate_ratings(ratings)
    labels = list(LABEL_TIE_ORDER)
    probs = softmax([float(ratings[label]) for label in labels])
    return dict(zip(labels, probs))


def ensemble(p_llm: dict, p_ext: dict, cfg: EnsembleConfig) -> dict:
    """Pointwise weighted average: w*external + (1-w)*llm."""
    validate_distribution(p_llm)
    validate_distribution(p_ext)
    w = cfg.weight_external
    return {
        label: w * p_ext[label] + (1.0 - w) * p_llm[label] for label in VeracityLabel
    }


def final_label(p: dict, llm_verdict: VeracityLabel) -> VeracityLabel:
    """Argmax with ties going to the LLM's own verdict when it is tied,
    else to the first tied label in the fixed order Supported, Refuted,
    Conflicting Evidence/Cherrypicking, Not Enough Evidence."""
    validate_distribution(p)
    best = max(p.values())
    tied = [label for label in LABEL_TIE_ORDER if p[label] == best]
    if llm_verdict in tied:
        return llm_verdict
    return tied[0]


def load_external_probs(path: str) -> dict[int, dict]:
    """Load per-claim label distributions from an external classifier file."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise ValidationError(f"{path}: expected a JSON array")
    out: dict[int, dict] = {}
    for pos, item in enumerate(data):
        try:
            claim_id = item["claim_id"]
            raw = item["probs"]
            if not isinstance(claim_id, int) or not isinstance(raw, dict):
                raise ValidationError("claim_id must be int and probs an object")
            probs = {}
            for label in VeracityLabel:
                if label.value not in raw:
                    raise ValidationError(f"probs missing label {label.value!r}")
                probs[label] = float(raw[label.value])
            validate_distribution(probs)
            if claim_id in out:
                raise ValidationError(f"duplicate claim_id {claim_id}")
            out[claim_id] = probs
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: element {pos}: {exc}") from exc
        except ValidationError as exc:
            raise ValidationError(f"{path}: element {pos}: {exc}") from exc
    return out
