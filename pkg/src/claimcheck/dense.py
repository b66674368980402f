"""Embeddings, exact cosine search, and MMR reranking.

The embedding provider is pluggable: an HTTP provider speaking an
OpenAI-style /embeddings endpoint, or a deterministic offline mock that
feature-hashes tokens into a fixed-dimension vector. Search is exact
(full scan): per-claim candidate sets are a few thousand vectors at
most, so approximate indexes would only add a dependency.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ProviderError, ValidationError
from .lexical import DEFAULT_TOKENIZER, tokenize

log = logging.getLogger(__name__)

MOCK_DIM = 64


@dataclass(frozen=True)
class EmbeddingProviderConfig:
    kind: str = "mock"
    base_url: str | None = None
    model_name: str | None = None
    batch_size: int = 64
    timeout_s: float = 30.0
    retries: int = 3
    api_key_env: str = "CLAIMCHECK_API_KEY"

    def __post_init__(self):
        if self.kind not in ("http", "mock"):
            raise ConfigError(f"unknown embedding provider kind: {self.kind!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.timeout_s <= 0:
            raise ConfigError("timeout_s must be positive")
        if self.kind == "http" and not (self.base_url and self.model_name):
            raise ConfigError("http embedding provider requires base_url and model_name")

    @property
    def effective_model_name(self) -> str:
        return self.model_name or f"mock-{MOCK_DIM}"


def _check_vector(values: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{what}: expected a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what}: vector has NaN or inf components")
    return arr


def cosine_sim(a, b) -> float:
    """Cosine similarity of two equal-dimension nonzero vectors."""
    va = _check_vector(a, "cosine_sim a")
    vb = _check_vector(b, "cosine_sim b")
    if va.shape != vb.shape:
        raise ValidationError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity undefined for zero-norm vector")
    return float(np.dot(va, vb) / (na * nb))


def mock_embed(text: str) -> np.ndarray:
    """Deterministic feature-hash embedding, unit L2 norm, dimension 64.

    Each token is hashed with blake2b; the first four digest bytes pick
    a bucket and the fifth byte's parity picks the sign. Texts with no
    tokens map to the first basis vector so the result is never zero.
    """
    vec = np.zeros(MOCK_DIM, dtype=np.float64)
    for token in tokenize(text, DEFAULT_TOKENIZER):
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        bucket = int.from_bytes(digest[:4], "little") % MOCK_DIM
        sign = 1.0 if digest[4] % 2 == 0 else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        vec[0] = 1.0
        return vec
    return vec / norm


class MockEmbeddingProvider:
    """Offline provider; deterministic across runs and platforms."""

    def __init__(self, cfg: EmbeddingProviderConfig):
        self.cfg = cfg

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        return [mock_embed(t) for t in texts]


class HttpEmbeddingProvider:
    """OpenAI-compatible embeddings endpoint client.

    The response's per-item "index" field, not array position, decides
    output order. The API key is read from the configured environment
    variable and never logged.
    """

    def __init__(self, cfg: EmbeddingProviderConfig):
        if cfg.kind != "http":
            raise ConfigError("HttpEmbeddingProvider requires kind=http")
        self.cfg = cfg

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_batch(self, batch: list[str]) -> list[np.ndarray]:
        import requests

        url = self.cfg.base_url.rstrip("/") + "/embeddings"
        body = {"model": self.cfg.model_name, "input": batch}
        last_err = "no attempt made"
        for attempt in range(self.cfg.retries + 1):
            try:
                resp = requests.post(
                    url, json=body, headers=self._headers(), timeout=self.cfg.timeout_s
                )
            except requests.RequestException as exc:
                last_err = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    return self._parse_response(resp.json(), len(batch))
                last_err = f"HTTP {resp.status_code}: {resp.text[:200]}"
            if attempt < self.cfg.retries:
                time.sleep(min(2.0**attempt, 8.0))
        raise ProviderError(f"embeddings request failed after retries: {last_err}")

    @staticmethod
    def _parse_response(payload: dict, expected: int) -> list[np.ndarray]:
        items = payload.get("data")
        if not isinstance(items, list) or len(items) != expected:
            raise ProviderError(
                f"embeddings response has {len(items) if isinstance(items, list) else 'no'}"
                f" items, expected {expected}"
            )
        out: list[np.ndarray | None] = [None] * expected
        for item in items:
            idx = item.get("index")
            if not isinstance(idx, int) or not 0 <= idx < expected:
                raise ProviderError(f"embeddings response has bad index {idx!r}")
            out[idx] = _check_vector(item.get("embedding"), f"embedding {idx}")
        if any(v is None for v in out):
            raise ProviderError("embeddings response is missing indices")
        return out  # type: ignore[return-value]

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        vectors: list[np.ndarray] = []
        for start in range(0, len(texts), self.cfg.batch_size):
            vectors.extend(self._post_batch(texts[start : start + self.cfg.batch_size]))
        return vectors


def make_embedding_provider(cfg: EmbeddingProviderConfig):
    if cfg.kind == "mock":
        return MockEmbeddingProvider(cfg)
    return HttpEmbeddingProvider(cfg)


def embed_batch(texts: list[str], cfg: EmbeddingProviderConfig) -> list[np.ndarray]:
    """Embed texts in order, enforcing a uniform dimension across the batch."""
    if not texts:
        raise ValidationError("embed_batch requires at least one text")
    vectors = make_embedding_provider(cfg).embed(texts)
    dims = {v.shape[0] for v in vectors}
    if len(dims) > 1:
        raise ProviderError(f"embedding dimensions disagree within one batch: {sorted(dims)}")
    return vectors


class EmbeddingCache:
    """JSON-lines vector cache keyed by claim, model, and text hash.

    Real embedding runs are the expensive part of retrieval, so vectors
    are persisted and reruns only embed what is missing.
    """

    def __init__(self, path: str):
        self.path = path
        self._entries: dict[str, np.ndarray] = {}
        if os.path.isfile(path):
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        obj = json.loads(line)
                        values = np.asarray(obj["values"], dtype=np.float64)
                        if int(obj["dim"]) != values.shape[0]:
                            raise ValueError("dim field disagrees with values length")
                        self._entries[obj["key"]] = values
                    except (ValueError, KeyError, TypeError) as exc:
                        raise ValidationError(
                            f"{path}: line {lineno}: bad cache entry: {exc}"
                        ) from exc

    @staticmethod
    def key_for(claim_id: int, model_name: str, text: str) -> str:
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:24]
        return f"{claim_id}:{model_name}:{digest}"

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> np.ndarray | None:
        return self._entries.get(key)

    def put_many(self, items: list[tuple[str, np.ndarray]]) -> None:
        fresh = [(k, v) for k, v in items if k not in self._entries]
        if not fresh:
            return
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            for key, vec in fresh:
                self._entries[key] = vec
                fh.write(
                    json.dumps(
                        {"key": key, "dim": int(vec.shape[0]), "values": vec.tolist()}
                    )
                    + "\n"
                )


def embed_cached(
    texts: list[str],
    claim_id: int,
    cfg: EmbeddingProviderConfig,
    cache: EmbeddingCache | None,
) -> list[np.ndarray]:
    """Embed texts, serving repeats from the cache when one is given."""
    if cache is None:
        return embed_batch(texts, cfg)
    model = cfg.effective_model_name
    keys = [EmbeddingCache.key_for(claim_id, model, t) for t in texts]
    missing_positions = []
    seen_keys = set()
    for i, key in enumerate(keys):
        if cache.get(key) is None and key not in seen_keys:
            missing_positions.append(i)
            seen_keys.add(key)
    if missing_positions:
        fresh = embed_batch([texts[i] for i in missing_positions], cfg)
        cache.put_many([(keys[i], vec) for i, vec in zip(missing_positions, fresh)])
    out = []
    for key in keys:
        vec = cache.get(key)
        if vec is None:
            raise ProviderError(f"cache did not resolve key {key}")
        out.append(vec)
    return out


@dataclass(frozen=True)
class VectorIndex:
    """Unit-normalized vectors with parallel payload identifiers."""

    matrix: np.ndarray
    payload_ids: tuple

    @classmethod
    def build(cls, vectors: list[np.ndarray], payload_ids: list) -> "VectorIndex":
        if len(vectors) != len(payload_ids):
            raise ValidationError("vectors and payload_ids must be parallel lists")
        if not vectors:
            return cls(matrix=np.zeros((0, 0)), payload_ids=())
        mat = np.stack([_check_vector(v, "index vector") for v in vectors])
        norms = np.linalg.norm(mat, axis=1)
        if np.any(norms == 0.0):
            raise ValidationError("cannot index a zero-norm vector")
        mat = mat / norms[:, None]
        mat.setflags(write=False)
        return cls(matrix=mat, payload_ids=tuple(payload_ids))

    def __len__(self) -> int:
        return len(self.payload_ids)


def knn(index: VectorIndex, query, p: int) -> list[tuple[object, float]]:
    """Exact top-p by cosine similarity; ties keep insertion order."""
    if p < 1:
        raise ValidationError(f"p must be >= 1, got {p}")
    if len(index) == 0:
        return []
    q = _check_vector(query, "knn query")
    if q.shape[0] != index.matrix.shape[1]:
        raise ValidationError(
            f"query dim {q.shape[0]} does not match index dim {index.matrix.shape[1]}"
        )
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise ValidationError("knn query has zero norm")
    # elementwise product + per-row reduce, not BLAS gemv: gemv can give
    # bit-identical rows results a ulp apart, which would let float noise
    # decide ties instead of insertion order
    sims = (index.matrix * (q / norm)).sum(axis=1)
    order = np.argsort(-sims, kind="stable")[:p]
    return [(index.payload_ids[i], float(sims[i])) for i in order]


@dataclass(frozen=True)
class MmrConfig:
    lambda_: float = 0.75
    pool_size: int = 40
    select_size: int = 10

    def __post_init__(self):
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ConfigError("lambda must be in [0, 1]")
        if self.select_size > self.pool_size:
            raise ConfigError("select_size must not exceed pool_size")


def mmr_select(candidates: list[tuple[object, np.ndarray, float]], cfg: MmrConfig) -> list:
    """Greedy maximal-marginal-relevance selection.

    Each step picks the candidate maximizing
    lambda*sim_to_query - (1-lambda)*max(sim to already selected),
    the redundancy term being 0 while nothing is selected. Score ties
    prefer the higher sim_to_query, then earlier input position. The
    running redundancy starts undefined rather than at zero so that
    negative similarities to selected items are preserved.
    """
    if not candidates:
        raise ValidationError("mmr_select requires at least one candidate")
    ids = [c[0] for c in candidates]
    sims_q = np.array([c[2] for c in candidates], dtype=np.float64)
    mat = np.stack([_check_vector(c[1], f"candidate {c[0]}") for c in candidates])
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise ValidationError("mmr candidate has zero norm")
    unit = mat / norms[:, None]

    n = len(candidates)
    take = min(cfg.select_size, n)
    selected: list[int] = []
    remaining = list(range(n))
    redundancy: np.ndarray | None = None

    while len(selected) < take:
        best_i = None
        best_key = None
        for i in remaining:
            red = 0.0 if redundancy is None else float(redundancy[i])
            score = cfg.lambda_ * float(sims_q[i]) - (1.0 - cfg.lambda_) * red
            key = (score, float(sims_q[i]), -i)
            if best_key is None or key > best_key:
                best_key = key
                best_i = i
        selected.append(best_i)
        remaining.remove(best_i)
        # same reasoning as in knn: keep duplicate rows bit-identical so
        # the documented index tie-break actually decides
        sims_to_new = (unit * unit[best_i]).sum(axis=1)
        redundancy = sims_to_new if redundancy is None else np.maximum(redundancy, sims_to_new)

    return [ids[i] for i in selected]
