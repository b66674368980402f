"""Per-claim retrieval: chunk, BM25-prune, embed, KNN pool, MMR select.

The stage order is fixed. Chunking covers every document; BM25 cuts the
chunk set to omega before any embedding happens (embedding dominates
cost); exact cosine search builds the relevance pool; MMR picks the
final k sources, trading relevance against redundancy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .corpus import Chunk, Claim, Document, chunk_document
from .dense import (
    EmbeddingCache,
    EmbeddingProviderConfig,
    MmrConfig,
    VectorIndex,
    embed_cached,
    knn,
    mmr_select,
)
from .errors import ConfigError
from .lexical import DEFAULT_TOKENIZER, Bm25Params, bm25_top, build_index, tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalConfig:
    max_chars: int = 2048
    omega: int = 6000
    pool_size: int = 40
    k: int = 10
    lambda_: float = 0.75

    def __post_init__(self):
        if self.max_chars < 1:
            raise ConfigError("max_chars must be >= 1")
        if not self.k <= self.pool_size <= self.omega:
            raise ConfigError(
                f"need k <= pool_size <= omega, got k={self.k}, "
                f"pool_size={self.pool_size}, omega={self.omega}"
            )
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ConfigError("lambda must be in [0, 1]")


@dataclass(frozen=True)
class RetrievedSource:
    rank: int
    chunk: Chunk
    sim_to_claim: float


@dataclass(frozen=True)
class RetrievalResult:
    """Sources plus the stage-by-stage trace.

    An empty sources list is a legitimate outcome (nothing matched the
    claim lexically), not an error; downstream generation short-circuits
    to Not Enough Evidence.
    """

    claim_id: int
    sources: tuple[RetrievedSource, ...]
    trace: dict


def _empty_result(claim: Claim, pruned_count: int = 0) -> RetrievalResult:
    return RetrievalResult(
        claim_id=claim.id,
        sources=(),
        trace={
            "claim_id": claim.id,
            "pruned_count": pruned_count,
            "pool": [],
            "selected": [],
        },
    )


def retrieve(
    claim: Claim,
    docs: list[Document],
    cfg: RetrievalConfig,
    embedding_cfg: EmbeddingProviderConfig,
    cache: EmbeddingCache | None = None,
) -> RetrievalResult:
    """Run the full retrieval pipeline for one claim."""
    chunks: list[Chunk] = []
    for doc in docs:
        chunks.extend(chunk_document(doc, cfg.max_chars))
    if not chunks:
        return _empty_result(claim)

    tokenized = [tokenize(c.text, DEFAULT_TOKENIZER) for c in chunks]
    query_tokens = tokenize(claim.text, DEFAULT_TOKENIZER)
    if not query_tokens or all(not t for t in tokenized):
        return _empty_result(claim)

    index = build_index(tokenized, Bm25Params())
    pruned = bm25_top(index, query_tokens, cfg.omega)
    if not pruned:
        return _empty_result(claim)

    # Duplicate chunk texts (mirrored pages, boilerplate) would let MMR
    # hand back the same evidence twice; keep the best-ranked copy only.
    survivors: list[int] = []
    seen_texts: set[str] = set()
    for ordinal, _score in pruned:
        text = chunks[ordinal].text
        if text in seen_texts:
            continue
        seen_texts.add(text)
        survivors.append(ordinal)

    texts = [claim.text] + [chunks[o].text for o in survivors]
    vectors = embed_cached(texts, claim.id, embedding_cfg, cache)
    claim_vec, chunk_vecs = vectors[0], vectors[1:]

    index_dense = VectorIndex.build(chunk_vecs, survivors)
    pool = knn(index_dense, claim_vec, cfg.pool_size)

    vec_by_ordinal = dict(zip(survivors, chunk_vecs))
    candidates = [(ordinal, vec_by_ordinal[ordinal], sim) for ordinal, sim in pool]
    mmr_cfg = MmrConfig(
        lambda_=cfg.lambda_, pool_size=cfg.pool_size, select_size=cfg.k
    )
    selected = mmr_select(candidates, mmr_cfg)

    sim_by_ordinal = dict(pool)
    sources = tuple(
        RetrievedSource(
            rank=i + 1, chunk=chunks[ordinal], sim_to_claim=sim_by_ordinal[ordinal]
        )
        for i, ordinal in enumerate(selected)
    )
    trace = {
        "claim_id": claim.id,
        "pruned_count": len(pruned),
        "pool": [
            {"key": chunks[ordinal].key, "sim": sim} for ordinal, sim in pool
        ],
        "selected": [
            {"key": s.chunk.key, "rank": s.rank} for s in sources
        ],
    }
    return RetrievalResult(claim_id=claim.id, sources=sources, trace=trace)
