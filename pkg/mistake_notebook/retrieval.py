"""
Ret(x, M): score a query embedding against subject embeddings, keep the
top-k hits above the similarity threshold, and find merge candidates.

All operations are read-only over the store.
"""
from typing import NamedTuple, Optional, Sequence

import numpy as np

from mistake_notebook.errors import DimensionMismatch
from mistake_notebook.logger_config import get_logger
from mistake_notebook.memory import MemoryStore
from mistake_notebook.schemas import RetrievalConfig
from mistake_notebook.vectors import as_array, cosine_similarity, l2_normalize

logger = get_logger(__name__)

__all__ = [
    "RetrievalHit",
    "RetrievalResult",
    "cosine_similarity",
    "score_entries",
    "retrieve",
    "find_merge_candidate",
]


class RetrievalHit(NamedTuple):
    entry_index: int
    similarity: float


RetrievalResult = list[RetrievalHit]


def score_entries(query_embedding: Sequence[float], store: MemoryStore) -> list[float]:
    """
    Similarity of the query to every entry, in insertion order.

    Entries are unit-normalized, so the score is a dot product with the
    normalized query.

    Raises:
        DimensionMismatch: If the query dimension differs from the store's
    """
    if len(store) == 0:
        return []
    if store.dimension is not None and len(query_embedding) != store.dimension:
        raise DimensionMismatch(store.dimension, len(query_embedding))
    query = as_array(l2_normalize(query_embedding))
    matrix = np.asarray([entry.embedding for entry in store.entries], dtype=np.float64)
    scores = np.clip(matrix @ query, -1.0, 1.0)
    return [float(score) for score in scores]


def _ranked(scores: list[float], store: MemoryStore) -> list[int]:
    # descending similarity; ties by insertion order, then subject
    return sorted(
        range(len(scores)),
        key=lambda i: (-scores[i], i, store[i].subject),
    )


def retrieve(
    query_embedding: Sequence[float],
    store: MemoryStore,
    cfg: RetrievalConfig,
) -> RetrievalResult:
    """
    Top-k entries whose similarity reaches the retrieval threshold.

    Args:
        query_embedding: Embedding of the raw query text
        store: Memory to search (linear scan)
        cfg: top_k and similarity_threshold

    Returns:
        Hits in descending similarity, at most top_k long
    """
    scores = score_entries(query_embedding, store)
    hits = [
        RetrievalHit(i, scores[i])
        for i in _ranked(scores, store)
        if scores[i] >= cfg.similarity_threshold
    ][: cfg.top_k]
    logger.debug(
        f"Retrieval over {len(store)} entries: "
        f"{[(store[h.entry_index].subject, round(h.similarity, 4)) for h in hits]}"
    )
    return hits


def find_merge_candidate(
    subject_embedding: Sequence[float],
    store: MemoryStore,
    cfg: RetrievalConfig,
) -> Optional[int]:
    """
    Index of the single most similar entry if it reaches the merge threshold.

    Returns:
        Entry index to merge into, or None to append a new node
    """
    scores = score_entries(subject_embedding, store)
    if not scores:
        return None
    best = _ranked(scores, store)[0]
    if scores[best] >= cfg.merge_threshold:
        logger.debug(f"Merge candidate {store[best].subject!r} at similarity {scores[best]:.4f}")
        return best
    return None
