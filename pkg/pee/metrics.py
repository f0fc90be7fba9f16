"""Top-K ranking metrics."""

import math
from typing import Iterable, Optional, Sequence, Set, Tuple

import numpy as np


def recall_at_k(ranked: Sequence[int], truth: Set[int], k: int) -> float:
    """Share of ground truth items present in the first ``k`` ranked items."""
    if not truth:
        raise ValueError("Ground truth is empty.")
    hits = sum(1 for item in list(ranked)[:k] if item in truth)
    return hits / len(truth)


def idcg(n: int) -> float:
    return sum(1.0 / math.log2(i + 1) for i in range(1, n + 1))


def ndcg_at_k(ranked: Sequence[int], truth: Set[int], k: int) -> float:
    """NDCG with binary gain and ``log2(rank + 1)`` discount."""
    if not truth:
        raise ValueError("Ground truth is empty.")
    dcg = 0.0
    for index, item in enumerate(list(ranked)[:k]):
        if item in truth:
            dcg += 1.0 / math.log2(index + 2)
    return dcg / idcg(min(k, len(truth)))


def top_k(
    scores: np.ndarray, k: int, excluded: Optional[Iterable[int]] = None
) -> np.ndarray:
    """Indices of the ``k`` best scores; ties go to the lower index."""
    scores = np.asarray(scores, dtype=np.float64).copy()
    candidates = np.ones(len(scores), dtype=bool)
    if excluded is not None:
        excluded = np.fromiter(excluded, dtype=np.int64)
        candidates[excluded] = False
    indices = np.flatnonzero(candidates)
    order = np.lexsort((indices, -scores[indices]))
    return indices[order[:k]]


def evaluate_ranking(
    ranked: Sequence[int], truth: Set[int], k: int
) -> Tuple[float, float]:
    return recall_at_k(ranked, truth, k), ndcg_at_k(ranked, truth, k)
