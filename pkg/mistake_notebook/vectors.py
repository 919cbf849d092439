"""
Vector helpers shared by the memory store, retrieval and the gateway.
"""
from typing import Sequence

import numpy as np

from mistake_notebook.errors import DimensionMismatch, ZeroNorm

NORM_TOLERANCE = 1e-6


def as_array(vector: Sequence[float]) -> np.ndarray:
    return np.asarray(vector, dtype=np.float64)


def l2_normalize(vector: Sequence[float]) -> tuple[float, ...]:
    """
    Scale a vector to unit L2 norm.

    Raises:
        ZeroNorm: If the vector has zero (or non-finite) norm
    """
    array = as_array(vector)
    norm = float(np.linalg.norm(array))
    if norm == 0.0 or not np.isfinite(norm):
        raise ZeroNorm("Cannot normalize a zero-norm vector")
    return tuple(float(x) for x in array / norm)


def is_unit(vector: Sequence[float], tolerance: float = NORM_TOLERANCE) -> bool:
    return abs(float(np.linalg.norm(as_array(vector))) - 1.0) <= tolerance


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """
    Cosine similarity of two vectors, clipped to [-1, 1].

    Args:
        a: First vector
        b: Second vector

    Returns:
        Similarity in [-1, 1]

    Raises:
        DimensionMismatch: If the vectors differ in length
        ZeroNorm: If either vector has zero norm
    """
    left = as_array(a)
    right = as_array(b)
    if left.shape != right.shape:
        raise DimensionMismatch(len(left), len(right))
    norm_left = float(np.linalg.norm(left))
    norm_right = float(np.linalg.norm(right))
    if norm_left == 0.0 or norm_right == 0.0:
        raise ZeroNorm("Cosine similarity is undefined for a zero-norm vector")
    value = float(np.dot(left, right) / (norm_left * norm_right))
    return min(1.0, max(-1.0, value))


def canonical_float(value: float) -> str:
    """Nine significant digits, the persisted text form of embedding components."""
    text = format(float(value), ".9g")
    if text == "-0":
        return "0"
    return text
