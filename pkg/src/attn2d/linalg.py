"""Dense matrix primitives over numpy arrays.

Matrices are plain 2-D ndarrays; precision is the dtype (float32 or
float64). These wrappers add conformance checks and route the product
through the selected kernel backend so the summation order is fixed.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import kernels
from .errors import ShapeError


class Precision(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.SINGLE else np.float64)


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray, transpose_b: bool = False) -> np.ndarray:
    """Matrix product a @ b (or a @ b.T) with deterministic summation order."""
    a = as_matrix(a)
    b = as_matrix(b)
    inner_b = b.shape[1] if transpose_b else b.shape[0]
    if a.shape[1] != inner_b:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}"
                         f"{'^T' if transpose_b else ''}")
    cols = b.shape[0] if transpose_b else b.shape[1]
    out = np.zeros((a.shape[0], cols), dtype=np.result_type(a, b))
    if transpose_b:
        kernels.matmul_t(a, b, out)
    else:
        kernels.matmul(a, b, out)
    return out


def row_max(a: np.ndarray) -> np.ndarray:
    """Per-row maximum; rows of an empty-width matrix are not allowed."""
    a = as_matrix(a)
    if a.shape[1] == 0:
        raise ShapeError("row_max needs at least one column")
    return a.max(axis=1)


def diag_scale(v: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Rows of a divided by the entries of v, i.e. Diag(v)^-1 @ a.

    A zero entry in v means a fully masked query row reached finalization;
    that is reported as ZeroDivisionError rather than producing inf/nan.
    """
    v = np.asarray(v)
    a = as_matrix(a)
    if v.ndim != 1 or v.shape[0] != a.shape[0]:
        raise ShapeError(f"scale vector {v.shape} does not match rows of {a.shape}")
    if np.any(v == 0):
        raise ZeroDivisionError("zero denominator row in diag_scale")
    return a / v[:, None]
