"""Exact attention: dense reference, blockwise streaming form, and the
merge algebra that lets partial results computed on disjoint key sets be
combined into the same numbers the dense form produces.

A partial result is the triple (m, n, d): per-query-row running score
maxima, unnormalized weighted values, and softmax denominators. The empty
partial (m = -inf, n = 0, d = 0) is the exact identity of attn_fix.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels, linalg
from .errors import FullyMaskedRowError, ShapeError


class MaskKind(str, Enum):
    NONE = "none"
    CAUSAL = "causal"
    ADDITIVE = "additive"


@dataclass(frozen=True)
class MaskSpec:
    """Masking rule: nothing, causal on global token positions, or an
    explicit additive matrix (dense reference path only)."""

    kind: MaskKind = MaskKind.NONE
    additive: np.ndarray | None = None

    def __post_init__(self):
        if self.kind is MaskKind.ADDITIVE and self.additive is None:
            raise ShapeError("additive mask requires a matrix")
        if self.kind is not MaskKind.ADDITIVE and self.additive is not None:
            raise ShapeError(f"mask kind {self.kind.value!r} takes no matrix")

    @classmethod
    def none(cls) -> "MaskSpec":
        return cls(MaskKind.NONE)

    @classmethod
    def causal(cls) -> "MaskSpec":
        return cls(MaskKind.CAUSAL)


@dataclass
class TokenShard:
    """Rows of a global (n, h) tensor together with their global positions.

    indices must be strictly increasing; masking decisions use them, so a
    shard can hold any subset of the sequence.
    """

    data: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.data = linalg.as_matrix(self.data)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1 or len(self.indices) != self.data.shape[0]:
            raise ShapeError(
                f"{len(self.indices)} indices for {self.data.shape[0]} rows")
        if len(self.indices) > 1 and not np.all(np.diff(self.indices) > 0):
            raise ShapeError("shard indices must be strictly increasing")

    @property
    def rows(self) -> int:
        return self.data.shape[0]


@dataclass
class PartialAttn:
    """Streaming attention state for a fixed set of query rows."""

    m: np.ndarray  # (rows,) running score maxima, -inf where nothing attended
    n: np.ndarray  # (rows, h) unnormalized weighted values
    d: np.ndarray  # (rows,) softmax denominators

    def __post_init__(self):
        self.m = np.asarray(self.m)
        self.n = linalg.as_matrix(self.n)
        self.d = np.asarray(self.d)
        if not (self.m.shape == self.d.shape == (self.n.shape[0],)):
            raise ShapeError(
                f"inconsistent partial shapes m={self.m.shape} n={self.n.shape} d={self.d.shape}")

    @classmethod
    def empty(cls, rows: int, h: int, dtype=np.float64) -> "PartialAttn":
        return cls(
            m=np.full(rows, -np.inf, dtype=dtype),
            n=np.zeros((rows, h), dtype=dtype),
            d=np.zeros(rows, dtype=dtype),
        )

    @property
    def rows(self) -> int:
        return self.n.shape[0]

    @property
    def logsumexp(self) -> np.ndarray:
        """Equivalent single-vector form m + log d (-inf for empty rows)."""
        with np.errstate(divide="ignore"):
            return np.where(self.d > 0, self.m + np.log(self.d), -np.inf)

    def copy(self) -> "PartialAttn":
        return PartialAttn(self.m.copy(), self.n.copy(), self.d.copy())


def _dense_scores(q, k, mask: MaskSpec, scale: float) -> np.ndarray:
    s = linalg.matmul(q, k, transpose_b=True) * q.dtype.type(scale)
    nq, nk = s.shape
    if mask.kind is MaskKind.CAUSAL:
        i = np.arange(nq)[:, None]
        j = np.arange(nk)[None, :]
        s = np.where(i >= j, s, -np.inf)
    elif mask.kind is MaskKind.ADDITIVE:
        if mask.additive.shape != s.shape:
            raise ShapeError(f"additive mask {mask.additive.shape} vs scores {s.shape}")
        s = s + mask.additive
    return s


def _dense_softmax(s: np.ndarray) -> np.ndarray:
    m = linalg.row_max(s)
    if np.any(np.isneginf(m)):
        raise FullyMaskedRowError(
            f"query rows {np.flatnonzero(np.isneginf(m)).tolist()} attend no keys")
    e = np.exp(s - m[:, None])
    return e / e.sum(axis=1)[:, None]


def reference_attention(q, k, v, mask: MaskSpec | None = None, scale: float = 1.0) -> np.ndarray:
    """Dense softmax(scale * q @ k.T + mask) @ v, numerically stabilized."""
    mask = mask or MaskSpec.none()
    q, k, v = linalg.as_matrix(q), linalg.as_matrix(k), linalg.as_matrix(v)
    if k.shape[0] != v.shape[0] or q.shape[1] != k.shape[1]:
        raise ShapeError(f"q{q.shape} k{k.shape} v{v.shape} do not conform")
    return _dense_softmax(_dense_scores(q, k, mask, scale)) @ v


def reference_attention_grad(q, k, v, d_out, mask: MaskSpec | None = None,
                             scale: float = 1.0):
    """Dense analytic gradients (dq, dk, dv) of reference_attention."""
    mask = mask or MaskSpec.none()
    q, k, v = linalg.as_matrix(q), linalg.as_matrix(k), linalg.as_matrix(v)
    d_out = linalg.as_matrix(d_out)
    p = _dense_softmax(_dense_scores(q, k, mask, scale))
    o = p @ v
    if d_out.shape != o.shape:
        raise ShapeError(f"d_out {d_out.shape} vs output {o.shape}")
    dv = p.T @ d_out
    dp = d_out @ v.T
    ds = p * (dp - np.sum(d_out * o, axis=1)[:, None])
    dq = (ds @ k) * q.dtype.type(scale)
    dk = (ds.T @ q) * q.dtype.type(scale)
    return dq, dk, dv


def _check_streaming_mask(mask: MaskSpec):
    if mask.kind is MaskKind.ADDITIVE:
        raise ShapeError("additive masks exist on the dense reference path only")


def flash_attn_forward(q: TokenShard, k: TokenShard, v: TokenShard,
                       mask: MaskSpec | None = None, scale: float = 1.0,
                       block: int = 64) -> PartialAttn:
    """Streaming attention of q against exactly the keys/values in k, v.

    Returns the partial (m, n, d) for those keys; rows whose keys are all
    masked come back as the empty partial rather than an error, since a
    later attn_fix may still merge in their real keys.
    """
    mask = mask or MaskSpec.none()
    _check_streaming_mask(mask)
    if k.rows != v.rows or not np.array_equal(k.indices, v.indices):
        raise ShapeError("k and v shards must cover the same rows")
    if q.data.shape[1] != k.data.shape[1]:
        raise ShapeError(f"head dims differ: q {q.data.shape} k {k.data.shape}")
    if block < 1:
        raise ShapeError("block must be positive")
    out = PartialAttn.empty(q.rows, v.data.shape[1], dtype=q.data.dtype)
    kernels.flash_forward(
        q.data, k.data, v.data, q.indices, k.indices,
        mask.kind is MaskKind.CAUSAL, float(scale), int(block),
        out.m, out.n, out.d,
    )
    return out


def attn_fix(a: PartialAttn, b: PartialAttn) -> PartialAttn:
    """Merge two partials over disjoint key sets for the same query rows.

    Exact identities: merging with the empty partial returns the other
    operand bit-for-bit, and any grouping/order of merges yields the same
    attention output up to roundoff.
    """
    if a.n.shape != b.n.shape:
        raise ShapeError(f"partials disagree: {a.n.shape} vs {b.n.shape}")
    m = np.maximum(a.m, b.m)
    both_empty = np.isneginf(m)
    with np.errstate(invalid="ignore"):
        ea = np.exp(a.m - m)
        eb = np.exp(b.m - m)
    ea[both_empty] = 0.0
    eb[both_empty] = 0.0
    return PartialAttn(
        m=m,
        n=ea[:, None] * a.n + eb[:, None] * b.n,
        d=ea * a.d + eb * b.d,
    )


def finalize(p: PartialAttn) -> np.ndarray:
    """Normalize a complete partial into the attention output n / d."""
    if np.any(p.d == 0):
        raise FullyMaskedRowError(
            f"rows {np.flatnonzero(p.d == 0).tolist()} attended no keys")
    return linalg.diag_scale(p.d, p.n)


def flash_attn_backward(q: TokenShard, k: TokenShard, v: TokenShard,
                        o: np.ndarray, d_out: np.ndarray,
                        m: np.ndarray, d: np.ndarray,
                        mask: MaskSpec | None = None, scale: float = 1.0):
    """Gradients of the rows of q against the key subset in k, v.

    o, d_out, m, d are aligned with q's rows and must be the *global*
    output and softmax statistics (after all merges), which makes the
    returned (dq, dk, dv) exact partial sums over this key subset.
    """
    mask = mask or MaskSpec.none()
    _check_streaming_mask(mask)
    if k.rows != v.rows or not np.array_equal(k.indices, v.indices):
        raise ShapeError("k and v shards must cover the same rows")
    o = linalg.as_matrix(o)
    d_out = linalg.as_matrix(d_out)
    m = np.asarray(m)
    d = np.asarray(d)
    if o.shape != (q.rows, v.data.shape[1]) or d_out.shape != o.shape:
        raise ShapeError(f"o/d_out shape {o.shape}/{d_out.shape} does not match q rows")
    if m.shape != (q.rows,) or d.shape != (q.rows,):
        raise ShapeError("statistics m, d must have one entry per query row")
    if np.any(d == 0):
        raise FullyMaskedRowError(
            f"rows {np.flatnonzero(d == 0).tolist()} have empty statistics")
    dq = np.zeros_like(q.data)
    dk = np.zeros_like(k.data)
    dv = np.zeros_like(v.data)
    kernels.flash_backward(
        q.data, k.data, v.data, o, d_out, m, d, q.indices, k.indices,
        mask.kind is MaskKind.CAUSAL, float(scale), dq, dk, dv,
    )
    return dq, dk, dv


def count_unmasked(q_idx: np.ndarray, k_idx: np.ndarray, causal: bool) -> int:
    """Number of score elements a kernel call evaluates for these index sets."""
    if not causal:
        return int(len(q_idx)) * int(len(k_idx))
    k_sorted = np.sort(np.asarray(k_idx))
    return int(np.searchsorted(k_sorted, np.asarray(q_idx), side="right").sum())
