"""Shared configuration, saved state and result containers for the
distributed attention strategies."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import isqrt

import numpy as np

from ..attention import MaskKind, MaskSpec
from ..errors import ConfigError
from ..linalg import Precision
from ..mesh import CommLedger, ProcCoord

# Width of the key/value blocks the streaming kernel walks locally.
DEFAULT_BLOCK = 64


@dataclass(frozen=True)
class DistAttnConfig:
    n: int
    h: int
    p: int
    mask: MaskKind = MaskKind.NONE
    scale: float = 1.0
    precision: Precision = Precision.DOUBLE
    block: int = DEFAULT_BLOCK

    def __post_init__(self):
        if self.n < 1 or self.h < 1 or self.p < 1:
            raise ConfigError(f"need n, h, p >= 1, got n={self.n} h={self.h} p={self.p}")
        if self.n % self.p:
            raise ConfigError(f"p={self.p} does not divide n={self.n}")
        if self.block < 1:
            raise ConfigError(f"block must be positive, got {self.block}")
        if self.mask not in (MaskKind.NONE, MaskKind.CAUSAL):
            raise ConfigError(
                "distributed strategies mask by token index; only 'none' and "
                f"'causal' are supported, got {self.mask.value!r}")

    @property
    def side(self) -> int:
        return isqrt(self.p)

    @property
    def dtype(self) -> np.dtype:
        return self.precision.dtype

    @property
    def mask_spec(self) -> MaskSpec:
        return MaskSpec(self.mask)

    @property
    def rows_per_proc(self) -> int:
        return self.n // self.p

    def require_square(self):
        if self.side ** 2 != self.p:
            raise ConfigError(
                f"2d strategies need a square processor count, got p={self.p}")


@dataclass
class SavedState:
    """Exactly what a processor may retain from forward for backward:
    its query slice, the key/value slice it is responsible for, its output
    slice, and the global softmax statistics of its query rows."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    m: np.ndarray
    d: np.ndarray

    @property
    def words(self) -> int:
        return int(self.q.size + self.k.size + self.v.size +
                   self.o.size + self.m.size + self.d.size)


@dataclass
class StrategyForward:
    o: np.ndarray
    saved: dict[ProcCoord, SavedState]
    ledger: CommLedger
    score_elements: dict[ProcCoord, int]
    buffer_peaks: dict = field(default_factory=dict)


@dataclass
class StrategyBackward:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    ledger: CommLedger
    score_elements: dict[ProcCoord, int]
    buffer_peaks: dict = field(default_factory=dict)


def assemble_rows(n: int, h: int, dtype, pieces) -> np.ndarray:
    """Scatter (indices, rows) pieces back into a global (n, h) array."""
    out = np.zeros((n, h), dtype=dtype)
    seen = np.zeros(n, dtype=bool)
    for idx, rows in pieces:
        if np.any(seen[idx]):
            raise ConfigError("output pieces overlap")
        seen[idx] = True
        out[idx] = rows
    if not np.all(seen):
        raise ConfigError("output pieces do not cover the sequence")
    return out
