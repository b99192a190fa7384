"""Cyclic token layouts over a square processor grid.

For p = side * side processors and a sequence of n tokens (p | n), tokens
are dealt round-robin. Four views of that deal matter here:

* column_major: processor (r, c) owns {r + side*c + i*p};
* row_major: processor (r, c) owns {side*r + c + i*p};
* row_gathered: the union of column_major sets along grid row r, {r + i*side};
* col_gathered: the union of row_major sets along grid column c, {c + i*side}.

A row_gathered set is exactly the query rows a grid row works on after its
all-gather; a col_gathered set is the key rows a grid column ends up holding
after the transpose exchange and its all-gather.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from math import isqrt

import numpy as np

from .errors import ConfigError
from .mesh import ProcCoord


class LayoutForm(str, Enum):
    COLUMN_MAJOR = "column_major"
    ROW_MAJOR = "row_major"
    ROW_GATHERED = "row_gathered"
    COL_GATHERED = "col_gathered"


@dataclass(frozen=True)
class CyclicLayout:
    n: int
    p: int
    form: LayoutForm

    def __post_init__(self):
        if self.p < 1 or self.n < 1:
            raise ConfigError(f"need n, p >= 1, got n={self.n} p={self.p}")
        if isqrt(self.p) ** 2 != self.p:
            raise ConfigError(f"cyclic layouts need a square p, got {self.p}")
        if self.n % self.p:
            raise ConfigError(f"p={self.p} does not divide n={self.n}")

    @property
    def side(self) -> int:
        return isqrt(self.p)

    def indices(self, coord: ProcCoord) -> np.ndarray:
        """Global token indices at coord, ascending."""
        r, c = coord
        side = self.side
        if not (0 <= r < side and 0 <= c < side):
            raise ConfigError(f"coord {coord} outside a {side}x{side} grid")
        if self.form is LayoutForm.COLUMN_MAJOR:
            return np.arange(r + side * c, self.n, self.p, dtype=np.int64)
        if self.form is LayoutForm.ROW_MAJOR:
            return np.arange(side * r + c, self.n, self.p, dtype=np.int64)
        if self.form is LayoutForm.ROW_GATHERED:
            return np.arange(r, self.n, side, dtype=np.int64)
        return np.arange(c, self.n, side, dtype=np.int64)


def layout_indices(n: int, p: int, form: LayoutForm | str, coord) -> np.ndarray:
    return CyclicLayout(n, p, LayoutForm(form)).indices(ProcCoord(*coord))
