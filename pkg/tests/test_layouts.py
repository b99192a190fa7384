"""Cyclic token-to-processor layouts: hand-worked examples and coverage."""

import numpy as np
import pytest

from attn2d.errors import ConfigError
from attn2d.layouts import CyclicLayout, LayoutForm, layout_indices
from attn2d.mesh import ProcCoord, ProcGrid


class TestHandWorkedExamples:
    """n=8 tokens on a 2x2 grid, worked out index by index."""

    def test_column_major(self):
        lay = CyclicLayout(8, 4, LayoutForm.COLUMN_MAJOR)
        assert lay.indices(ProcCoord(0, 0)).tolist() == [0, 4]
        assert lay.indices(ProcCoord(0, 1)).tolist() == [2, 6]
        assert lay.indices(ProcCoord(1, 0)).tolist() == [1, 5]
        assert lay.indices(ProcCoord(1, 1)).tolist() == [3, 7]

    def test_row_major(self):
        lay = CyclicLayout(8, 4, LayoutForm.ROW_MAJOR)
        assert lay.indices(ProcCoord(0, 0)).tolist() == [0, 4]
        assert lay.indices(ProcCoord(0, 1)).tolist() == [1, 5]
        assert lay.indices(ProcCoord(1, 0)).tolist() == [2, 6]
        assert lay.indices(ProcCoord(1, 1)).tolist() == [3, 7]

    def test_row_gathered(self):
        lay = CyclicLayout(8, 4, LayoutForm.ROW_GATHERED)
        assert lay.indices(ProcCoord(0, 0)).tolist() == [0, 2, 4, 6]
        assert lay.indices(ProcCoord(1, 1)).tolist() == [1, 3, 5, 7]

    def test_col_gathered(self):
        lay = CyclicLayout(8, 4, LayoutForm.COL_GATHERED)
        assert lay.indices(ProcCoord(0, 0)).tolist() == [0, 2, 4, 6]
        assert lay.indices(ProcCoord(0, 1)).tolist() == [1, 3, 5, 7]


class TestValidation:
    def test_non_square_p(self):
        with pytest.raises(ConfigError):
            CyclicLayout(8, 2, LayoutForm.COLUMN_MAJOR)

    def test_p_must_divide_n(self):
        with pytest.raises(ConfigError):
            CyclicLayout(10, 4, LayoutForm.COLUMN_MAJOR)

    def test_convenience_wrapper(self):
        got = layout_indices(8, 4, LayoutForm.ROW_MAJOR, ProcCoord(0, 1))
        assert got.tolist() == [1, 5]


@pytest.mark.parametrize("form", [LayoutForm.COLUMN_MAJOR, LayoutForm.ROW_MAJOR])
@pytest.mark.parametrize("n,p", [(8, 4), (16, 4), (36, 9), (32, 16)])
class TestPartitionProperties:
    def test_disjoint_and_complete(self, form, n, p):
        grid = ProcGrid(p)
        lay = CyclicLayout(n, p, form)
        seen = np.concatenate([lay.indices(c) for c in grid.coords()])
        assert sorted(seen.tolist()) == list(range(n))

    def test_strictly_increasing(self, form, n, p):
        lay = CyclicLayout(n, p, form)
        for coord in ProcGrid(p).coords():
            idx = lay.indices(coord)
            assert np.all(np.diff(idx) > 0)


@pytest.mark.parametrize("n,p", [(8, 4), (36, 9), (64, 16)])
class TestGatheredForms:
    """Gathered layouts are exactly the sorted unions the collectives build."""

    def test_row_gather_union(self, n, p):
        grid = ProcGrid(p)
        col_major = CyclicLayout(n, p, LayoutForm.COLUMN_MAJOR)
        row_g = CyclicLayout(n, p, LayoutForm.ROW_GATHERED)
        for r in range(grid.side):
            union = np.sort(np.concatenate(
                [col_major.indices(c) for c in grid.row_group(r)]))
            assert np.array_equal(union, row_g.indices(ProcCoord(r, 0)))

    def test_col_gather_union(self, n, p):
        grid = ProcGrid(p)
        row_major = CyclicLayout(n, p, LayoutForm.ROW_MAJOR)
        col_g = CyclicLayout(n, p, LayoutForm.COL_GATHERED)
        for c in range(grid.side):
            union = np.sort(np.concatenate(
                [row_major.indices(co) for co in grid.col_group(c)]))
            assert np.array_equal(union, col_g.indices(ProcCoord(0, c)))

    def test_local_position_stride(self, n, p):
        """Local slot l of a gathered array holds global index base + l*side."""
        side = ProcGrid(p).side
        row_g = CyclicLayout(n, p, LayoutForm.ROW_GATHERED)
        for r in range(side):
            idx = row_g.indices(ProcCoord(r, 0))
            assert np.array_equal(idx, r + np.arange(n // side) * side)
