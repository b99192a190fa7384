"""2D-parallel exact attention, non-overlapping schedule.

Forward: each processor (r, c) swaps its key/value slice with its mirror
(c, r), all-gathers queries along its grid row and keys/values along its
grid column, runs the streaming kernel on the gathered blocks, and then a
ring reduce-scatter along the row merges the per-column partials so every
processor finishes with exactly its own query slice, fully reduced.

Backward: gather the same operands plus outputs, output gradients and saved
softmax statistics, recompute blockwise, then reduce-scatter dq along rows
(summation), dk/dv along columns, and swap dk/dv back through the mirror
exchange.
"""

from __future__ import annotations

import numpy as np

from ..attention import MaskKind, PartialAttn, TokenShard, attn_fix, count_unmasked, \
    finalize, flash_attn_backward, flash_attn_forward
from ..layouts import CyclicLayout, LayoutForm
from ..mesh import PHASE_BWD, PHASE_FWD, Proc, ProcCoord, ProcGrid, run_spmd
from .common import DistAttnConfig, SavedState, StrategyBackward, StrategyForward, \
    assemble_rows


def _layouts(cfg: DistAttnConfig):
    return {form: CyclicLayout(cfg.n, cfg.p, form) for form in LayoutForm}


def _gather_sorted(proc: Proc, payload, group, tag, concat_indices):
    """All-gather along a group, then reorder rows to ascending global index."""
    gathered = proc.all_gather(payload, group, tag=tag, op=tag)
    perm = np.argsort(concat_indices, kind="stable")
    if isinstance(gathered, np.ndarray):
        return gathered[perm]
    return tuple(x[perm] for x in gathered)


def _stride_slices(rows: int, side: int) -> list[np.ndarray]:
    return [np.arange(j, rows, side, dtype=np.int64) for j in range(side)]


def row_reduce_scatter(proc: Proc, cfg: DistAttnConfig, part: PartialAttn) -> PartialAttn:
    """Merge row-gathered partials along the grid row with attn_fix so this
    processor keeps the fully reduced triple for its own query slice."""
    side = cfg.side
    group = proc.grid.row_group(proc.coord.r)
    slices = _stride_slices(part.rows, side)

    def reducer(local, incoming):
        merged = attn_fix(PartialAttn(*local), PartialAttn(*incoming))
        return (merged.m, merged.n, merged.d)

    m, n, d = proc.reduce_scatter((part.m, part.n, part.d), group, reducer,
                                  slices, tag="row_rs", op="reduce_scatter_partial")
    return PartialAttn(m, n, d)


def _sum_reducer(local, incoming):
    if isinstance(local, np.ndarray):
        return local + incoming
    return tuple(a + b for a, b in zip(local, incoming))


def forward(cfg: DistAttnConfig, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> StrategyForward:
    cfg.require_square()
    grid = ProcGrid(cfg.p)
    lay = _layouts(cfg)
    col_major = lay[LayoutForm.COLUMN_MAJOR]
    row_major = lay[LayoutForm.ROW_MAJOR]
    shards = {coord: (q[col_major.indices(coord)].astype(cfg.dtype, copy=True),
                      k[col_major.indices(coord)].astype(cfg.dtype, copy=True),
                      v[col_major.indices(coord)].astype(cfg.dtype, copy=True))
              for coord in grid.coords()}

    def program(proc: Proc):
        r, c = proc.coord
        q_p, k_p, v_p = shards[proc.coord]
        with proc.phase(PHASE_FWD):
            k_t, v_t = proc.send_recv((k_p, v_p), to=(c, r), frm=(c, r),
                                      tag="transpose_kv", op="transpose_kv")
            row_group = proc.grid.row_group(r)
            col_group = proc.grid.col_group(c)
            q_concat_idx = np.concatenate([col_major.indices(m) for m in row_group])
            q_g = _gather_sorted(proc, q_p, row_group, "gather_q", q_concat_idx)
            kv_concat_idx = np.concatenate([row_major.indices(m) for m in col_group])
            k_g, v_g = _gather_sorted(proc, (k_t, v_t), col_group, "gather_kv",
                                      kv_concat_idx)
            q_idx = lay[LayoutForm.ROW_GATHERED].indices(proc.coord)
            k_idx = lay[LayoutForm.COL_GATHERED].indices(proc.coord)
            part = flash_attn_forward(
                TokenShard(q_g, q_idx), TokenShard(k_g, k_idx), TokenShard(v_g, k_idx),
                cfg.mask_spec, cfg.scale, cfg.block)
            scores = count_unmasked(q_idx, k_idx, cfg.mask is MaskKind.CAUSAL)
            own = row_reduce_scatter(proc, cfg, part)
            o_p = finalize(own)
        return {
            "o": o_p,
            "saved": SavedState(q=q_p, k=k_t, v=v_t, o=o_p, m=own.m, d=own.d),
            "scores": scores,
        }

    run = run_spmd(grid, program)
    o = assemble_rows(cfg.n, cfg.h, cfg.dtype,
                      [(col_major.indices(co), res["o"]) for co, res in run.results.items()])
    return StrategyForward(
        o=o,
        saved={co: res["saved"] for co, res in run.results.items()},
        ledger=run.ledger,
        score_elements={co: res["scores"] for co, res in run.results.items()},
        buffer_peaks=run.buffer_peaks,
    )


def backward(cfg: DistAttnConfig, saved: dict[ProcCoord, SavedState],
             d_out: np.ndarray) -> StrategyBackward:
    cfg.require_square()
    grid = ProcGrid(cfg.p)
    side = cfg.side
    lay = _layouts(cfg)
    col_major = lay[LayoutForm.COLUMN_MAJOR]
    row_major = lay[LayoutForm.ROW_MAJOR]
    d_out_shards = {coord: d_out[col_major.indices(coord)].astype(cfg.dtype, copy=True)
                    for coord in grid.coords()}

    def program(proc: Proc):
        r, c = proc.coord
        st = saved[proc.coord]
        do_p = d_out_shards[proc.coord]
        with proc.phase(PHASE_BWD):
            row_group = proc.grid.row_group(r)
            col_group = proc.grid.col_group(c)
            q_concat_idx = np.concatenate([col_major.indices(m) for m in row_group])
            q_g, o_g, do_g, m_g, d_g = _gather_sorted(
                proc, (st.q, st.o, do_p, st.m, st.d), row_group,
                "bwd_gather_row", q_concat_idx)
            kv_concat_idx = np.concatenate([row_major.indices(m) for m in col_group])
            k_g, v_g = _gather_sorted(proc, (st.k, st.v), col_group,
                                      "bwd_gather_kv", kv_concat_idx)
            q_idx = lay[LayoutForm.ROW_GATHERED].indices(proc.coord)
            k_idx = lay[LayoutForm.COL_GATHERED].indices(proc.coord)
            dq_g, dk_g, dv_g = flash_attn_backward(
                TokenShard(q_g, q_idx), TokenShard(k_g, k_idx), TokenShard(v_g, k_idx),
                o_g, do_g, m_g, d_g, cfg.mask_spec, cfg.scale)
            scores = count_unmasked(q_idx, k_idx, cfg.mask is MaskKind.CAUSAL)
            dq_p = proc.reduce_scatter(dq_g, row_group, _sum_reducer,
                                       _stride_slices(len(q_idx), side),
                                       tag="rs_dq", op="reduce_scatter_dq")
            dk_t, dv_t = proc.reduce_scatter((dk_g, dv_g), col_group, _sum_reducer,
                                             _stride_slices(len(k_idx), side),
                                             tag="rs_dkv", op="reduce_scatter_dkv")
            dk_p, dv_p = proc.send_recv((dk_t, dv_t), to=(c, r), frm=(c, r),
                                        tag="transpose_dkv", op="transpose_dkv")
        return {"dq": dq_p, "dk": dk_p, "dv": dv_p, "scores": scores}

    run = run_spmd(grid, program)
    pieces = lambda key: [(col_major.indices(co), res[key])
                          for co, res in run.results.items()]
    return StrategyBackward(
        dq=assemble_rows(cfg.n, cfg.h, cfg.dtype, pieces("dq")),
        dk=assemble_rows(cfg.n, cfg.h, cfg.dtype, pieces("dk")),
        dv=assemble_rows(cfg.n, cfg.h, cfg.dtype, pieces("dv")),
        ledger=run.ledger,
        score_elements={co: res["scores"] for co, res in run.results.items()},
        buffer_peaks=run.buffer_peaks,
    )
