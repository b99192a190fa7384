"""2D-parallel exact attention, overlapping schedule.

Moves the same words as the non-overlapping schedule but never holds a
whole gathered tensor before computing: key/value blocks stream up the grid
column while the local kernel folds them (gthr_cmpt), then query blocks
stream right-to-left along the grid row while accumulated partials for each
block ride one hop left per iteration (gthr_cmpt_sctr), so each processor
finishes holding the folded partial for its own query slice over every
other column's keys. Transit uses double buffering: at most two receive
buffers per stream are ever live.

The backward pass mirrors this with (q, o, d_out, m, d) bundles streaming
along rows, dq partials riding the same leftward ring, and dk/dv partials
ring-reduced up the column before the final mirror transpose.
"""

from __future__ import annotations

import numpy as np

from ..attention import MaskKind, PartialAttn, TokenShard, attn_fix, count_unmasked, \
    finalize, flash_attn_backward, flash_attn_forward
from ..layouts import CyclicLayout, LayoutForm
from ..mesh import PHASE_BWD, PHASE_FWD, Proc, ProcCoord, ProcGrid, run_spmd
from .common import DistAttnConfig, SavedState, StrategyBackward, StrategyForward, \
    assemble_rows


def _sorted_concat(blocks: list[np.ndarray], concat_idx: np.ndarray):
    perm = np.argsort(concat_idx, kind="stable")
    return np.concatenate(blocks, axis=0)[perm], concat_idx[perm]


def gthr_cmpt(proc: Proc, cfg: DistAttnConfig, q_shard: TokenShard,
              k_t: np.ndarray, v_t: np.ndarray):
    """Stream the column's key/value blocks through this processor, folding
    a partial for the local query slice as each block lands.

    Returns the gathered keys/values (sorted by global index), their index
    vector, the folded partial, and the score-element count.
    """
    side = cfg.side
    r, c = proc.coord
    up = ProcCoord((r - 1) % side, c)
    down = ProcCoord((r + 1) % side, c)
    row_major = CyclicLayout(cfg.n, cfg.p, LayoutForm.ROW_MAJOR)
    causal = cfg.mask is MaskKind.CAUSAL
    cur_k, cur_v = k_t, v_t
    cur_buf = None
    pending = None
    blocks_k, blocks_v, blocks_idx = [], [], []
    part = None
    scores = 0
    for i in range(1, side + 1):
        if i > 1:
            buf, handle = pending
            proc.wait(handle)
            cur_k, cur_v = buf.value
            cur_buf = buf
        if i < side:
            pending = proc.async_send_recv((cur_k, cur_v), to=up, frm=down,
                                           tag="gc_kv", stream="kv", op="gather_kv")
        idx = row_major.indices(ProcCoord((r + i - 1) % side, c))
        p_i = flash_attn_forward(q_shard, TokenShard(cur_k, idx), TokenShard(cur_v, idx),
                                 cfg.mask_spec, cfg.scale, cfg.block)
        scores += count_unmasked(q_shard.indices, idx, causal)
        part = p_i if part is None else attn_fix(part, p_i)
        blocks_k.append(cur_k)
        blocks_v.append(cur_v)
        blocks_idx.append(idx)
        if cur_buf is not None:
            cur_buf.free()
            cur_buf = None
    concat_idx = np.concatenate(blocks_idx)
    k_g, kv_idx = _sorted_concat(blocks_k, concat_idx)
    v_g, _ = _sorted_concat(blocks_v, concat_idx)
    return k_g, v_g, kv_idx, part, scores


def gthr_cmpt_sctr(proc: Proc, cfg: DistAttnConfig, first_buf,
                   k_g: TokenShard, v_g: TokenShard):
    """Walk the other query blocks of the grid row against the gathered
    keys, scattering each block's accumulated partial one hop left per
    iteration. The partial received last is the merge, over all other grid
    columns' key sets, for this processor's own query slice.
    """
    side = cfg.side
    r, c = proc.coord
    rows = cfg.rows_per_proc
    if side == 1:
        return PartialAttn.empty(rows, cfg.h, cfg.dtype), 0
    left = ProcCoord(r, (c - 1) % side)
    right = ProcCoord(r, (c + 1) % side)
    col_major = CyclicLayout(cfg.n, cfg.p, LayoutForm.COLUMN_MAJOR)
    causal = cfg.mask is MaskKind.CAUSAL
    cur_buf = first_buf
    nxt = None
    scat = None
    scores = 0
    for i in range(1, side):
        if i > 1:
            buf, handle = nxt
            proc.wait(handle)
            cur_buf = buf
        q_arr = cur_buf.value
        if i < side - 1:
            nxt = proc.async_send_recv(q_arr, to=left, frm=right,
                                       tag="gcs_q", stream="q", op="forward_q")
        q_idx = col_major.indices(ProcCoord(r, (c + i) % side))
        part_i = flash_attn_forward(TokenShard(q_arr, q_idx), k_g, v_g,
                                    cfg.mask_spec, cfg.scale, cfg.block)
        scores += count_unmasked(q_idx, k_g.indices, causal)
        if i > 1:
            sbuf, shandle = scat
            m_in, n_in, d_in = proc.wait(shandle)
            sbuf.free()
            part_i = attn_fix(part_i, PartialAttn(m_in, n_in, d_in))
        scat = proc.async_send_recv((part_i.m, part_i.n, part_i.d), to=left, frm=right,
                                    tag="gcs_part", stream="partial", op="scatter_partial")
        cur_buf.free()
        cur_buf = None
    sbuf, shandle = scat
    m_in, n_in, d_in = proc.wait(shandle)
    sbuf.free()
    return PartialAttn(m_in, n_in, d_in), scores


def forward(cfg: DistAttnConfig, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> StrategyForward:
    cfg.require_square()
    grid = ProcGrid(cfg.p)
    side = cfg.side
    col_major = CyclicLayout(cfg.n, cfg.p, LayoutForm.COLUMN_MAJOR)
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
            q_shard = TokenShard(q_p, col_major.indices(proc.coord))
            first = None
            if side > 1:
                first = proc.async_send_recv(
                    q_p, to=ProcCoord(r, (c - 1) % side), frm=ProcCoord(r, (c + 1) % side),
                    tag="gcs_q_first", stream="q", op="forward_q")
            k_g, v_g, kv_idx, part1, sc1 = gthr_cmpt(proc, cfg, q_shard, k_t, v_t)
            if side > 1:
                first_buf, h_first = first
                proc.wait(h_first)
                part2, sc2 = gthr_cmpt_sctr(proc, cfg, first_buf,
                                            TokenShard(k_g, kv_idx),
                                            TokenShard(v_g, kv_idx))
            else:
                part2, sc2 = PartialAttn.empty(cfg.rows_per_proc, cfg.h, cfg.dtype), 0
            part = attn_fix(part1, part2)
            o_p = finalize(part)
        return {
            "o": o_p,
            "saved": SavedState(q=q_p, k=k_t, v=v_t, o=o_p, m=part.m, d=part.d),
            "scores": sc1 + sc2,
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


def gthr_cmpt_bwd(proc: Proc, cfg: DistAttnConfig, q_shard: TokenShard,
                  st: SavedState, do_p: np.ndarray):
    """Backward twin of gthr_cmpt: streams the column's key/value blocks,
    accumulating this query slice's dq and per-block dk/dv contributions."""
    side = cfg.side
    r, c = proc.coord
    up = ProcCoord((r - 1) % side, c)
    down = ProcCoord((r + 1) % side, c)
    row_major = CyclicLayout(cfg.n, cfg.p, LayoutForm.ROW_MAJOR)
    causal = cfg.mask is MaskKind.CAUSAL
    cur_k, cur_v = st.k, st.v
    cur_buf = None
    pending = None
    blocks_k, blocks_v, blocks_dk, blocks_dv, blocks_idx = [], [], [], [], []
    dq = np.zeros_like(st.q)
    scores = 0
    for i in range(1, side + 1):
        if i > 1:
            buf, handle = pending
            proc.wait(handle)
            cur_k, cur_v = buf.value
            cur_buf = buf
        if i < side:
            pending = proc.async_send_recv((cur_k, cur_v), to=up, frm=down,
                                           tag="bgc_kv", stream="kv", op="gather_kv")
        idx = row_major.indices(ProcCoord((r + i - 1) % side, c))
        dq_i, dk_i, dv_i = flash_attn_backward(
            q_shard, TokenShard(cur_k, idx), TokenShard(cur_v, idx),
            st.o, do_p, st.m, st.d, cfg.mask_spec, cfg.scale)
        scores += count_unmasked(q_shard.indices, idx, causal)
        dq += dq_i
        blocks_k.append(cur_k)
        blocks_v.append(cur_v)
        blocks_dk.append(dk_i)
        blocks_dv.append(dv_i)
        blocks_idx.append(idx)
        if cur_buf is not None:
            cur_buf.free()
            cur_buf = None
    concat_idx = np.concatenate(blocks_idx)
    k_g, kv_idx = _sorted_concat(blocks_k, concat_idx)
    v_g, _ = _sorted_concat(blocks_v, concat_idx)
    dk_g, _ = _sorted_concat(blocks_dk, concat_idx)
    dv_g, _ = _sorted_concat(blocks_dv, concat_idx)
    return k_g, v_g, dk_g, dv_g, kv_idx, dq, scores


def cmpt_sctr_bwd(proc: Proc, cfg: DistAttnConfig, bundle, q_idx: np.ndarray,
                  k_g: np.ndarray, v_g: np.ndarray, kv_idx: np.ndarray,
                  dk_g: np.ndarray, dv_g: np.ndarray):
    """Process the last circulating query block one key slice at a time
    while ring-reducing dk/dv up the column, so the fully reduced slice for
    this processor's own key rows arrives just as its local compute ends.

    The kept slice folds three parts: this block's contribution, the dk/dv
    accumulated here for earlier query blocks, and the ring partial from
    below.
    """
    side = cfg.side
    r, c = proc.coord
    up = ProcCoord((r - 1) % side, c)
    down = ProcCoord((r + 1) % side, c)
    causal = cfg.mask is MaskKind.CAUSAL
    qb, ob, dob, mb, db = bundle
    q_shard = TokenShard(qb, q_idx)
    rows_g = len(kv_idx)
    slices = [np.arange((r + i) % side, rows_g, side, dtype=np.int64)
              for i in range(side)]

    def bwd_slice(sl):
        dq_i, dk_i, dv_i = flash_attn_backward(
            q_shard, TokenShard(k_g[sl], kv_idx[sl]), TokenShard(v_g[sl], kv_idx[sl]),
            ob, dob, mb, db, cfg.mask_spec, cfg.scale)
        return dq_i, dk_i, dv_i, count_unmasked(q_idx, kv_idx[sl], causal)

    dq = None
    scat = None
    scores = 0
    for i in range(2, side + 1):
        sl = slices[i - 1]
        dq_i, dk_i, dv_i, sc = bwd_slice(sl)
        scores += sc
        dk_p = dk_i + dk_g[sl]
        dv_p = dv_i + dv_g[sl]
        if i > 2:
            dq = dq + dq_i
            sbuf, shandle = scat
            inc_k, inc_v = proc.wait(shandle)
            sbuf.free()
            dk_p += inc_k
            dv_p += inc_v
        else:
            dq = dq_i
        scat = proc.async_send_recv((dk_p, dv_p), to=up, frm=down,
                                    tag="csb_dkv", stream="dkv", op="scatter_dkv")
    sl = slices[0]
    dq_1, dk_1, dv_1, sc = bwd_slice(sl)
    scores += sc
    dq = dq_1 if dq is None else dq + dq_1
    sbuf, shandle = scat
    inc_k, inc_v = proc.wait(shandle)
    sbuf.free()
    dk = dk_1 + dk_g[sl] + inc_k
    dv = dv_1 + dv_g[sl] + inc_v
    return dq, dk, dv, scores


def gthr_cmpt_sctr_bwd(proc: Proc, cfg: DistAttnConfig, first_buf,
                       k_g: np.ndarray, v_g: np.ndarray, kv_idx: np.ndarray,
                       dk_g: np.ndarray, dv_g: np.ndarray):
    """Backward twin of gthr_cmpt_sctr.

    Circulates (q, o, d_out, m, d) bundles along the row; middle iterations
    accumulate dk/dv into the gathered gradients, the last hands off to
    cmpt_sctr_bwd for the column reduce-scatter. Each block's dq partial
    rides one hop left per iteration; the one received last is the summed
    foreign contribution to this processor's own dq.
    """
    side = cfg.side
    r, c = proc.coord
    left = ProcCoord(r, (c - 1) % side)
    right = ProcCoord(r, (c + 1) % side)
    col_major = CyclicLayout(cfg.n, cfg.p, LayoutForm.COLUMN_MAJOR)
    causal = cfg.mask is MaskKind.CAUSAL
    kv_shard_k = TokenShard(k_g, kv_idx)
    kv_shard_v = TokenShard(v_g, kv_idx)
    cur_buf = first_buf
    nxt = None
    scat = None
    dk_fin = dv_fin = None
    scores = 0
    for i in range(1, side):
        if i > 1:
            buf, handle = nxt
            proc.wait(handle)
            cur_buf = buf
        bundle = cur_buf.value
        if i < side - 1:
            nxt = proc.async_send_recv(bundle, to=left, frm=right,
                                       tag="bgcs_q", stream="qod", op="forward_qod")
        q_idx = col_major.indices(ProcCoord(r, (c + i) % side))
        if i < side - 1:
            qb, ob, dob, mb, db = bundle
            dq_i, dk_i, dv_i = flash_attn_backward(
                TokenShard(qb, q_idx), kv_shard_k, kv_shard_v,
                ob, dob, mb, db, cfg.mask_spec, cfg.scale)
            scores += count_unmasked(q_idx, kv_idx, causal)
            dk_g += dk_i
            dv_g += dv_i
        else:
            dq_i, dk_fin, dv_fin, sc = cmpt_sctr_bwd(
                proc, cfg, bundle, q_idx, k_g, v_g, kv_idx, dk_g, dv_g)
            scores += sc
        if i > 1:
            sbuf, shandle = scat
            inc = proc.wait(shandle)
            sbuf.free()
            dq_i = dq_i + inc
        scat = proc.async_send_recv(dq_i, to=left, frm=right,
                                    tag="bgcs_dq", stream="dq", op="scatter_dq")
        cur_buf.free()
        cur_buf = None
    sbuf, shandle = scat
    dq2 = proc.wait(shandle)
    sbuf.free()
    return dq2, dk_fin, dv_fin, scores


def backward(cfg: DistAttnConfig, saved: dict[ProcCoord, SavedState],
             d_out: np.ndarray) -> StrategyBackward:
    cfg.require_square()
    grid = ProcGrid(cfg.p)
    side = cfg.side
    col_major = CyclicLayout(cfg.n, cfg.p, LayoutForm.COLUMN_MAJOR)
    d_out_shards = {coord: d_out[col_major.indices(coord)].astype(cfg.dtype, copy=True)
                    for coord in grid.coords()}

    def program(proc: Proc):
        r, c = proc.coord
        st = saved[proc.coord]
        do_p = d_out_shards[proc.coord]
        with proc.phase(PHASE_BWD):
            q_shard = TokenShard(st.q, col_major.indices(proc.coord))
            first = None
            if side > 1:
                first = proc.async_send_recv(
                    (st.q, st.o, do_p, st.m, st.d),
                    to=ProcCoord(r, (c - 1) % side), frm=ProcCoord(r, (c + 1) % side),
                    tag="bgcs_q_first", stream="qod", op="forward_qod")
            k_g, v_g, dk_g, dv_g, kv_idx, dq1, sc1 = gthr_cmpt_bwd(
                proc, cfg, q_shard, st, do_p)
            if side > 1:
                first_buf, h_first = first
                proc.wait(h_first)
                dq2, dk_t, dv_t, sc2 = gthr_cmpt_sctr_bwd(
                    proc, cfg, first_buf, k_g, v_g, kv_idx, dk_g, dv_g)
                dq_p = dq1 + dq2
            else:
                dk_t, dv_t = dk_g, dv_g
                dq_p, sc2 = dq1, 0
            dk_p, dv_p = proc.send_recv((dk_t, dv_t), to=(c, r), frm=(c, r),
                                        tag="transpose_dkv", op="transpose_dkv")
        return {"dq": dq_p, "dk": dk_p, "dv": dv_p, "scores": sc1 + sc2}

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
