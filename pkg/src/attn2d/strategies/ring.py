"""Ring-passing exact attention baseline with a balanced causal layout.

Every processor keeps its query slice resident and circulates key/value
blocks around a logical ring, folding one partial per hop. Token rows are
dealt in mirrored pairs — processor k owns a slice from the front of the
sequence and the matching slice from the back — so causal masking leaves
each processor with the same number of unmasked score elements instead of
starving the early ranks.

Words on the wire scale as (P-1)·2·(N/P)·H per processor per forward pass:
the whole key/value tensor visits every processor, which is the O(N·H)
per-processor cost the 2D schedules improve on.
"""

from __future__ import annotations

import numpy as np

from ..attention import MaskKind, PartialAttn, TokenShard, attn_fix, count_unmasked, \
    finalize, flash_attn_backward, flash_attn_forward
from ..errors import ConfigError
from ..mesh import PHASE_BWD, PHASE_FWD, Proc, ProcGrid, run_spmd
from .common import DistAttnConfig, SavedState, StrategyBackward, StrategyForward, \
    assemble_rows


def ring_block_indices(n: int, p: int, rank: int) -> np.ndarray:
    """Global token rows owned by `rank`: one slice from the front half and
    the mirrored slice from the back half, in ascending order."""
    if p == 1:
        return np.arange(n, dtype=np.int64)
    if n % (2 * p) != 0:
        raise ConfigError(f"ring layout needs 2*p={2 * p} to divide n={n}")
    c = n // (2 * p)
    front = np.arange(rank * c, (rank + 1) * c, dtype=np.int64)
    back = np.arange(n // 2 + (p - 1 - rank) * c, n // 2 + (p - rank) * c,
                     dtype=np.int64)
    return np.concatenate([front, back])


def _check(cfg: DistAttnConfig) -> None:
    cfg.require_square()
    if cfg.p > 1 and cfg.n % (2 * cfg.p) != 0:
        raise ConfigError(f"ring layout needs 2*p={2 * cfg.p} to divide n={cfg.n}")


def forward(cfg: DistAttnConfig, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> StrategyForward:
    _check(cfg)
    grid = ProcGrid(cfg.p)
    p = cfg.p
    causal = cfg.mask is MaskKind.CAUSAL
    shards = {}
    for coord in grid.coords():
        idx = ring_block_indices(cfg.n, p, grid.rank(coord))
        shards[coord] = (q[idx].astype(cfg.dtype, copy=True),
                         k[idx].astype(cfg.dtype, copy=True),
                         v[idx].astype(cfg.dtype, copy=True))

    def program(proc: Proc):
        rank = grid.rank(proc.coord)
        nxt = grid.coord_of_rank((rank + 1) % p)
        prv = grid.coord_of_rank((rank - 1) % p)
        q_p, k_p, v_p = shards[proc.coord]
        q_shard = TokenShard(q_p, ring_block_indices(cfg.n, p, rank))
        with proc.phase(PHASE_FWD):
            cur_k, cur_v = k_p, v_p
            part = None
            scores = 0
            for step in range(p):
                src = (rank - step) % p
                idx = ring_block_indices(cfg.n, p, src)
                p_i = flash_attn_forward(q_shard, TokenShard(cur_k, idx),
                                         TokenShard(cur_v, idx),
                                         cfg.mask_spec, cfg.scale, cfg.block)
                scores += count_unmasked(q_shard.indices, idx, causal)
                part = p_i if part is None else attn_fix(part, p_i)
                if step < p - 1:
                    cur_k, cur_v = proc.send_recv((cur_k, cur_v), to=nxt, frm=prv,
                                                  tag="ring_kv", op="ring_kv")
            o_p = finalize(part)
        return {
            "o": o_p,
            "saved": SavedState(q=q_p, k=k_p, v=v_p, o=o_p, m=part.m, d=part.d),
            "scores": scores,
        }

    run = run_spmd(grid, program)
    indices_of = {co: ring_block_indices(cfg.n, p, grid.rank(co)) for co in grid.coords()}
    o = assemble_rows(cfg.n, cfg.h, cfg.dtype,
                      [(indices_of[co], res["o"]) for co, res in run.results.items()])
    return StrategyForward(
        o=o,
        saved={co: res["saved"] for co, res in run.results.items()},
        ledger=run.ledger,
        score_elements={co: res["scores"] for co, res in run.results.items()},
        buffer_peaks=run.buffer_peaks,
    )


def backward(cfg: DistAttnConfig, saved, d_out: np.ndarray) -> StrategyBackward:
    _check(cfg)
    grid = ProcGrid(cfg.p)
    p = cfg.p
    causal = cfg.mask is MaskKind.CAUSAL
    d_out_shards = {}
    for coord in grid.coords():
        idx = ring_block_indices(cfg.n, p, grid.rank(coord))
        d_out_shards[coord] = d_out[idx].astype(cfg.dtype, copy=True)

    def program(proc: Proc):
        rank = grid.rank(proc.coord)
        nxt = grid.coord_of_rank((rank + 1) % p)
        prv = grid.coord_of_rank((rank - 1) % p)
        st = saved[proc.coord]
        do_p = d_out_shards[proc.coord]
        q_shard = TokenShard(st.q, ring_block_indices(cfg.n, p, rank))
        with proc.phase(PHASE_BWD):
            cur_k, cur_v = st.k, st.v
            cur_dk = np.zeros_like(st.k)
            cur_dv = np.zeros_like(st.v)
            dq = np.zeros_like(st.q)
            scores = 0
            for step in range(p):
                src = (rank - step) % p
                idx = ring_block_indices(cfg.n, p, src)
                dq_i, dk_i, dv_i = flash_attn_backward(
                    q_shard, TokenShard(cur_k, idx), TokenShard(cur_v, idx),
                    st.o, do_p, st.m, st.d, cfg.mask_spec, cfg.scale)
                scores += count_unmasked(q_shard.indices, idx, causal)
                dq += dq_i
                cur_dk += dk_i
                cur_dv += dv_i
                if step < p - 1:
                    cur_k, cur_v, cur_dk, cur_dv = proc.send_recv(
                        (cur_k, cur_v, cur_dk, cur_dv), to=nxt, frm=prv,
                        tag="ring_kvg", op="ring_kvg")
            if p > 1:
                # After p-1 hops the accumulated bundle sits one rank short
                # of home; one gradient-only hop finishes the reduction.
                dk_p, dv_p = proc.send_recv((cur_dk, cur_dv), to=nxt, frm=prv,
                                            tag="ring_home", op="ring_home")
            else:
                dk_p, dv_p = cur_dk, cur_dv
        return {"dq": dq, "dk": dk_p, "dv": dv_p, "scores": scores}

    run = run_spmd(grid, program)
    indices_of = {co: ring_block_indices(cfg.n, p, grid.rank(co)) for co in grid.coords()}
    pieces = lambda key: [(indices_of[co], res[key]) for co, res in run.results.items()]
    return StrategyBackward(
        dq=assemble_rows(cfg.n, cfg.h, cfg.dtype, pieces("dq")),
        dk=assemble_rows(cfg.n, cfg.h, cfg.dtype, pieces("dk")),
        dv=assemble_rows(cfg.n, cfg.h, cfg.dtype, pieces("dv")),
        ledger=run.ledger,
        score_elements={co: res["scores"] for co, res in run.results.items()},
        buffer_peaks=run.buffer_peaks,
    )
