"""Distributed strategies vs the dense oracle, plus exact ledger identities."""

import numpy as np
import pytest

from attn2d.attention import MaskKind, MaskSpec, reference_attention, \
    reference_attention_grad
from attn2d.errors import ConfigError
from attn2d.layouts import LayoutForm, layout_indices
from attn2d.mesh import PHASE_BWD, PHASE_FWD, ProcCoord
from attn2d.strategies import (DistAttnConfig, STRATEGY_NAMES, get_strategy,
                               run_backward, run_forward)
from attn2d.strategies.ring import ring_block_indices


def gen_inputs(n, h, seed=0):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-1.0, 1.0, (n, h))
    k = rng.uniform(-1.0, 1.0, (n, h))
    v = rng.uniform(-1.0, 1.0, (n, h))
    d_out = rng.uniform(-1.0, 1.0, (n, h))
    return q, k, v, d_out


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))


def valid_combo(strategy, n, p):
    if n % p:
        return False
    if strategy == "ring":
        return n % (2 * p) == 0
    return isqrt_ok(p)


def isqrt_ok(p):
    from math import isqrt
    return isqrt(p) ** 2 == p


class TestDispatch:
    def test_names(self):
        assert STRATEGY_NAMES == ("ring", "attn2d_no", "attn2d_o")

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError, match="unknown strategy"):
            get_strategy("allreduce")


class TestValidation:
    def test_2d_needs_square_p(self):
        cfg = DistAttnConfig(n=12, h=2, p=3)
        q, k, v, _ = gen_inputs(12, 2)
        for name in ("attn2d_no", "attn2d_o"):
            with pytest.raises(ConfigError, match="square"):
                run_forward(name, cfg, q, k, v)

    def test_ring_needs_two_blocks_per_proc(self):
        cfg = DistAttnConfig(n=12, h=2, p=4)  # 2p=8 does not divide 12
        q, k, v, _ = gen_inputs(12, 2)
        with pytest.raises(ConfigError):
            run_forward("ring", cfg, q, k, v)

    def test_p_must_divide_n(self):
        with pytest.raises(ConfigError, match="divide"):
            DistAttnConfig(n=10, h=2, p=4)

    def test_additive_mask_rejected(self):
        with pytest.raises(ConfigError, match="only 'none' and 'causal'"):
            DistAttnConfig(n=8, h=2, p=4, mask=MaskKind.ADDITIVE)


class TestRingLayout:
    def test_hand_blocks_n8_p4(self):
        # each rank pairs one front block with the mirrored back block
        want = {0: [0, 7], 1: [1, 6], 2: [2, 5], 3: [3, 4]}
        for rank, idx in want.items():
            assert ring_block_indices(8, 4, rank).tolist() == idx

    def test_single_proc_owns_everything(self):
        assert ring_block_indices(8, 1, 0).tolist() == list(range(8))

    @pytest.mark.parametrize("n,p", [(8, 4), (16, 4), (32, 8), (48, 4)])
    def test_partition(self, n, p):
        seen = np.concatenate([ring_block_indices(n, p, r) for r in range(p)])
        assert sorted(seen.tolist()) == list(range(n))
        for r in range(p):
            idx = ring_block_indices(n, p, r)
            assert np.all(np.diff(idx) > 0)


class TestOracleEquivalence:
    @pytest.mark.parametrize("strategy", STRATEGY_NAMES)
    @pytest.mark.parametrize("p", [1, 4, 16])
    @pytest.mark.parametrize("n", [16, 32])
    @pytest.mark.parametrize("causal", [False, True])
    def test_forward_and_backward(self, strategy, p, n, causal):
        if not valid_combo(strategy, n, p):
            pytest.skip("layout preconditions not met")
        h = 4
        mask = MaskKind.CAUSAL if causal else MaskKind.NONE
        cfg = DistAttnConfig(n=n, h=h, p=p, mask=mask)
        q, k, v, d_out = gen_inputs(n, h, seed=n * 31 + p)
        spec = MaskSpec(mask)

        fwd = run_forward(strategy, cfg, q, k, v)
        want_o = reference_attention(q, k, v, spec)
        assert rel_err(fwd.o, want_o) < 1e-12

        bwd = run_backward(strategy, cfg, fwd.saved, d_out)
        want_dq, want_dk, want_dv = reference_attention_grad(q, k, v, d_out, spec)
        assert rel_err(bwd.dq, want_dq) < 1e-11
        assert rel_err(bwd.dk, want_dk) < 1e-11
        assert rel_err(bwd.dv, want_dv) < 1e-11

    @pytest.mark.parametrize("strategy", STRATEGY_NAMES)
    def test_scaled_scores(self, strategy):
        n, h, p = 16, 4, 4
        scale = 1.0 / np.sqrt(h)
        cfg = DistAttnConfig(n=n, h=h, p=p, mask=MaskKind.CAUSAL, scale=scale)
        q, k, v, d_out = gen_inputs(n, h, seed=7)
        spec = MaskSpec(MaskKind.CAUSAL)

        fwd = run_forward(strategy, cfg, q, k, v)
        assert rel_err(fwd.o, reference_attention(q, k, v, spec, scale=scale)) < 1e-12
        bwd = run_backward(strategy, cfg, fwd.saved, d_out)
        want = reference_attention_grad(q, k, v, d_out, spec, scale=scale)
        for got, ref in zip((bwd.dq, bwd.dk, bwd.dv), want):
            assert rel_err(got, ref) < 1e-11

    def test_strategies_agree_with_each_other(self):
        n, h, p = 32, 4, 4
        cfg = DistAttnConfig(n=n, h=h, p=p, mask=MaskKind.CAUSAL)
        q, k, v, d_out = gen_inputs(n, h, seed=3)
        outs, grads = [], []
        for name in STRATEGY_NAMES:
            fwd = run_forward(name, cfg, q, k, v)
            bwd = run_backward(name, cfg, fwd.saved, d_out)
            outs.append(fwd.o)
            grads.append((bwd.dq, bwd.dk, bwd.dv))
        for o in outs[1:]:
            assert rel_err(o, outs[0]) < 1e-12
        for g in grads[1:]:
            for a, b in zip(g, grads[0]):
                assert rel_err(a, b) < 1e-11


class TestSingleProcDegenerate:
    @pytest.mark.parametrize("strategy", STRATEGY_NAMES)
    def test_no_attention_phase_traffic(self, strategy):
        n, h = 8, 4
        cfg = DistAttnConfig(n=n, h=h, p=1, mask=MaskKind.CAUSAL)
        q, k, v, d_out = gen_inputs(n, h, seed=1)
        fwd = run_forward(strategy, cfg, q, k, v)
        bwd = run_backward(strategy, cfg, fwd.saved, d_out)
        for ledger in (fwd.ledger, bwd.ledger):
            assert ledger.words_sent() == 0
            assert ledger.msgs_sent() == 0
        spec = MaskSpec(MaskKind.CAUSAL)
        assert rel_err(fwd.o, reference_attention(q, k, v, spec)) < 1e-13
        coord = ProcCoord(0, 0)
        assert fwd.score_elements[coord] == n * (n + 1) // 2


def expected_2d_words(n, h, p, phase, on_diagonal):
    """Per-processor word totals for the 2d schedules, counted message by
    message: a transpose exchange (off-diagonal only), the query/key/value
    relay hops, and the partial-result hops carrying (h + 2)-wide rows."""
    from math import isqrt
    side = isqrt(p)
    r = n // p
    transpose = 0 if on_diagonal else 2 * r * h
    if phase == PHASE_FWD:
        return (transpose                 # k,v to the mirrored processor
                + (side - 1) * r * h      # query blocks relayed left
                + 2 * (side - 1) * r * h  # k,v ring within the column
                + (side - 1) * r * (h + 2))  # (m, n, d) partials relayed
    return (transpose                     # dk,dv back to the mirror
            + (side - 1) * r * (3 * h + 2)  # (q, o, d_out, m, d) bundles
            + 2 * (side - 1) * r * h      # k,v ring within the column
            + (side - 1) * r * h          # dq partials relayed
            + 2 * (side - 1) * r * h)     # dk,dv reduce-scatter hops


def expected_2d_msgs(p, phase, on_diagonal):
    from math import isqrt
    side = isqrt(p)
    hops = 3 if phase == PHASE_FWD else 4
    return (0 if on_diagonal else 1) + hops * (side - 1)


class TestLedgerIdentities:
    def test_2d_hand_counts_n8_h4_p4(self):
        cfg = DistAttnConfig(n=8, h=4, p=4, mask=MaskKind.CAUSAL)
        q, k, v, d_out = gen_inputs(8, 4, seed=5)
        fwd = run_forward("attn2d_no", cfg, q, k, v)
        bwd = run_backward("attn2d_no", cfg, fwd.saved, d_out)
        off, diag = ProcCoord(0, 1), ProcCoord(0, 0)
        # forward: 16 transpose + 8 query + 16 key/value + 12 partial
        assert fwd.ledger.words_sent(coord=off) == 16 + 8 + 16 + 12
        assert fwd.ledger.words_sent(coord=diag) == 8 + 16 + 12
        assert bwd.ledger.words_sent(coord=off) == 16 + 28 + 16 + 8 + 16
        assert bwd.ledger.words_sent(coord=diag) == 28 + 16 + 8 + 16
        assert fwd.ledger.msgs_sent(coord=off) == 4
        assert fwd.ledger.msgs_sent(coord=diag) == 3
        assert bwd.ledger.msgs_sent(coord=off) == 5
        assert bwd.ledger.msgs_sent(coord=diag) == 4

    def test_ring_hand_counts_n8_h4_p4(self):
        cfg = DistAttnConfig(n=8, h=4, p=4, mask=MaskKind.CAUSAL)
        q, k, v, d_out = gen_inputs(8, 4, seed=5)
        fwd = run_forward("ring", cfg, q, k, v)
        bwd = run_backward("ring", cfg, fwd.saved, d_out)
        for rank in range(4):
            coord = ProcCoord(rank // 2, rank % 2)
            # forward: k,v circulate p-1 hops of 2*(n/p)*h words each
            assert fwd.ledger.words_sent(coord=coord) == 2 * 2 * 4 * 3
            assert fwd.ledger.msgs_sent(coord=coord) == 3
            # backward: (k, v, dk, dv) circulate, then dk,dv ride home
            assert bwd.ledger.words_sent(coord=coord) == 4 * 2 * 4 * 3 + 2 * 2 * 4
            assert bwd.ledger.msgs_sent(coord=coord) == 4

    @pytest.mark.parametrize("n,h,p", [(8, 4, 4), (16, 2, 4), (32, 4, 16),
                                       (36, 3, 9)])
    def test_2d_closed_form_all_procs(self, n, h, p):
        from math import isqrt
        side = isqrt(p)
        cfg = DistAttnConfig(n=n, h=h, p=p, mask=MaskKind.NONE)
        q, k, v, d_out = gen_inputs(n, h, seed=n + p)
        fwd = run_forward("attn2d_no", cfg, q, k, v)
        bwd = run_backward("attn2d_no", cfg, fwd.saved, d_out)
        for r in range(side):
            for c in range(side):
                coord, diag = ProcCoord(r, c), r == c
                assert fwd.ledger.words_sent(coord=coord) == \
                    expected_2d_words(n, h, p, PHASE_FWD, diag)
                assert bwd.ledger.words_sent(coord=coord) == \
                    expected_2d_words(n, h, p, PHASE_BWD, diag)
                assert fwd.ledger.msgs_sent(coord=coord) == \
                    expected_2d_msgs(p, PHASE_FWD, diag)
                assert bwd.ledger.msgs_sent(coord=coord) == \
                    expected_2d_msgs(p, PHASE_BWD, diag)

    @pytest.mark.parametrize("n,h,p", [(8, 4, 4), (32, 4, 16)])
    def test_overlapping_matches_nonoverlapping_traffic(self, n, h, p):
        from math import isqrt
        side = isqrt(p)
        cfg = DistAttnConfig(n=n, h=h, p=p, mask=MaskKind.CAUSAL)
        q, k, v, d_out = gen_inputs(n, h, seed=n)
        runs = {}
        for name in ("attn2d_no", "attn2d_o"):
            fwd = run_forward(name, cfg, q, k, v)
            bwd = run_backward(name, cfg, fwd.saved, d_out)
            runs[name] = (fwd.ledger, bwd.ledger)
        for r in range(side):
            for c in range(side):
                coord = ProcCoord(r, c)
                for i in range(2):
                    a, b = runs["attn2d_no"][i], runs["attn2d_o"][i]
                    assert a.words_sent(coord=coord) == b.words_sent(coord=coord)
                    assert a.msgs_sent(coord=coord) == b.msgs_sent(coord=coord)

    def test_conservation(self):
        cfg = DistAttnConfig(n=16, h=4, p=4, mask=MaskKind.CAUSAL)
        q, k, v, d_out = gen_inputs(16, 4, seed=2)
        for name in STRATEGY_NAMES:
            fwd = run_forward(name, cfg, q, k, v)
            bwd = run_backward(name, cfg, fwd.saved, d_out)
            fwd.ledger.assert_conserved()
            bwd.ledger.assert_conserved()


def causal_pairs(q_idx, k_idx):
    return sum(1 for i in q_idx for j in k_idx if j <= i)


class TestScoreBalance:
    def test_2d_causal_counts_match_enumeration(self):
        """Processor (r, c) scores row-gathered queries of row r against
        column-gathered keys of column c; enumerate those pairs directly."""
        n, p = 8, 4
        cfg = DistAttnConfig(n=n, h=2, p=p, mask=MaskKind.CAUSAL)
        q, k, v, _ = gen_inputs(n, 2, seed=0)
        for name in ("attn2d_no", "attn2d_o"):
            fwd = run_forward(name, cfg, q, k, v)
            want = {}
            for r in range(2):
                for c in range(2):
                    qi = layout_indices(n, p, LayoutForm.ROW_GATHERED,
                                        ProcCoord(r, c))
                    ki = layout_indices(n, p, LayoutForm.COL_GATHERED,
                                        ProcCoord(r, c))
                    want[ProcCoord(r, c)] = causal_pairs(qi, ki)
            assert fwd.score_elements == want
            assert want == {ProcCoord(0, 0): 10, ProcCoord(0, 1): 6,
                            ProcCoord(1, 0): 10, ProcCoord(1, 1): 10}
            assert sum(want.values()) == n * (n + 1) // 2

    def test_ring_causal_counts_balanced(self):
        n, p = 8, 4
        cfg = DistAttnConfig(n=n, h=2, p=p, mask=MaskKind.CAUSAL)
        q, k, v, _ = gen_inputs(n, 2, seed=0)
        fwd = run_forward("ring", cfg, q, k, v)
        want = {ProcCoord(rank // 2, rank % 2):
                causal_pairs(ring_block_indices(n, p, rank), range(n))
                for rank in range(p)}
        assert fwd.score_elements == want
        assert sorted(want.values()) == [9, 9, 9, 9]

    @pytest.mark.parametrize("strategy,n,p", [
        ("ring", 32, 4), ("ring", 64, 16),
        ("attn2d_no", 32, 4), ("attn2d_no", 64, 16),
    ])
    def test_causal_imbalance_bounded(self, strategy, n, p):
        cfg = DistAttnConfig(n=n, h=2, p=p, mask=MaskKind.CAUSAL)
        q, k, v, _ = gen_inputs(n, 2, seed=n)
        fwd = run_forward(strategy, cfg, q, k, v)
        counts = list(fwd.score_elements.values())
        assert max(counts) <= 2 * min(counts)
        assert sum(counts) == n * (n + 1) // 2

    def test_backward_counts_equal_forward(self):
        cfg = DistAttnConfig(n=16, h=4, p=4, mask=MaskKind.CAUSAL)
        q, k, v, d_out = gen_inputs(16, 4, seed=6)
        for name in STRATEGY_NAMES:
            fwd = run_forward(name, cfg, q, k, v)
            bwd = run_backward(name, cfg, fwd.saved, d_out)
            assert bwd.score_elements == fwd.score_elements


class TestSavedState:
    @pytest.mark.parametrize("strategy", STRATEGY_NAMES)
    def test_per_proc_memory_words(self, strategy):
        n, h, p = 16, 4, 4
        cfg = DistAttnConfig(n=n, h=h, p=p, mask=MaskKind.NONE)
        q, k, v, _ = gen_inputs(n, h, seed=4)
        fwd = run_forward(strategy, cfg, q, k, v)
        rows = n // p
        assert len(fwd.saved) == p
        for state in fwd.saved.values():
            # q, k, v, o shards of rows*h plus two stat vectors of rows
            assert state.words == rows * (4 * h + 2)


class TestBufferPeaks:
    def test_overlapping_uses_two_slots(self):
        cfg = DistAttnConfig(n=64, h=4, p=16, mask=MaskKind.NONE)
        q, k, v, d_out = gen_inputs(64, 4, seed=9)
        fwd = run_forward("attn2d_o", cfg, q, k, v)
        bwd = run_backward("attn2d_o", cfg, fwd.saved, d_out)
        peaks = {}
        for src in (fwd.buffer_peaks, bwd.buffer_peaks):
            for (coord, stream), peak in src.items():
                peaks.setdefault(stream, 0)
                peaks[stream] = max(peaks[stream], peak)
                assert peak <= 2
        # double-buffered streams really do hold two live buffers at peak
        for stream in ("q", "kv", "qod"):
            assert peaks[stream] == 2
