"""Analytic cost model: presets, asymptotics, exact schedule identities,
ledger reconciliation and the latency-bandwidth-compute estimator."""

import numpy as np
import pytest

from attn2d.costmodel import (COMM_STRATEGIES, CommCost, CostParams,
                              FabricParams, ModelPreset, PRESETS, SIMULATED,
                              comm_cost, estimate_time, memory_cost,
                              predicted_phase_msgs, predicted_phase_words,
                              predicted_total_words, reconcile,
                              total_step_cost)
from attn2d.errors import ConfigError, InfeasibleStrategyError
from attn2d.mesh import PHASE_BWD, PHASE_FWD, ProcCoord
from attn2d.attention import MaskKind
from attn2d.strategies import DistAttnConfig, run_backward, run_forward


class TestPresets:
    def test_exact_architectures(self):
        want = {
            "760M": (24, 16, 96),
            "2.7B": (32, 32, 80),
            "13B": (40, 40, 128),
            "66B": (64, 72, 128),
            "175B": (96, 96, 128),
        }
        assert set(PRESETS) == set(want)
        for name, (l, m, h) in want.items():
            preset = PRESETS[name]
            assert (preset.l, preset.m, preset.h) == (l, m, h)
            assert preset.hidden == m * h

    def test_params_passthrough(self):
        params = PRESETS["2.7B"].params(b=2, n=4096, p=16)
        assert params == CostParams(b=2, n=4096, h=80, m=32, l=32, p=16)


class TestValidation:
    def test_cost_params_positive_ints(self):
        with pytest.raises(ConfigError):
            CostParams(b=0, n=1, h=1, m=1, l=1, p=1)
        with pytest.raises(ConfigError):
            CostParams(b=1, n=1, h=1, m=1, l=1, p=-4)
        with pytest.raises(ConfigError):
            CostParams(b=1, n=1.5, h=1, m=1, l=1, p=1)

    def test_fabric_params(self):
        with pytest.raises(ConfigError):
            FabricParams(alpha=-1.0)
        with pytest.raises(ConfigError):
            FabricParams(flops_rate=0.0)
        FabricParams()  # defaults are valid

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError, match="unknown strategy"):
            comm_cost("carrier_pigeon", CostParams(b=1, n=8, h=2, m=2, l=1, p=4))

    def test_schedule_counts_only_for_simulated(self):
        with pytest.raises(ConfigError):
            predicted_phase_words("ulysses", 8, 2, 4, PHASE_FWD, False)
        with pytest.raises(ConfigError):
            predicted_phase_msgs("ring", 8, 2, 4, "no_such_phase", False)


class TestScheduleIdentities:
    """Frozen hand counts for n=8, h=4, p=4 (2 rows per processor)."""

    def test_2d_words(self):
        args = ("attn2d_no", 8, 4, 4)
        assert predicted_phase_words(*args, PHASE_FWD, False) == 52
        assert predicted_phase_words(*args, PHASE_FWD, True) == 36
        assert predicted_phase_words(*args, PHASE_BWD, False) == 84
        assert predicted_phase_words(*args, PHASE_BWD, True) == 68
        # the overlapping schedule moves identical traffic
        for phase in (PHASE_FWD, PHASE_BWD):
            for diag in (False, True):
                assert predicted_phase_words("attn2d_o", 8, 4, 4, phase, diag) \
                    == predicted_phase_words("attn2d_no", 8, 4, 4, phase, diag)

    def test_2d_msgs(self):
        args = ("attn2d_no", 8, 4, 4)
        assert predicted_phase_msgs(*args, PHASE_FWD, False) == 4
        assert predicted_phase_msgs(*args, PHASE_FWD, True) == 3
        assert predicted_phase_msgs(*args, PHASE_BWD, False) == 5
        assert predicted_phase_msgs(*args, PHASE_BWD, True) == 4

    def test_ring_counts(self):
        args = ("ring", 8, 4, 4)
        assert predicted_phase_words(*args, PHASE_FWD, False) == 48
        assert predicted_phase_words(*args, PHASE_BWD, False) == 112
        assert predicted_phase_msgs(*args, PHASE_FWD, False) == 3
        assert predicted_phase_msgs(*args, PHASE_BWD, False) == 4

    def test_single_proc_is_silent(self):
        for strategy in SIMULATED:
            for phase in (PHASE_FWD, PHASE_BWD):
                assert predicted_phase_words(strategy, 8, 4, 1, phase, True) == 0
                assert predicted_phase_msgs(strategy, 8, 4, 1, phase, True) == 0

    def test_totals_weight_diagonal(self):
        # 2 diagonal procs at 36 words, 2 off-diagonal at 52
        assert predicted_total_words("attn2d_no", 8, 4, 4, PHASE_FWD) == \
            2 * 36 + 2 * 52
        assert predicted_total_words("ring", 8, 4, 4, PHASE_FWD) == 4 * 48


class TestCommCost:
    def _params(self, p, n=4096):
        return CostParams(b=1, n=n, h=80, m=32, l=32, p=p)

    def test_ring_flat_in_p(self):
        a = comm_cost("ring", self._params(16))
        b = comm_cost("ring", self._params(64))
        assert a.asymptotic_words == b.asymptotic_words

    def test_attn2d_quadruple_procs_halves_words(self):
        a = comm_cost("attn2d", self._params(16))
        b = comm_cost("attn2d", self._params(64))
        assert b.asymptotic_words / a.asymptotic_words == 0.5

    def test_attn2d_strictly_decreasing(self):
        words = [comm_cost("attn2d", self._params(p)).asymptotic_words
                 for p in (1, 4, 16, 64)]
        assert all(b < a for a, b in zip(words, words[1:]))

    def test_head_parallel_feasibility(self):
        for strategy in ("ulysses", "usp"):
            comm_cost(strategy, self._params(32))  # p == m is allowed
            with pytest.raises(InfeasibleStrategyError, match="exceeds head count"):
                comm_cost(strategy, self._params(64))

    def test_broadcast_family_scaling(self):
        for strategy in ("megatron", "megatron_sp", "seq_par", "lightseq"):
            cost = comm_cost(strategy, self._params(16))
            assert cost.scaling == "b*n*m*h"
            assert cost.asymptotic_words == 1 * 4096 * 32 * 80
            assert cost.schedule_words is None

    def test_schedule_words_concrete(self):
        params = CostParams(b=1, n=8, h=4, m=2, l=1, p=4)
        ring = comm_cost("ring", params)
        assert ring.schedule_words == 1 * 2 * (48 + 112)
        two_d = comm_cost("attn2d", params)
        assert two_d.schedule_words == 1 * 2 * (52 + 84)

    def test_schedule_words_absent_when_layout_invalid(self):
        # p=2 is not a perfect square: asymptotics fine, schedule absent
        cost = comm_cost("attn2d", CostParams(b=1, n=8, h=4, m=2, l=1, p=2))
        assert cost.schedule_words is None
        assert cost.asymptotic_words == pytest.approx(8 * 2 * 4 / np.sqrt(2))


class TestStepCost:
    def test_dominance_by_context_length(self):
        hidden = 32 * 80
        base = dict(b=1, h=80, m=32, l=32, p=16)
        assert total_step_cost(CostParams(n=hidden, **base)).dominant == "comparable"
        assert total_step_cost(CostParams(n=2 * hidden, **base)).dominant == "attention"
        assert total_step_cost(CostParams(n=hidden // 2, **base)).dominant == "linear"

    def test_unit_sizes_sum_exactly(self):
        step = total_step_cost(CostParams(b=1, n=5, h=1, m=1, l=1, p=1))
        assert step.linear_words == 1.0
        assert step.attention_words == 5.0
        assert step.total_words == 6.0

    def test_long_context_preset(self):
        params = PRESETS["2.7B"].params(b=1, n=131072, p=64)
        assert total_step_cost(params).dominant == "attention"


class TestMemoryCost:
    def test_boundary_terms_equal(self):
        # l*m == sqrt(p): the gathered buffer is exactly as large as the
        # activation shard, and the simplified form does not yet apply
        params = CostParams(b=2, n=64, h=4, m=4, l=1, p=16)
        mem = memory_cost("attn2d", params)
        assert mem.persistent_words == 128.0
        assert mem.transient_words == 128.0
        assert mem.total_words == 256.0
        assert mem.simplified is False

    def test_large_model_simplifies(self):
        params = PRESETS["2.7B"].params(b=1, n=131072, p=64)
        mem = memory_cost("attn2d", params)
        assert mem.transient_words == 131072 * 80 / 8
        assert mem.simplified is True

    def test_fully_sharded_strategies_have_no_transient(self):
        params = CostParams(b=1, n=64, h=4, m=4, l=2, p=16)
        for strategy in ("ring", "ulysses", "megatron"):
            mem = memory_cost(strategy, params)
            assert mem.transient_words == 0.0
            assert mem.total_words == mem.persistent_words

    def test_single_proc(self):
        params = CostParams(b=1, n=16, h=2, m=2, l=2, p=1)
        mem = memory_cost("attn2d", params)
        assert mem.persistent_words == 1 * 2 * 2 * 16 * 2
        assert mem.transient_words == 16 * 2


class TestReconcile:
    def _run(self, strategy="attn2d_no", n=16, h=4, p=4):
        cfg = DistAttnConfig(n=n, h=h, p=p, mask=MaskKind.CAUSAL)
        rng = np.random.default_rng(0)
        q, k, v, d_out = (rng.uniform(-1, 1, (n, h)) for _ in range(4))
        fwd = run_forward(strategy, cfg, q, k, v)
        bwd = run_backward(strategy, cfg, fwd.saved, d_out)
        return fwd, bwd

    @pytest.mark.parametrize("strategy", SIMULATED)
    def test_measured_equals_predicted(self, strategy):
        fwd, bwd = self._run(strategy)
        name = strategy if strategy == "ring" else strategy
        fr = reconcile(fwd.ledger, name, 16, 4, 4, phases=(PHASE_FWD,))
        br = reconcile(bwd.ledger, name, 16, 4, 4, phases=(PHASE_BWD,))
        assert fr.ok and br.ok
        assert len(fr.rows) == 4 and len(br.rows) == 4

    def test_tamper_detected(self):
        fwd, _ = self._run()
        fwd.ledger.charge_send(ProcCoord(1, 0), PHASE_FWD, "tamper", 1)
        report = reconcile(fwd.ledger, "attn2d_no", 16, 4, 4, phases=(PHASE_FWD,))
        assert not report.ok
        bad = report.mismatches()
        assert [(row.r, row.c) for row in bad] == [(1, 0)]
        assert bad[0].words_measured == bad[0].words_predicted + 1

    def test_both_phases_by_default(self):
        fwd, bwd = self._run()
        fwd.ledger.merge_from(bwd.ledger)
        report = reconcile(fwd.ledger, "attn2d_no", 16, 4, 4)
        assert report.ok
        assert len(report.rows) == 8


class TestEstimateTime:
    def test_exact_fields(self):
        params = CostParams(b=1, n=8, h=4, m=2, l=2, p=4)
        fabric = FabricParams(alpha=2.0, beta=3.0, flops_rate=1.0)
        est = estimate_time("ring", params, fabric)
        # ring sends 3 fwd + 4 bwd messages per layer
        assert est.latency_s == 2.0 * (3 + 4) * 2
        assert est.bandwidth_s == 3.0 * (8 * 2 * 4) * 2
        # 4 fused multiply-adds per head element per score element
        assert est.compute_s == 4.0 * 4 * 64 * 1 * 2 / 4 * 2
        assert est.total_s == est.latency_s + est.bandwidth_s + est.compute_s

    def test_attn2d_bandwidth_halves_at_4x_procs(self):
        fabric = FabricParams(alpha=0.0, beta=1.0, flops_rate=1e30)
        t16 = estimate_time("attn2d", CostParams(b=1, n=4096, h=80, m=32, l=32, p=16), fabric)
        t64 = estimate_time("attn2d", CostParams(b=1, n=4096, h=80, m=32, l=32, p=64), fabric)
        assert t64.bandwidth_s / t16.bandwidth_s == 0.5

    def test_ring_to_attn2d_bandwidth_ratio_is_sqrt_p(self):
        fabric = FabricParams(alpha=0.0, beta=1.0, flops_rate=1e30)
        params = CostParams(b=1, n=4096, h=80, m=32, l=32, p=16)
        ring = estimate_time("ring", params, fabric)
        two_d = estimate_time("attn2d", params, fabric)
        assert ring.bandwidth_s / two_d.bandwidth_s == 4.0

    def test_causal_halves_large_n_compute(self):
        fabric = FabricParams(flops_rate=1.0)
        params = CostParams(b=1, n=4096, h=8, m=2, l=1, p=4)
        dense = estimate_time("ring", params, fabric, causal=False)
        causal = estimate_time("ring", params, fabric, causal=True)
        assert causal.compute_s / dense.compute_s == \
            (4096 * 4097 / 2) / 4096 ** 2

    def test_infeasible_strategy_propagates(self):
        params = CostParams(b=1, n=4096, h=80, m=32, l=32, p=64)
        with pytest.raises(InfeasibleStrategyError):
            estimate_time("ulysses", params, FabricParams())
