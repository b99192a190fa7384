"""Analytic communication and memory cost model, plus ledger reconciliation.

Two layers of fidelity coexist here:

* **Asymptotic comparisons** across parallelization strategies use each
  strategy's leading-order words-per-layer expression with constant 1. They
  answer ratio questions (does halving appear when processors quadruple?)
  and nothing else.

* **Exact schedule counts** exist only for the strategies this package
  actually simulates (`ring`, `attn2d_no`, `attn2d_o`). These are integer
  identities for per-processor words and message counts by phase, and
  `reconcile` checks them against a measured ledger term for term.

The α-β time estimator composes per-message latency, per-word bandwidth and
a flat flop rate into a pedagogical seconds-per-step figure. Its absolute
values are model artifacts; only ratios between its components are
meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, InfeasibleStrategyError
from .mesh import CommLedger, PHASE_BWD, PHASE_FWD, ProcGrid

COMM_STRATEGIES = (
    "megatron", "megatron_sp", "seq_par", "ring", "lightseq",
    "ulysses", "usp", "attn2d",
)

#: strategies whose per-processor schedule counts are exact integers here
SIMULATED = ("ring", "attn2d_no", "attn2d_o")


@dataclass(frozen=True)
class CostParams:
    """Problem-size knobs: batch, context, head dim, heads, layers, procs."""

    b: int
    n: int
    h: int
    m: int
    l: int
    p: int

    def __post_init__(self):
        for name in ("b", "n", "h", "m", "l", "p"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class ModelPreset:
    """A named architecture: layer count, head count, head dimension."""

    name: str
    l: int
    m: int
    h: int

    @property
    def hidden(self) -> int:
        return self.m * self.h

    def params(self, b: int, n: int, p: int) -> CostParams:
        return CostParams(b=b, n=n, h=self.h, m=self.m, l=self.l, p=p)


PRESETS = {
    "760M": ModelPreset("760M", l=24, m=16, h=96),
    "2.7B": ModelPreset("2.7B", l=32, m=32, h=80),
    "13B": ModelPreset("13B", l=40, m=40, h=128),
    "66B": ModelPreset("66B", l=64, m=72, h=128),
    "175B": ModelPreset("175B", l=96, m=96, h=128),
}


@dataclass(frozen=True)
class FabricParams:
    """Latency-bandwidth-compute triple for the time estimator."""

    alpha: float = 0.0   # seconds per message
    beta: float = 0.0    # seconds per word
    flops_rate: float = 1.0  # scalar fused multiply-adds per second

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.flops_rate <= 0:
            raise ConfigError("fabric parameters must be nonnegative with a positive flop rate")


# ---------------------------------------------------------------------------
# Exact per-processor schedule identities for the simulated strategies.
# ---------------------------------------------------------------------------

def _square_side(p: int) -> int:
    side = math.isqrt(p)
    if side * side != p:
        raise ConfigError(f"processor count {p} is not a perfect square")
    return side


def predicted_phase_words(strategy: str, n: int, h: int, p: int, phase: str,
                          on_diagonal: bool) -> int:
    """Exact words a single processor sends during one phase.

    For the 2D strategies `on_diagonal` selects the processors whose mirror
    transpose is a self-exchange (grid row == grid column); the ring layout
    has no such distinction and ignores the flag.
    """
    if strategy not in SIMULATED:
        raise ConfigError(f"no exact schedule counts for strategy {strategy!r}")
    if phase not in (PHASE_FWD, PHASE_BWD):
        raise ConfigError(f"phase must be forward or backward, got {phase!r}")
    if n % p != 0:
        raise ConfigError(f"p={p} must divide n={n}")
    rows = n // p
    if strategy == "ring":
        if phase == PHASE_FWD:
            return 2 * rows * h * (p - 1)
        return 4 * rows * h * (p - 1) + (2 * rows * h if p > 1 else 0)
    side = _square_side(p)
    transpose = 0 if on_diagonal else 2 * rows * h
    if phase == PHASE_FWD:
        queries = (side - 1) * rows * h
        keys_values = 2 * (side - 1) * rows * h
        partials = (side - 1) * rows * (h + 2)
        return transpose + queries + keys_values + partials
    query_bundles = (side - 1) * rows * (3 * h + 2)
    keys_values = 2 * (side - 1) * rows * h
    dq = (side - 1) * rows * h
    dkv = 2 * (side - 1) * rows * h
    return transpose + query_bundles + keys_values + dq + dkv


def predicted_phase_msgs(strategy: str, n: int, h: int, p: int, phase: str,
                         on_diagonal: bool) -> int:
    """Exact messages a single processor sends during one phase."""
    if strategy not in SIMULATED:
        raise ConfigError(f"no exact schedule counts for strategy {strategy!r}")
    if phase not in (PHASE_FWD, PHASE_BWD):
        raise ConfigError(f"phase must be forward or backward, got {phase!r}")
    if strategy == "ring":
        if phase == PHASE_FWD:
            return p - 1
        return (p - 1) + (1 if p > 1 else 0)
    side = _square_side(p)
    transpose = 0 if on_diagonal else 1
    hops = 3 if phase == PHASE_FWD else 4
    return transpose + hops * (side - 1)


def predicted_total_words(strategy: str, n: int, h: int, p: int, phase: str) -> int:
    """Exact words summed over all processors for one phase."""
    if strategy == "ring":
        return p * predicted_phase_words(strategy, n, h, p, phase, False)
    side = _square_side(p)
    on_diag = side  # processors with grid row == grid column
    return (on_diag * predicted_phase_words(strategy, n, h, p, phase, True)
            + (p - on_diag) * predicted_phase_words(strategy, n, h, p, phase, False))


# ---------------------------------------------------------------------------
# Asymptotic strategy comparison (words per processor per layer).
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CommCost:
    strategy: str
    asymptotic_words: float   # leading-order expression with constant 1
    schedule_words: int | None  # exact fwd+bwd per-processor words, simulated strategies only
    scaling: str              # human-readable leading-order form


def comm_cost(strategy: str, params: CostParams) -> CommCost:
    """Words per processor per layer for one strategy.

    `asymptotic_words` carries no leading constant and supports only ratio
    comparisons. For the strategies this package simulates, a concrete
    schedule count (worst-case, off-diagonal processor, forward plus
    backward, scaled by batch and heads) rides along.
    """
    b, n, h, m, p = params.b, params.n, params.h, params.m, params.p
    if strategy in ("megatron", "megatron_sp", "seq_par", "ring", "lightseq"):
        asym = float(b * n * m * h)
        scaling = "b*n*m*h"
    elif strategy in ("ulysses", "usp"):
        if p > m:
            raise InfeasibleStrategyError(
                f"{strategy}: head-parallel degree p={p} exceeds head count m={m}")
        asym = float(b * n * h)
        scaling = "b*n*h"
    elif strategy == "attn2d":
        asym = b * n * m * h / math.sqrt(p)
        scaling = "b*n*m*h/sqrt(p)"
    else:
        raise ConfigError(
            f"unknown strategy {strategy!r}; expected one of {', '.join(COMM_STRATEGIES)}")

    schedule = None
    if strategy == "ring" and params.n % params.p == 0:
        per_head = (predicted_phase_words("ring", n, h, p, PHASE_FWD, False)
                    + predicted_phase_words("ring", n, h, p, PHASE_BWD, False))
        schedule = b * m * per_head
    elif strategy == "attn2d" and params.n % params.p == 0:
        side = math.isqrt(p)
        if side * side == p:
            per_head = (predicted_phase_words("attn2d_no", n, h, p, PHASE_FWD, False)
                        + predicted_phase_words("attn2d_no", n, h, p, PHASE_BWD, False))
            schedule = b * m * per_head
    return CommCost(strategy=strategy, asymptotic_words=asym,
                    schedule_words=schedule, scaling=scaling)


@dataclass(frozen=True)
class StepCost:
    linear_words: float     # weight collectives of the non-attention layers
    attention_words: float  # distributed attention traffic
    total_words: float
    dominant: str           # "linear" | "attention" | "comparable"


def total_step_cost(params: CostParams) -> StepCost:
    """Words per training step: weight-collective term plus attention term.

    The attention term wins once the context length exceeds the hidden size
    (heads times head dimension); at equality the two are flagged
    comparable.
    """
    b, n, h, m, l, p = params.b, params.n, params.h, params.m, params.l, params.p
    linear = float(l * (m * h) ** 2)
    attention = b * l * m * n * h / math.sqrt(p)
    if n > m * h:
        dominant = "attention"
    elif n < m * h:
        dominant = "linear"
    else:
        dominant = "comparable"
    return StepCost(linear_words=linear, attention_words=attention,
                    total_words=linear + attention, dominant=dominant)


@dataclass(frozen=True)
class MemoryCost:
    persistent_words: float  # activations stored for the backward pass
    transient_words: float   # gathered buffers, freed at end of layer
    total_words: float
    simplified: bool         # persistent term dominates (layers*heads > sqrt(p))


def memory_cost(strategy: str, params: CostParams) -> MemoryCost:
    """Words resident per processor across a training step.

    The transient gathered-buffer term is specific to the 2D schedules;
    other strategies keep everything sharded at 1/p and carry no
    sqrt(p)-sized buffers.
    """
    b, n, h, m, l, p = params.b, params.n, params.h, params.m, params.l, params.p
    persistent = b * l * m * n * h / p
    if strategy == "attn2d":
        transient = b * n * h / math.sqrt(p)
    elif strategy in COMM_STRATEGIES or strategy in SIMULATED:
        transient = 0.0
    else:
        raise ConfigError(f"unknown strategy {strategy!r}")
    return MemoryCost(persistent_words=persistent, transient_words=transient,
                      total_words=persistent + transient,
                      simplified=l * m > math.sqrt(p))


# ---------------------------------------------------------------------------
# Ledger reconciliation.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReconcileRow:
    r: int
    c: int
    phase: str
    words_measured: int
    words_predicted: int
    msgs_measured: int
    msgs_predicted: int

    @property
    def match(self) -> bool:
        return (self.words_measured == self.words_predicted
                and self.msgs_measured == self.msgs_predicted)


@dataclass(frozen=True)
class ReconcileReport:
    strategy: str
    rows: tuple[ReconcileRow, ...]

    @property
    def ok(self) -> bool:
        return all(row.match for row in self.rows)

    def mismatches(self) -> list[ReconcileRow]:
        return [row for row in self.rows if not row.match]


def reconcile(ledger: CommLedger, strategy: str, n: int, h: int, p: int,
              phases: tuple[str, ...] = (PHASE_FWD, PHASE_BWD)) -> ReconcileReport:
    """Check measured per-processor phase traffic against the exact
    schedule identities, processor by processor and phase by phase."""
    if strategy not in SIMULATED:
        raise ConfigError(f"no exact schedule counts for strategy {strategy!r}")
    grid = ProcGrid(p)
    rows = []
    for phase in phases:
        for coord in grid.coords():
            on_diag = coord.r == coord.c
            rows.append(ReconcileRow(
                r=coord.r, c=coord.c, phase=phase,
                words_measured=ledger.words_sent(coord=coord, phase=phase),
                words_predicted=predicted_phase_words(strategy, n, h, p, phase, on_diag),
                msgs_measured=ledger.msgs_sent(coord=coord, phase=phase),
                msgs_predicted=predicted_phase_msgs(strategy, n, h, p, phase, on_diag),
            ))
    return ReconcileReport(strategy=strategy, rows=tuple(rows))


# ---------------------------------------------------------------------------
# α-β-γ time estimation.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeEstimate:
    latency_s: float    # alpha * messages
    bandwidth_s: float  # beta * words
    compute_s: float    # score-element flops / flop rate
    total_s: float


def _score_elements(n: int, causal: bool) -> int:
    return n * (n + 1) // 2 if causal else n * n


def estimate_time(strategy: str, params: CostParams, fabric: FabricParams,
                  causal: bool = False) -> TimeEstimate:
    """Seconds per training step under a flat latency-bandwidth-flops model.

    Words come from the asymptotic per-layer expression; message counts use
    the exact schedule where one exists and one message per layer otherwise;
    compute charges four fused multiply-adds per head dimension element per
    unmasked score element, split evenly across processors. Only ratios of
    these figures are meaningful.
    """
    cost = comm_cost(strategy, params)
    words_step = cost.asymptotic_words * params.l
    name = {"attn2d": "attn2d_no"}.get(strategy, strategy)
    if name in SIMULATED and params.n % params.p == 0:
        try:
            msgs_phase = (predicted_phase_msgs(name, params.n, params.h, params.p,
                                               PHASE_FWD, False)
                          + predicted_phase_msgs(name, params.n, params.h, params.p,
                                                 PHASE_BWD, False))
        except ConfigError:
            msgs_phase = 1
        msgs_step = msgs_phase * params.l
    else:
        msgs_step = params.l
    flops = 4.0 * params.h * _score_elements(params.n, causal) * params.b * params.m / params.p
    latency = fabric.alpha * msgs_step
    bandwidth = fabric.beta * words_step
    compute = flops * params.l / fabric.flops_rate
    return TimeEstimate(latency_s=latency, bandwidth_s=bandwidth,
                        compute_s=compute, total_s=latency + bandwidth + compute)
