"""Deterministic desk-scale simulator for exact distributed self-attention.

The package simulates attention sharded across a square grid of
processors, counts every word and message each processor sends on an exact
ledger, and checks the counts against closed-form schedule identities. Two
2D schedules (phase-separated and communication-overlapping) are verified
against a dense oracle and compared with a load-balanced ring baseline
whose per-processor traffic does not shrink as processors are added.
"""

from .attention import (MaskKind, MaskSpec, PartialAttn, TokenShard, attn_fix,
                        count_unmasked, finalize, flash_attn_backward,
                        flash_attn_forward, reference_attention,
                        reference_attention_grad)
from .costmodel import (COMM_STRATEGIES, CostParams, FabricParams, ModelPreset,
                        PRESETS, comm_cost, estimate_time, memory_cost,
                        predicted_phase_msgs, predicted_phase_words,
                        predicted_total_words, reconcile, total_step_cost)
from .errors import (ConfigError, DeadlockError, FullyMaskedRowError,
                     InfeasibleStrategyError, ShapeError, SimulationFault)
from .layouts import CyclicLayout, LayoutForm, layout_indices
from .linalg import Precision
from .mesh import (CommLedger, PHASE_BWD, PHASE_FWD, Proc, ProcCoord, ProcGrid,
                   SpmdRun, run_spmd)
from .strategies import (STRATEGY_NAMES, DistAttnConfig, SavedState,
                         StrategyBackward, StrategyForward, run_backward,
                         run_forward)

__version__ = "0.1.0"

__all__ = [
    "COMM_STRATEGIES",
    "CommLedger",
    "ConfigError",
    "CostParams",
    "CyclicLayout",
    "DeadlockError",
    "DistAttnConfig",
    "FabricParams",
    "FullyMaskedRowError",
    "InfeasibleStrategyError",
    "LayoutForm",
    "MaskKind",
    "MaskSpec",
    "ModelPreset",
    "PRESETS",
    "PHASE_BWD",
    "PHASE_FWD",
    "PartialAttn",
    "Precision",
    "Proc",
    "ProcCoord",
    "ProcGrid",
    "STRATEGY_NAMES",
    "SavedState",
    "ShapeError",
    "SimulationFault",
    "SpmdRun",
    "StrategyBackward",
    "StrategyForward",
    "TokenShard",
    "attn_fix",
    "comm_cost",
    "count_unmasked",
    "estimate_time",
    "finalize",
    "flash_attn_backward",
    "flash_attn_forward",
    "layout_indices",
    "memory_cost",
    "predicted_phase_msgs",
    "predicted_phase_words",
    "predicted_total_words",
    "reconcile",
    "reference_attention",
    "reference_attention_grad",
    "run_backward",
    "run_forward",
    "run_spmd",
    "total_step_cost",
    "__version__",
]
