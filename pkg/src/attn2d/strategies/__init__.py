"""Distributed attention strategies sharing one forward/backward contract.

Each strategy module exposes

    forward(cfg, q, k, v)      -> StrategyForward
    backward(cfg, saved, dout) -> StrategyBackward

where inputs and returned tensors are full (n, h) arrays in global token
order and `saved` is the per-processor state captured by that strategy's
own forward pass.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import attn2d_no, attn2d_o, ring
from .common import DistAttnConfig, SavedState, StrategyBackward, StrategyForward

STRATEGY_NAMES = ("ring", "attn2d_no", "attn2d_o")

_MODULES = {
    "ring": ring,
    "attn2d_no": attn2d_no,
    "attn2d_o": attn2d_o,
}


def get_strategy(name: str):
    """Return the strategy module registered under `name`."""
    try:
        return _MODULES[name]
    except KeyError:
        raise ConfigError(
            f"unknown strategy {name!r}; expected one of {', '.join(STRATEGY_NAMES)}"
        ) from None


def run_forward(name: str, cfg: DistAttnConfig, q: np.ndarray, k: np.ndarray,
                v: np.ndarray) -> StrategyForward:
    return get_strategy(name).forward(cfg, q, k, v)


def run_backward(name: str, cfg: DistAttnConfig, saved, d_out: np.ndarray) -> StrategyBackward:
    return get_strategy(name).backward(cfg, saved, d_out)


__all__ = [
    "STRATEGY_NAMES",
    "DistAttnConfig",
    "SavedState",
    "StrategyBackward",
    "StrategyForward",
    "attn2d_no",
    "attn2d_o",
    "get_strategy",
    "ring",
    "run_backward",
    "run_forward",
]
