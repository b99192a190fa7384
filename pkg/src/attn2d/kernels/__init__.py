"""Numeric kernel backends.

The blockwise attention loops and the fixed-order matmul are the hot paths of
the package. Two interchangeable implementations exist:

* ``numba`` -- explicit loops compiled with ``@njit`` (default when numba
  imports cleanly),
* ``numpy`` -- vectorized fallback with identical semantics.

Selection: the ``ATTN2D_KERNEL`` env var (``auto``, ``numba``, ``numpy``),
read once at import; ``use_backend`` overrides it at runtime (used by the
benchmark and by tests that compare the two paths).
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import numba_backend

    _HAS_NUMBA = True
except ImportError:
    numba_backend = None  # type: ignore[assignment]
    _HAS_NUMBA = False

_BACKENDS = {"numpy": numpy_backend}
if _HAS_NUMBA:
    _BACKENDS["numba"] = numba_backend

_impl = None
_name = ""


def use_backend(name: str):
    """Select the kernel backend by name ('auto', 'numba' or 'numpy')."""
    global _impl, _name
    if name == "auto":
        name = "numba" if _HAS_NUMBA else "numpy"
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {sorted(_BACKENDS)}")
    _impl = _BACKENDS[name]
    _name = name
    return _name


def backend_name() -> str:
    return _name


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


use_backend(os.environ.get("ATTN2D_KERNEL", "auto"))


def matmul(a, b, out):
    """out <- a @ b with a fixed left-to-right inner summation order."""
    _impl.matmul(a, b, out)


def matmul_t(a, b, out):
    """out <- a @ b.T with a fixed left-to-right inner summation order."""
    _impl.matmul_t(a, b, out)


def flash_forward(q, k, v, q_idx, k_idx, causal, scale, block, m, nacc, d):
    """Blockwise attention forward recurrence over key/value blocks.

    Updates the running statistics in place: m holds per-row score maxima
    (-inf for rows that attended nothing yet), nacc the unnormalized weighted
    values and d the denominators. Callers prefill m with -inf and zero
    nacc/d, or pass the state left by a previous call to continue folding.
    """
    _impl.flash_forward(q, k, v, q_idx, k_idx, causal, scale, block, m, nacc, d)


def flash_backward(q, k, v, o, d_out, m_stat, d_stat, q_idx, k_idx, causal, scale, dq, dk, dv):
    """Accumulate attention gradients into dq/dk/dv from saved row statistics.

    Recomputes attention weights blockwise as exp(s - m_stat)/d_stat, so no
    score matrix is ever materialized. m_stat/d_stat must be the statistics of
    the *complete* softmax over all keys the rows of q attend anywhere, while
    k/v may be any subset; the accumulated gradients are then exact partial
    contributions of that subset.
    """
    _impl.flash_backward(
        q, k, v, o, d_out, m_stat, d_stat, q_idx, k_idx, causal, scale, dq, dk, dv
    )
