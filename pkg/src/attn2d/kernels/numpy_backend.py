"""Vectorized numpy implementations of the hot kernels.

Semantics match the numba backend; each function is deterministic
run-to-run for fixed inputs.
"""

from __future__ import annotations

import numpy as np

# Key/value chunk width used to bound temporary score blocks in the backward
# pass, which takes no block argument.
_BWD_CHUNK = 128


def matmul(a, b, out):
    np.matmul(a, b, out=out)


def matmul_t(a, b, out):
    np.matmul(a, b.T, out=out)


def flash_forward(q, k, v, q_idx, k_idx, causal, scale, block, m, nacc, d):
    nk = k.shape[0]
    scale_t = q.dtype.type(scale)
    for start in range(0, nk, block):
        stop = min(start + block, nk)
        s = (q @ k[start:stop].T) * scale_t
        if causal:
            s = np.where(q_idx[:, None] >= k_idx[None, start:stop], s, -np.inf)
        m_new = np.maximum(m, s.max(axis=1))
        active = m_new > -np.inf
        with np.errstate(invalid="ignore"):
            alpha = np.exp(m - m_new)
            w = np.exp(s - m_new[:, None])
        # Rows with no unmasked key so far stay empty; their exponents above
        # are nan (-inf minus -inf) and must not contribute.
        alpha[~active] = 0.0
        w[~active, :] = 0.0
        d[:] = alpha * d + w.sum(axis=1)
        nacc[:] = alpha[:, None] * nacc + w @ v[start:stop]
        m[:] = np.where(active, m_new, m)


def flash_backward(q, k, v, o, d_out, m_stat, d_stat, q_idx, k_idx, causal, scale, dq, dk, dv):
    nk = k.shape[0]
    scale_t = q.dtype.type(scale)
    delta = np.sum(d_out * o, axis=1)
    for start in range(0, nk, _BWD_CHUNK):
        stop = min(start + _BWD_CHUNK, nk)
        kb = k[start:stop]
        vb = v[start:stop]
        s = (q @ kb.T) * scale_t
        if causal:
            s = np.where(q_idx[:, None] >= k_idx[None, start:stop], s, -np.inf)
        p = np.exp(s - m_stat[:, None]) / d_stat[:, None]
        dv[start:stop] += p.T @ d_out
        dp = d_out @ vb.T
        ds = p * (dp - delta[:, None])
        dq += (ds @ kb) * scale_t
        dk[start:stop] += (ds.T @ q) * scale_t
