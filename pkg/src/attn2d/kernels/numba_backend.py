"""Loop kernels compiled with numba.

Inner summations run in a fixed left-to-right order, so results are
bit-reproducible run-to-run. Score arithmetic uses float64 temporaries
regardless of storage precision; stores cast back to the array dtype.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def matmul(a, b, out):
    n, kdim = a.shape
    mdim = b.shape[1]
    for i in range(n):
        for j in range(mdim):
            acc = 0.0
            for t in range(kdim):
                acc = acc + a[i, t] * b[t, j]
            out[i, j] = acc


@njit(cache=True)
def matmul_t(a, b, out):
    n, kdim = a.shape
    mdim = b.shape[0]
    for i in range(n):
        for j in range(mdim):
            acc = 0.0
            for t in range(kdim):
                acc = acc + a[i, t] * b[j, t]
            out[i, j] = acc


@njit(cache=True)
def flash_forward(q, k, v, q_idx, k_idx, causal, scale, block, m, nacc, d):
    nq, h = q.shape
    nk = k.shape[0]
    for start in range(0, nk, block):
        stop = min(start + block, nk)
        blk = stop - start
        s_buf = np.empty(blk, np.float64)
        for i in range(nq):
            qi = q_idx[i]
            m_new = float(m[i])
            for jj in range(blk):
                j = start + jj
                if causal and qi < k_idx[j]:
                    s_buf[jj] = -np.inf
                else:
                    acc = 0.0
                    for t in range(h):
                        acc += q[i, t] * k[j, t]
                    sv = acc * scale
                    s_buf[jj] = sv
                    if sv > m_new:
                        m_new = sv
            if m_new == -np.inf:
                continue  # row attended nothing yet; stays the empty partial
            alpha = 0.0 if m[i] == -np.inf else np.exp(m[i] - m_new)
            d[i] = d[i] * alpha
            for t in range(h):
                nacc[i, t] = nacc[i, t] * alpha
            for jj in range(blk):
                sv = s_buf[jj]
                if sv == -np.inf:
                    continue
                w = np.exp(sv - m_new)
                d[i] = d[i] + w
                j = start + jj
                for t in range(h):
                    nacc[i, t] = nacc[i, t] + w * v[j, t]
            m[i] = m_new


@njit(cache=True)
def flash_backward(q, k, v, o, d_out, m_stat, d_stat, q_idx, k_idx, causal, scale, dq, dk, dv):
    nq, h = q.shape
    nk = k.shape[0]
    for i in range(nq):
        delta = 0.0
        for t in range(h):
            delta += d_out[i, t] * o[i, t]
        qi = q_idx[i]
        for j in range(nk):
            if causal and qi < k_idx[j]:
                continue
            acc = 0.0
            for t in range(h):
                acc += q[i, t] * k[j, t]
            pw = np.exp(acc * scale - m_stat[i]) / d_stat[i]
            dp = 0.0
            for t in range(h):
                dp += d_out[i, t] * v[j, t]
            g = pw * (dp - delta) * scale
            for t in range(h):
                dq[i, t] = dq[i, t] + g * k[j, t]
                dk[j, t] = dk[j, t] + g * q[i, t]
                dv[j, t] = dv[j, t] + pw * d_out[i, t]
