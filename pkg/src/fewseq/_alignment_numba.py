"""Numba twins of the numpy alignment kernels (same recurrence, same
tie-breaking).  No fastmath: evaluation results must be reproducible."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _forward_kernel(costs, smoothing, cum):
    B, R, S = costs.shape
    for b in range(B):
        cum[b, 0, 0] = 0.0
        acc = 0.0
        for j in range(1, S + 1):
            acc += costs[b, 0, j - 1]
            cum[b, 0, j] = acc
        cum[b, 0, S + 1] = acc
        for i in range(1, R):
            cum[b, i, 0] = 0.0
            for j in range(1, S + 1):
                dg = cum[b, i - 1, j - 1]
                rt = cum[b, i, j - 1]
                if smoothing == 0.0:
                    best = dg if dg <= rt else rt
                else:
                    m = dg if dg <= rt else rt
                    best = m - smoothing * math.log(
                        math.exp(-(dg - m) / smoothing) + math.exp(-(rt - m) / smoothing)
                    )
                cum[b, i, j] = costs[b, i, j - 1] + best
            dn = cum[b, i - 1, S + 1]
            dg = cum[b, i - 1, S]
            rt = cum[b, i, S]
            if smoothing == 0.0:
                best = dn
                if dg < best:
                    best = dg
                if rt < best:
                    best = rt
            else:
                m = dn
                if dg < m:
                    m = dg
                if rt < m:
                    m = rt
                best = m - smoothing * math.log(
                    math.exp(-(dn - m) / smoothing)
                    + math.exp(-(dg - m) / smoothing)
                    + math.exp(-(rt - m) / smoothing)
                )
            cum[b, i, S + 1] = best
    return cum


@njit(cache=True)
def _backward_kernel(costs, cum, smoothing, grad_totals, grad_costs):
    B, R, S = costs.shape
    E = np.zeros((R, S + 2), dtype=np.float64)
    for b in range(B):
        E[:, :] = 0.0
        E[R - 1, S + 1] = 1.0
        for i in range(R - 1, -1, -1):
            e = E[i, S + 1]
            if i > 0:
                dn = cum[b, i - 1, S + 1]
                dg = cum[b, i - 1, S]
                rt = cum[b, i, S]
                if smoothing == 0.0:
                    m = cum[b, i, S + 1]
                    if dn == m:
                        wd, wg, wr = 1.0, 0.0, 0.0
                    elif dg == m:
                        wd, wg, wr = 0.0, 1.0, 0.0
                    else:
                        wd, wg, wr = 0.0, 0.0, 1.0
                else:
                    sv = cum[b, i, S + 1]
                    wd = math.exp(-(dn - sv) / smoothing)
                    wg = math.exp(-(dg - sv) / smoothing)
                    wr = math.exp(-(rt - sv) / smoothing)
                E[i - 1, S + 1] += wd * e
                E[i - 1, S] += wg * e
                E[i, S] += wr * e
            else:
                E[0, S] += e
            for j in range(S, 0, -1):
                e = E[i, j]
                if i == 0:
                    E[0, j - 1] += e
                    continue
                dg = cum[b, i - 1, j - 1]
                rt = cum[b, i, j - 1]
                if smoothing == 0.0:
                    if dg <= rt:
                        wg, wr = 1.0, 0.0
                    else:
                        wg, wr = 0.0, 1.0
                else:
                    sv = cum[b, i, j] - costs[b, i, j - 1]
                    wg = math.exp(-(dg - sv) / smoothing)
                    wr = math.exp(-(rt - sv) / smoothing)
                E[i - 1, j - 1] += wg * e
                E[i, j - 1] += wr * e
        g = grad_totals[b]
        for i in range(R):
            for j in range(S):
                grad_costs[b, i, j] = E[i, j + 1] * g
    return grad_costs


def otam_forward(costs, smoothing):
    costs = np.ascontiguousarray(costs)
    cum = np.empty((costs.shape[0], costs.shape[1], costs.shape[2] + 2), dtype=costs.dtype)
    _forward_kernel(costs, float(smoothing), cum)
    return cum[:, -1, -1].copy(), cum


def otam_backward(costs, cum, smoothing, grad_totals):
    costs = np.ascontiguousarray(costs)
    grad_costs = np.empty_like(costs)
    _backward_kernel(
        costs, cum, float(smoothing), np.ascontiguousarray(grad_totals), grad_costs
    )
    return grad_costs
