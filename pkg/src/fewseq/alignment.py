"""Batched dynamic-programming kernels for ordered temporal alignment.

These are the hot inner loops of the whole engine: every query/support pair
in every episode runs one forward DP (and one backward DP during training).
Two interchangeable backends exist:

* a numba ``@njit`` backend (default when numba imports cleanly), and
* a pure-numpy backend that vectorizes the same recurrence over the batch.

Set the environment variable ``FEWSEQ_DISABLE_NUMBA=1`` to force the numpy
path.  ``fewseq bench`` times the two against each other.

The recurrence
--------------
The cost matrix ``costs[b]`` has one row per query frame and one column per
support frame; it is padded with a zero-cost column on both sides of the
support axis.  A monotone path runs from the top-left pad cell to the
bottom-right pad cell:

* interior cells are entered diagonally (from above-left) or from the left,
* the terminal pad column is entered from above, diagonally, or from the
  left,
* the leading pad column is only ever walked downward.

So the alignment may begin and end at any support frame, while query frames
are consumed strictly in order.  ``smoothing > 0`` replaces the hard ``min``
with ``-smoothing * log(sum(exp(-x / smoothing)))``, which makes the score a
smooth function of the costs; ``smoothing == 0`` is the exact minimum with
first-argument tie-breaking in the backward pass (argument order: down,
diagonal, right).

Both backends return the *accumulated path cost*; negation into a similarity
happens in :mod:`fewseq.metrics`.
"""

from __future__ import annotations

import os

import numpy as np

ENV_DISABLE_NUMBA = "FEWSEQ_DISABLE_NUMBA"

_backend_name: str | None = None
_numba_mod = None


def _softmin2(a, b, smoothing):
    m = np.minimum(a, b)
    if smoothing == 0.0:
        return m
    return m - smoothing * np.log(
        np.exp(-(a - m) / smoothing) + np.exp(-(b - m) / smoothing)
    )


def _softmin3(a, b, c, smoothing):
    m = np.minimum(np.minimum(a, b), c)
    if smoothing == 0.0:
        return m
    return m - smoothing * np.log(
        np.exp(-(a - m) / smoothing)
        + np.exp(-(b - m) / smoothing)
        + np.exp(-(c - m) / smoothing)
    )


def otam_forward_numpy(costs: np.ndarray, smoothing: float) -> tuple[np.ndarray, np.ndarray]:
    """Run the DP on a batch of cost matrices.

    Parameters
    ----------
    costs : array, shape (B, R, S)
        Per-pair frame costs, query frames on the rows.
    smoothing : float
        Soft-min temperature; 0 gives the hard minimum.

    Returns
    -------
    totals : array, shape (B,)
        Accumulated path cost per batch element.
    cum : array, shape (B, R, S + 2)
        Full DP table over the padded columns, needed by the backward pass.
    """
    B, R, S = costs.shape
    cum = np.empty((B, R, S + 2), dtype=costs.dtype)
    cum[:, :, 0] = 0.0
    cum[:, 0, 1 : S + 1] = np.cumsum(costs[:, 0, :], axis=1)
    cum[:, 0, S + 1] = cum[:, 0, S]
    for i in range(1, R):
        for j in range(1, S + 1):
            cum[:, i, j] = costs[:, i, j - 1] + _softmin2(
                cum[:, i - 1, j - 1], cum[:, i, j - 1], smoothing
            )
        cum[:, i, S + 1] = _softmin3(
            cum[:, i - 1, S + 1], cum[:, i - 1, S], cum[:, i, S], smoothing
        )
    return cum[:, R - 1, S + 1].copy(), cum


def otam_backward_numpy(
    costs: np.ndarray, cum: np.ndarray, smoothing: float, grad_totals: np.ndarray
) -> np.ndarray:
    """Gradient of the accumulated path cost with respect to every cost entry."""
    B, R, S = costs.shape
    E = np.zeros((B, R, S + 2), dtype=costs.dtype)
    E[:, R - 1, S + 1] = 1.0
    for i in range(R - 1, -1, -1):
        # Terminal pad column: entered from (down, diag, right).
        e = E[:, i, S + 1]
        if i > 0:
            dn = cum[:, i - 1, S + 1]
            dg = cum[:, i - 1, S]
            rt = cum[:, i, S]
            if smoothing == 0.0:
                m = cum[:, i, S + 1]
                wd = (dn == m).astype(costs.dtype)
                wg = (dg == m).astype(costs.dtype) * (1.0 - wd)
                wr = 1.0 - wd - wg
            else:
                sv = cum[:, i, S + 1]
                wd = np.exp(-(dn - sv) / smoothing)
                wg = np.exp(-(dg - sv) / smoothing)
                wr = np.exp(-(rt - sv) / smoothing)
            E[:, i - 1, S + 1] += wd * e
            E[:, i - 1, S] += wg * e
            E[:, i, S] += wr * e
        else:
            E[:, 0, S] += e
        for j in range(S, 0, -1):
            e = E[:, i, j]
            if i == 0:
                E[:, 0, j - 1] += e
                continue
            dg = cum[:, i - 1, j - 1]
            rt = cum[:, i, j - 1]
            if smoothing == 0.0:
                m = np.minimum(dg, rt)
                wg = (dg == m).astype(costs.dtype)
                wr = 1.0 - wg
            else:
                sv = cum[:, i, j] - costs[:, i, j - 1]
                wg = np.exp(-(dg - sv) / smoothing)
                wr = np.exp(-(rt - sv) / smoothing)
            E[:, i - 1, j - 1] += wg * e
            E[:, i, j - 1] += wr * e
    return E[:, :, 1 : S + 1] * grad_totals[:, None, None]


def _load_numba():
    global _numba_mod
    if _numba_mod is None:
        from . import _alignment_numba

        _numba_mod = _alignment_numba
    return _numba_mod


def backend_name() -> str:
    """Which kernel backend is active ('numba' or 'numpy')."""
    global _backend_name
    if _backend_name is None:
        if os.environ.get(ENV_DISABLE_NUMBA, "").strip() not in ("", "0"):
            _backend_name = "numpy"
        else:
            try:
                _load_numba()
                _backend_name = "numba"
            except ImportError:
                _backend_name = "numpy"
    return _backend_name


def otam_forward(costs: np.ndarray, smoothing: float) -> tuple[np.ndarray, np.ndarray]:
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    if backend_name() == "numba":
        return _load_numba().otam_forward(costs, smoothing)
    return otam_forward_numpy(costs, smoothing)


def otam_backward(
    costs: np.ndarray, cum: np.ndarray, smoothing: float, grad_totals: np.ndarray
) -> np.ndarray:
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    grad_totals = np.ascontiguousarray(grad_totals, dtype=np.float64)
    if backend_name() == "numba":
        return _load_numba().otam_backward(costs, cum, smoothing, grad_totals)
    return otam_backward_numpy(costs, cum, smoothing, grad_totals)


def warmup():
    """Trigger JIT compilation so forked evaluation workers inherit it."""
    c = np.zeros((1, 2, 2))
    totals, cum = otam_forward(c, 0.1)
    otam_backward(c, cum, 0.1, np.ones(1))
    totals, cum = otam_forward(c, 0.0)
    otam_backward(c, cum, 0.0, np.ones(1))
