"""Temporal similarity metrics between two frame-feature matrices.

Sign convention (the single most important convention in this repo): every
metric returns a SIMILARITY — the negated alignment cost — so that a softmax
over raw metric outputs ranks the best-matching class highest.  A caller that
wants a distance must negate.

Metrics
-------
``otam``        ordered alignment via the relaxed-boundary DP of
                :mod:`fewseq.alignment`; optional smoothing makes it
                differentiable, and ``bidirectional`` adds the same DP on the
                transposed cost matrix.
``bi_mhm``      order-free bidirectional mean Hausdorff similarity.
``mean_cosine`` cosine of the time-averaged features (global-matching
                control baseline).

``brute_force_otam`` enumerates every monotone path under the exact move set
of the DP and exists purely as a test oracle for ``otam_score``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import alignment
from .encoders import cosine_similarity, gap
from .errors import DataError, NumericError

BRUTE_FORCE_MAX_FRAMES = 7

METRIC_KINDS = ("otam", "bi_mhm", "mean_cosine")


@dataclass(frozen=True)
class MetricKind:
    """Which metric to use plus the otam knobs."""

    kind: str = "otam"
    smoothing: float = 0.1
    bidirectional: bool = True

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise DataError(f"unknown metric kind {self.kind!r} (choose from {METRIC_KINDS})")
        if self.smoothing < 0:
            raise DataError("metric smoothing must be >= 0")


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize the last axis; raises on a zero row."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0.0):
        raise NumericError("zero-norm frame row: cannot build a cosine cost matrix")
    return x / norms[..., None], norms


def cost_matrix(fq: np.ndarray, fs: np.ndarray) -> np.ndarray:
    """Frame-pair costs 1 - cos(query frame i, support frame j), in [0, 2]."""
    fq = np.asarray(fq, dtype=np.float64)
    fs = np.asarray(fs, dtype=np.float64)
    if fq.shape[-1] != fs.shape[-1]:
        raise DataError(
            f"dimension-mismatch: feature dims {fq.shape[-1]} vs {fs.shape[-1]}"
        )
    qn, _ = normalize_rows(fq)
    sn, _ = normalize_rows(fs)
    return 1.0 - np.clip(qn @ sn.T, -1.0, 1.0)


def otam_score(cost: np.ndarray, smoothing: float = 0.1, bidirectional: bool = True) -> float:
    """Negated DP alignment cost of one cost matrix (higher = more similar)."""
    if smoothing < 0:
        raise DataError("smoothing must be >= 0")
    cost = np.asarray(cost, dtype=np.float64)
    totals, _ = alignment.otam_forward(cost[None], smoothing)
    result = totals[0]
    if bidirectional:
        totals_t, _ = alignment.otam_forward(np.ascontiguousarray(cost.T)[None], smoothing)
        result += totals_t[0]
    return float(-result)


def otam_score_with_grad(
    cost: np.ndarray, smoothing: float, bidirectional: bool = True
) -> tuple[float, np.ndarray]:
    """otam_score plus its gradient with respect to every cost entry.

    At smoothing 0 this is the subgradient selecting the first minimizing
    move (order: down, diagonal, right).
    """
    cost = np.asarray(cost, dtype=np.float64)
    ones = np.ones(1)
    totals, cum = alignment.otam_forward(cost[None], smoothing)
    grad = alignment.otam_backward(cost[None], cum, smoothing, ones)[0]
    total = totals[0]
    if bidirectional:
        cost_t = np.ascontiguousarray(cost.T)
        totals_t, cum_t = alignment.otam_forward(cost_t[None], smoothing)
        grad += alignment.otam_backward(cost_t[None], cum_t, smoothing, ones)[0].T
        total += totals_t[0]
    return float(-total), -grad


def bi_mhm_score(cost: np.ndarray) -> float:
    """Order-free similarity: -(mean row minimum + mean column minimum)."""
    cost = np.asarray(cost, dtype=np.float64)
    return float(-(cost.min(axis=1).mean() + cost.min(axis=0).mean()))


def mean_cosine_score(fq: np.ndarray, fs: np.ndarray) -> float:
    """Cosine similarity of the time-averaged (pooled) features."""
    return cosine_similarity(gap(np.asarray(fq)), gap(np.asarray(fs)))


def brute_force_otam(cost: np.ndarray, bidirectional: bool = True) -> float:
    """Enumerate every monotone padded path; test oracle for otam_score(0).

    Refuses matrices larger than 7x7 frames.
    """
    cost = np.asarray(cost, dtype=np.float64)
    tq, ts = cost.shape
    if tq > BRUTE_FORCE_MAX_FRAMES or ts > BRUTE_FORCE_MAX_FRAMES:
        raise DataError(
            f"size-exceeded: brute force enumeration is bounded at "
            f"{BRUTE_FORCE_MAX_FRAMES} frames, got {tq}x{ts}"
        )
    total = _min_path_cost(cost)
    if bidirectional:
        total += _min_path_cost(cost.T)
    return float(-total)


def _min_path_cost(cost: np.ndarray) -> float:
    """Minimum path cost from the top-left pad to the bottom-right pad.

    Cells live on the padded grid (rows 0..R-1, columns 0..S+1 where columns
    0 and S+1 cost nothing).  Moves out of a cell mirror the DP's arrival
    rules: interior cells are entered diagonally or from the left, the
    terminal pad column from above, diagonally, or from the left, and the
    leading pad column only from above.
    """
    R, S = cost.shape
    best = [np.inf]

    def visit(i: int, j: int, acc: float):
        if 1 <= j <= S:
            acc += cost[i, j - 1]
        if acc >= best[0]:
            return
        if i == R - 1 and j == S + 1:
            best[0] = acc
            return
        if j == 0:
            if i + 1 < R:
                visit(i + 1, 0, acc)
                visit(i + 1, 1, acc)
            visit(i, 1, acc)
        elif j <= S:
            if i + 1 < R:
                visit(i + 1, j + 1, acc)
            visit(i, j + 1, acc)
        else:
            if i + 1 < R:
                visit(i + 1, j, acc)

    visit(0, 0, 0.0)
    return best[0]


# ---------------------------------------------------------------------------
# Batched episode scoring with backward passes, used by the engine.
# ---------------------------------------------------------------------------

def episode_scores(fq: np.ndarray, fs: np.ndarray, metric: MetricKind):
    """Similarity of every query against every support prototype.

    fq: (Q, t_q, C) query features, fs: (N, t_s, C) prototypes.
    Returns (scores (Q, N), cache for the backward pass).
    """
    fq = np.asarray(fq, dtype=np.float64)
    fs = np.asarray(fs, dtype=np.float64)
    if fq.shape[-1] != fs.shape[-1]:
        raise DataError(
            f"dimension-mismatch: feature dims {fq.shape[-1]} vs {fs.shape[-1]}"
        )
    Q, tq, _ = fq.shape
    N, ts, _ = fs.shape

    if metric.kind == "mean_cosine":
        gq = fq.mean(axis=1)
        gs = fs.mean(axis=1)
        qn, qnorm = normalize_rows(gq)
        sn, snorm = normalize_rows(gs)
        scores = qn @ sn.T
        cache = ("mean_cosine", fq.shape, fs.shape, qn, qnorm, sn, snorm)
        return scores, cache

    qn, qnorm = normalize_rows(fq)
    sn, snorm = normalize_rows(fs)
    cos = np.einsum("qic,njc->qnij", qn, sn)
    clip_mask = np.abs(cos) < 1.0
    costs = 1.0 - np.clip(cos, -1.0, 1.0)
    flat = np.ascontiguousarray(costs.reshape(Q * N, tq, ts))

    if metric.kind == "bi_mhm":
        row_arg = flat.argmin(axis=2)
        col_arg = flat.argmin(axis=1)
        totals = flat.min(axis=2).mean(axis=1) + flat.min(axis=1).mean(axis=1)
        scores = -totals.reshape(Q, N)
        cache = ("bi_mhm", metric, qn, qnorm, sn, snorm, clip_mask, (row_arg, col_arg))
        return scores, cache

    totals, cum = alignment.otam_forward(flat, metric.smoothing)
    if metric.bidirectional:
        flat_t = np.ascontiguousarray(flat.transpose(0, 2, 1))
        totals_t, cum_t = alignment.otam_forward(flat_t, metric.smoothing)
        totals = totals + totals_t
        dp_cache = (flat, cum, flat_t, cum_t)
    else:
        dp_cache = (flat, cum, None, None)
    scores = -totals.reshape(Q, N)
    cache = ("otam", metric, qn, qnorm, sn, snorm, clip_mask, dp_cache)
    return scores, cache


def episode_scores_backward(cache, grad_scores: np.ndarray):
    """Backward of episode_scores: gradients w.r.t. fq and fs."""
    kind = cache[0]
    grad_scores = np.asarray(grad_scores, dtype=np.float64)

    if kind == "mean_cosine":
        _, fq_shape, fs_shape, qn, qnorm, sn, snorm = cache
        # scores = qn @ sn.T
        dqn = grad_scores @ sn
        dsn = grad_scores.T @ qn
        dgq = _normalize_backward(dqn, qn, qnorm)
        dgs = _normalize_backward(dsn, sn, snorm)
        dfq = np.repeat(dgq[:, None, :], fq_shape[1], axis=1) / fq_shape[1]
        dfs = np.repeat(dgs[:, None, :], fs_shape[1], axis=1) / fs_shape[1]
        return dfq, dfs

    _, metric, qn, qnorm, sn, snorm, clip_mask, extra = cache
    Q, tq, _ = qn.shape
    N, ts, _ = sn.shape

    if kind == "bi_mhm":
        row_arg, col_arg = extra
        dflat = np.zeros((Q * N, tq, ts))
        dtotals = -grad_scores.reshape(-1)
        b_idx = np.arange(Q * N)[:, None]
        np.add.at(dflat, (b_idx, np.arange(tq)[None, :], row_arg), (dtotals / tq)[:, None])
        np.add.at(dflat, (b_idx, col_arg, np.arange(ts)[None, :]), (dtotals / ts)[:, None])
        dcosts = dflat.reshape(Q, N, tq, ts)
    else:
        flat, cum, flat_t, cum_t = extra
        dtotals = -grad_scores.reshape(-1)
        dflat = alignment.otam_backward(flat, cum, metric.smoothing, dtotals)
        if flat_t is not None:
            dflat_t = alignment.otam_backward(flat_t, cum_t, metric.smoothing, dtotals)
            dflat = dflat + dflat_t.transpose(0, 2, 1)
        dcosts = dflat.reshape(Q, N, tq, ts)

    # costs = 1 - clip(cos); the clip only binds at exactly |cos| == 1.
    dcos = -dcosts * clip_mask
    dqn = np.einsum("qnij,njc->qic", dcos, sn)
    dsn = np.einsum("qnij,qic->njc", dcos, qn)
    dfq = _normalize_backward(dqn, qn, qnorm)
    dfs = _normalize_backward(dsn, sn, snorm)
    return dfq, dfs


def _normalize_backward(d_normed: np.ndarray, normed: np.ndarray, norms: np.ndarray) -> np.ndarray:
    inner = (d_normed * normed).sum(axis=-1, keepdims=True)
    return (d_normed - inner * normed) / norms[..., None]
