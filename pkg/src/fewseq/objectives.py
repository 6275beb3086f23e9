"""Probability heads and losses.

Two heads produce distributions over a declared class list: the video-text
head (temperature-scaled softmax over cosine similarities between a pooled
video feature and class text vectors) and the few-shot head (softmax over raw
metric similarities).  The training loss is their weighted sum; at inference
the two distributions can be blended geometrically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import gap
from .errors import DataError, NumericError

PROB_FLOOR = 1e-12
TAU_MIN = 1e-3
TAU_MAX = 100.0
DIST_SUM_TOL = 1e-9


@dataclass(frozen=True)
class ClassDistribution:
    """A probability vector aligned with an ordered class-id list."""

    probs: np.ndarray
    class_ids: tuple[int, ...]

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or len(probs) != len(self.class_ids):
            raise DataError("distribution length must match its class list")
        if not np.isfinite(probs).all() or (probs < 0).any():
            raise NumericError("distribution entries must be finite and >= 0")
        if abs(probs.sum() - 1.0) > DIST_SUM_TOL:
            raise NumericError(f"distribution sums to {probs.sum()!r}, not 1")

    def argmax_class(self) -> int:
        return self.class_ids[int(np.argmax(self.probs))]


def clamp_tau(log_tau: float) -> float:
    """Effective temperature from its log-parameter, clamped to [1e-3, 100]."""
    return float(np.clip(np.exp(log_tau), TAU_MIN, TAU_MAX))


def init_log_tau(tau_init: float) -> float:
    if not (TAU_MIN <= tau_init <= TAU_MAX):
        raise DataError(f"tau must start inside [{TAU_MIN}, {TAU_MAX}], got {tau_init}")
    return float(np.log(tau_init))


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-probability of the true class.

    logits: (n, K); labels: (n,) ints in [0, K).  Returns (loss, probs).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError(
            f"label-out-of-range: labels must lie in [0, {logits.shape[1]}), "
            f"got [{labels.min()}, {labels.max()}]"
        )
    probs = stable_softmax(logits, axis=1)
    picked = probs[np.arange(len(labels)), labels]
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())
    return loss, probs

def softmax_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean CE)/d(logits) = (softmax - one_hot) / n."""
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def cosine_rows(x: np.ndarray, y: np.ndarray):
    """Pairwise cosines between rows of x (n, C) and rows of y (m, C)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xn = np.linalg.norm(x, axis=1)
    yn = np.linalg.norm(y, axis=1)
    if np.any(xn == 0.0) or np.any(yn == 0.0):
        raise NumericError("zero-vector: cosine undefined for a zero row")
    xu = x / xn[:, None]
    yu = y / yn[:, None]
    raw = xu @ yu.T
    clip_mask = np.abs(raw) < 1.0
    return np.clip(raw, -1.0, 1.0), (xu, xn, yu, clip_mask)


def cosine_rows_backward(cache, dcos: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. x only (y is a frozen text table)."""
    xu, xn, yu, clip_mask = cache
    dxu = (dcos * clip_mask) @ yu
    inner = (dxu * xu).sum(axis=1, keepdims=True)
    return (dxu - inner * xu) / xn[:, None]


def video_text_probs(
    video_feat: np.ndarray,
    texts: np.ndarray,
    tau: float,
    class_ids: tuple[int, ...] | None = None,
) -> ClassDistribution:
    """Temperature-scaled softmax over cos(pooled video feature, text_j).

    ``texts`` holds one C-vector per class, row order defining the class
    order; during training that is the full base-class set, at inference the
    episode's classes.
    """
    texts = np.atleast_2d(np.asarray(texts, dtype=np.float64))
    if texts.shape[0] < 1:
        raise DataError("video_text_probs needs at least one text vector")
    pooled = gap(np.asarray(video_feat))
    cos, _ = cosine_rows(pooled[None], texts)
    probs = stable_softmax(cos[0] / tau)
    if class_ids is None:
        class_ids = tuple(range(texts.shape[0]))
    return ClassDistribution(probs=probs, class_ids=tuple(class_ids))


def video_text_loss(
    video_feats: list[np.ndarray] | np.ndarray,
    labels,
    texts: np.ndarray,
    tau: float,
) -> float:
    """Mean cross-entropy of the video-text head over a batch of videos."""
    pooled = np.stack([gap(np.asarray(f)) for f in video_feats])
    cos, _ = cosine_rows(pooled, np.asarray(texts, dtype=np.float64))
    loss, _ = softmax_cross_entropy(cos / tau, np.asarray(labels))
    return loss


def few_shot_probs(
    scores: np.ndarray, class_ids: tuple[int, ...] | None = None
) -> ClassDistribution:
    """Softmax (no temperature) over raw metric similarities."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] < 2:
        raise DataError("few_shot_probs needs at least two class scores")
    if not np.isfinite(scores).all():
        raise NumericError("non-finite similarity score")
    if class_ids is None:
        class_ids = tuple(range(scores.shape[0]))
    return ClassDistribution(probs=stable_softmax(scores), class_ids=tuple(class_ids))


def few_shot_loss(dist: ClassDistribution, true_local_label: int) -> float:
    """Negative log-probability of the true class, floored at 1e-12."""
    if not (0 <= true_local_label < len(dist.class_ids)):
        raise DataError(
            f"label-out-of-range: {true_local_label} not in [0, {len(dist.class_ids)})"
        )
    return float(-np.log(max(dist.probs[true_local_label], PROB_FLOOR)))


def joint_loss(l_video_text: float, l_few_shot: float, alpha: float) -> float:
    """Total training loss: video-text term plus alpha times the few-shot term."""
    if alpha < 0:
        raise DataError("alpha must be >= 0")
    return float(l_video_text + alpha * l_few_shot)


def ensemble_probs(
    p_vt: ClassDistribution, p_fs: ClassDistribution, beta: float
) -> ClassDistribution:
    """Geometric blend p_vt^beta * p_fs^(1-beta), renormalized.

    The endpoints short-circuit so beta=0 returns the few-shot distribution
    and beta=1 the video-text distribution bit-for-bit.
    """
    if p_vt.class_ids != p_fs.class_ids:
        raise DataError("class-set mismatch between the two distributions")
    if not (0.0 <= beta <= 1.0):
        raise DataError(f"beta must be in [0, 1], got {beta}")
    if beta == 0.0:
        return ClassDistribution(probs=p_fs.probs.copy(), class_ids=p_fs.class_ids)
    if beta == 1.0:
        return ClassDistribution(probs=p_vt.probs.copy(), class_ids=p_vt.class_ids)
    log_mix = beta * np.log(np.maximum(p_vt.probs, PROB_FLOOR)) + (1.0 - beta) * np.log(
        np.maximum(p_fs.probs, PROB_FLOOR)
    )
    log_mix -= log_mix.max()
    mixed = np.exp(log_mix)
    return ClassDistribution(probs=mixed / mixed.sum(), class_ids=p_vt.class_ids)
