"""The assembled model: encode, average shots, modulate, score, classify.

Parameters live in one flat dict (visual MLP, Transformer, and the log
temperature under ``tau.log``); the canonical storage dtype is float32 and
every computation upcasts to float64, so checkpoints round-trip bit-exactly
while gradients stay accurate enough for finite-difference verification.

The functional core (:func:`episode_forward`, :func:`training_loss`) takes
plain arrays so tests can drive it with float64 parameter trees directly; the
:class:`Model` wrapper binds parameters to a class table, the frozen text
encoder, and the metric choice.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .data import ClassTable
from .encoders import (
    PromptTemplate,
    encode_frames,
    encode_frames_backward,
    init_visual_params,
    text_encoder_from_table,
)
from .errors import DataError, UsageError
from .metrics import MetricKind, episode_scores, episode_scores_backward
from .modulation import (
    TransformerConfig,
    init_transformer_params,
    modulate_support_batch,
    modulate_support_batch_backward,
    transform_query_batch,
    transformer_backward,
)
from .objectives import (
    TAU_MAX,
    TAU_MIN,
    clamp_tau,
    cosine_rows,
    cosine_rows_backward,
    init_log_tau,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
)

TRAINABLE_DTYPE = np.float32


def transformer_config(config: RunConfig) -> TransformerConfig:
    return TransformerConfig(
        model_dim=config.feat_dim,
        layers=config.transformer_layers,
        heads=config.transformer_heads,
        ff_dim=config.transformer_ff,
        positional=config.positional,
    )


def metric_kind(config: RunConfig) -> MetricKind:
    return MetricKind(
        kind=config.metric_kind,
        smoothing=config.metric_smoothing,
        bidirectional=config.metric_bidirectional,
    )


def init_params(
    config: RunConfig, frame_dim: int, rng: np.random.Generator, dtype=TRAINABLE_DTYPE
) -> dict[str, np.ndarray]:
    """All trainable tensors: visual encoder, Transformer, log temperature."""
    params = init_visual_params(
        frame_dim, config.feat_dim, config.hidden_dim, config.encoder_depth, rng, dtype
    )
    params.update(init_transformer_params(transformer_config(config), rng, dtype))
    params["tau.log"] = np.array(init_log_tau(config.tau_init), dtype=dtype)
    return params


def zero_grads_like(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}


def episode_forward(
    params,
    tcfg: TransformerConfig,
    metric: MetricKind,
    support: np.ndarray,
    queries: np.ndarray,
    episode_text: np.ndarray,
    ablate_modulation: bool = False,
):
    """Scores of every query against every class prototype.

    support: (N, K, t, D) raw frames; queries: (Q, t, D); episode_text: (N, C)
    in support-group order.  Returns (scores (Q, N), feats (V, t, C), cache);
    feats holds the raw per-frame encodings of all V = N*K + Q videos in
    support-then-query order, for the video-text head.
    """
    support = np.asarray(support, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if support.ndim != 4 or queries.ndim != 3:
        raise DataError(
            f"expected support (N, K, t, D) and queries (Q, t, D), got "
            f"{support.shape} and {queries.shape}"
        )
    N, K, t, D = support.shape
    Q = queries.shape[0]
    frames = np.concatenate([support.reshape(N * K, t, D), queries], axis=0)
    feats, enc_cache = encode_frames(params, frames)
    sup_feats = feats[: N * K].reshape(N, K, t, -1)
    qry_feats = feats[N * K :]

    # K-shot prototype: mean over shots, exact when all shots are identical
    proto = sup_feats[:, 0] + (sup_feats - sup_feats[:, :1]).mean(axis=1)

    if ablate_modulation:
        proto_out, qry_out = proto, qry_feats
        mod_cache = None
    else:
        proto_out, sup_cache = modulate_support_batch(params, tcfg, proto, episode_text)
        qry_out, qry_cache = transform_query_batch(params, tcfg, qry_feats)
        mod_cache = (sup_cache, qry_cache)

    scores, metric_cache = episode_scores(qry_out, proto_out, metric)
    cache = {
        "enc": enc_cache,
        "mod": mod_cache,
        "metric": metric_cache,
        "shape": (N, K, t, Q),
    }
    return scores, feats, cache


def episode_backward(
    params,
    tcfg: TransformerConfig,
    cache,
    grad_scores: np.ndarray,
    grad_feats_extra: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Backward of episode_forward, optionally adding a gradient that flows
    directly into the raw encodings (the video-text head's contribution)."""
    N, K, t, Q = cache["shape"]
    dqry_out, dproto_out = episode_scores_backward(cache["metric"], grad_scores)

    grads: dict[str, np.ndarray] = {}
    if cache["mod"] is None:
        dproto, dqry_feats = dproto_out, dqry_out
    else:
        sup_cache, qry_cache = cache["mod"]
        g_sup, dproto, _dtext = modulate_support_batch_backward(
            params, tcfg, sup_cache, dproto_out
        )
        g_qry, dqry_feats = transformer_backward(params, tcfg, qry_cache, dqry_out)
        grads = {k: g_sup[k] + g_qry[k] for k in g_sup}

    dsup_feats = np.repeat(dproto[:, None], K, axis=1) / K
    dfeats = np.concatenate([dsup_feats.reshape(N * K, t, -1), dqry_feats], axis=0)
    if grad_feats_extra is not None:
        dfeats = dfeats + grad_feats_extra
    enc_grads, _ = encode_frames_backward(params, cache["enc"], dfeats)
    grads.update(enc_grads)
    return grads


def training_loss(
    params,
    config: RunConfig,
    support: np.ndarray,
    queries: np.ndarray,
    query_labels: np.ndarray,
    episode_text: np.ndarray,
    base_text: np.ndarray | None,
    video_base_labels: np.ndarray | None,
    with_grads: bool = True,
):
    """Joint episode loss and (optionally) gradients for every parameter.

    The few-shot term is the cross-entropy of the metric-score softmax over
    the episode's classes; the video-text term is the cross-entropy of the
    temperature-scaled cosine softmax over all base classes, applied to every
    support and query video.  Ablation flags zero out either term.
    """
    tcfg = transformer_config(config)
    metric = metric_kind(config)
    scores, feats, cache = episode_forward(
        params, tcfg, metric, support, queries, episode_text, config.ablate_modulation
    )
    query_labels = np.asarray(query_labels)
    l_fs, fs_probs = softmax_cross_entropy(scores, query_labels)

    l_vt = 0.0
    dfeats_extra = None
    dlog_tau = 0.0
    if not config.ablate_video_text:
        if base_text is None or video_base_labels is None:
            raise DataError("video-text loss needs base text features and labels")
        V, t, _ = feats.shape
        pooled = feats.mean(axis=1)
        cos, cos_cache = cosine_rows(pooled, base_text)
        log_tau = float(params["tau.log"])
        tau = clamp_tau(log_tau)
        logits = cos / tau
        l_vt, vt_probs = softmax_cross_entropy(logits, video_base_labels)
        if with_grads:
            dlogits = softmax_cross_entropy_backward(vt_probs, video_base_labels)
            dcos = dlogits / tau
            dtau = float(-(dlogits * cos).sum() / tau**2)
            raw_tau = float(np.exp(log_tau))
            dlog_tau = dtau * raw_tau if TAU_MIN <= raw_tau <= TAU_MAX else 0.0
            dpooled = cosine_rows_backward(cos_cache, dcos)
            dfeats_extra = np.repeat(dpooled[:, None, :], t, axis=1) / t

    total = l_vt + config.alpha * l_fs
    parts = {"total": total, "video_text": l_vt, "few_shot": l_fs}
    if not with_grads:
        return total, parts, None

    dscores = config.alpha * softmax_cross_entropy_backward(fs_probs, query_labels)
    grads = episode_backward(params, tcfg, cache, dscores, dfeats_extra)
    full = zero_grads_like(params)
    full.update(grads)
    full["tau.log"] = np.asarray(dlog_tau, dtype=np.float64)
    return total, parts, full


class Model:
    """Parameters bound to a class table, text encoder, and metric."""

    def __init__(
        self,
        config: RunConfig,
        classes: ClassTable,
        frame_dim: int,
        params: dict[str, np.ndarray] | None = None,
        step: int = 0,
    ):
        self.config = config
        self.classes = classes
        self.frame_dim = frame_dim
        if params is None:
            rng = np.random.default_rng([config.seed, 11])
            params = init_params(config, frame_dim, rng)
        self.params = params
        self.step = step
        self.template = PromptTemplate(config.template)
        self.text = text_encoder_from_table(
            classes,
            dim=config.feat_dim,
            seed=config.text_seed,
            informativeness=config.text_informativeness,
            normalize=config.text_normalize,
        )
        self.base_ids = classes.split_ids("base")
        self.base_pos = {cid: i for i, cid in enumerate(self.base_ids)}
        self._base_text: np.ndarray | None = None

    @property
    def tcfg(self) -> TransformerConfig:
        return transformer_config(self.config)

    @property
    def metric(self) -> MetricKind:
        return metric_kind(self.config)

    @property
    def tau(self) -> float:
        return clamp_tau(float(self.params["tau.log"]))

    def text_features(self, class_ids) -> np.ndarray:
        """(n, C) text vectors for the given global class ids, in order."""
        return np.stack(
            [self.text.encode(self.classes.names[cid], self.template) for cid in class_ids]
        )

    @property
    def base_text(self) -> np.ndarray:
        if self._base_text is None:
            self._base_text = self.text_features(self.base_ids)
        return self._base_text

    def base_label(self, class_id: int) -> int:
        pos = self.base_pos.get(class_id)
        if pos is None:
            raise DataError(f"class id {class_id} is not a base class")
        return pos

    def __getstate__(self):
        # text encoder caches rebuild deterministically in workers
        return {
            "config": self.config,
            "classes": self.classes,
            "frame_dim": self.frame_dim,
            "params": self.params,
            "step": self.step,
        }

    def __setstate__(self, state):
        self.__init__(
            state["config"],
            state["classes"],
            state["frame_dim"],
            params=state["params"],
            step=state["step"],
        )


def check_mode(mode: str, config: RunConfig):
    if mode not in ("fewshot", "ensemble", "zeroshot"):
        raise UsageError(f"unknown prediction mode {mode!r}")
    if mode in ("ensemble", "zeroshot") and config.ablate_video_text:
        raise UsageError(
            f"mode-config conflict: {mode} prediction needs the video-text head, "
            f"but this model was trained with ablate.video_text"
        )
