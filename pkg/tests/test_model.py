import numpy as np
import pytest
from helpers import relative_error

from fewseq.config import RunConfig
from fewseq.errors import UsageError
from fewseq.model import (
    Model,
    check_mode,
    episode_forward,
    init_params,
    metric_kind,
    training_loss,
    transformer_config,
)


def tiny_config(**overrides):
    base = dict(
        seed=0,
        frame_dim=5,
        feat_dim=8,
        hidden_dim=6,
        encoder_depth=1,
        transformer_layers=1,
        transformer_heads=2,
        transformer_ff=10,
        metric_smoothing=0.1,
        alpha=1.0,
    )
    base.update(overrides)
    return RunConfig(**base)


def tiny_batch(rng, n=2, k=2, t=3, d=5, q=2, c=8, n_base=4):
    support = rng.standard_normal((n, k, t, d))
    queries = rng.standard_normal((q, t, d))
    labels = rng.integers(0, n, size=q)
    ep_text = rng.standard_normal((n, c))
    ep_text /= np.linalg.norm(ep_text, axis=1, keepdims=True)
    base_text = rng.standard_normal((n_base, c))
    base_text /= np.linalg.norm(base_text, axis=1, keepdims=True)
    vid_labels = rng.integers(0, n_base, size=n * k + q)
    return support, queries, labels, ep_text, base_text, vid_labels


def flatten(tree, keys):
    return np.concatenate([np.asarray(tree[k], dtype=np.float64).ravel() for k in keys])


def loss_for_params(vec, keys, shapes, config, batch):
    params = {}
    off = 0
    for k in keys:
        size = int(np.prod(shapes[k])) if shapes[k] else 1
        params[k] = vec[off : off + size].reshape(shapes[k])
        off += size
    support, queries, labels, ep_text, base_text, vid_labels = batch
    loss, _, _ = training_loss(
        params, config, support, queries, labels, ep_text, base_text, vid_labels,
        with_grads=False,
    )
    return loss


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"ablate_video_text": True},
        {"ablate_modulation": True},
        {"metric_kind": "bi_mhm"},
        {"metric_kind": "mean_cosine"},
        {"metric_bidirectional": False},
        {"positional": "none"},
        {"alpha": 0.5},
    ],
)
def test_full_pipeline_gradient_vs_finite_differences(overrides):
    config = tiny_config(**overrides)
    rng = np.random.default_rng(7)
    params = init_params(config, config.frame_dim, rng, dtype=np.float64)
    batch = tiny_batch(rng)
    support, queries, labels, ep_text, base_text, vid_labels = batch

    loss, _, grads = training_loss(
        params, config, support, queries, labels, ep_text, base_text, vid_labels
    )
    assert np.isfinite(loss)

    keys = sorted(params)
    shapes = {k: params[k].shape for k in keys}
    x0 = flatten(params, keys)
    analytic = flatten(grads, keys)

    eps = 1e-5
    fd = np.zeros_like(x0)
    for i in range(x0.size):
        hi = x0.copy(); hi[i] += eps
        lo = x0.copy(); lo[i] -= eps
        fd[i] = (
            loss_for_params(hi, keys, shapes, config, batch)
            - loss_for_params(lo, keys, shapes, config, batch)
        ) / (2 * eps)
    assert relative_error(analytic, fd) <= 1e-4


class TestEpisodeForward:
    def test_score_shapes(self):
        config = tiny_config()
        rng = np.random.default_rng(1)
        params = init_params(config, config.frame_dim, rng, dtype=np.float64)
        support, queries, *_ = tiny_batch(rng, n=3, q=4)
        ep_text = np.random.default_rng(2).standard_normal((3, 8))
        scores, feats, _ = episode_forward(
            params, transformer_config(config), metric_kind(config),
            support, queries, ep_text,
        )
        assert scores.shape == (4, 3)
        assert feats.shape == (3 * 2 + 4, 3, 8)

    def test_support_order_permutation_permutes_scores(self):
        config = tiny_config()
        rng = np.random.default_rng(3)
        params = init_params(config, config.frame_dim, rng, dtype=np.float64)
        support, queries, _, ep_text, _, _ = tiny_batch(rng, n=3, q=2)
        tcfg, metric = transformer_config(config), metric_kind(config)
        scores, _, _ = episode_forward(params, tcfg, metric, support, queries, ep_text)
        perm = np.array([2, 0, 1])
        scores_p, _, _ = episode_forward(
            params, tcfg, metric, support[perm], queries, ep_text[perm]
        )
        np.testing.assert_allclose(scores_p, scores[:, perm], atol=1e-12)

    def test_ablate_modulation_skips_transformer(self):
        config = tiny_config(ablate_modulation=True)
        rng = np.random.default_rng(4)
        params = init_params(config, config.frame_dim, rng, dtype=np.float64)
        support, queries, _, ep_text, _, _ = tiny_batch(rng)
        scores, _, _ = episode_forward(
            params, transformer_config(config), metric_kind(config),
            support, queries, ep_text, ablate_modulation=True,
        )
        # wiping the transformer weights must not change anything
        wiped = {
            k: (np.zeros_like(v) if k.startswith("transformer.") else v)
            for k, v in params.items()
        }
        scores_w, _, _ = episode_forward(
            wiped, transformer_config(config), metric_kind(config),
            support, queries, ep_text, ablate_modulation=True,
        )
        np.testing.assert_array_equal(scores, scores_w)


class TestModeChecks:
    def test_unknown_mode(self):
        with pytest.raises(UsageError):
            check_mode("best", tiny_config())

    def test_mode_config_conflict(self):
        config = tiny_config(ablate_video_text=True)
        with pytest.raises(UsageError, match="mode-config conflict"):
            check_mode("zeroshot", config)
        with pytest.raises(UsageError, match="mode-config conflict"):
            check_mode("ensemble", config)
        check_mode("fewshot", config)  # still fine
