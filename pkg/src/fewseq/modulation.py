"""Text-guided prototype refinement with a temporal Transformer.

One parameter set serves two paths:

* support: the class text vector is appended as an extra token after the
  frame tokens, the whole (t+1)-token sequence runs through the Transformer,
  and the text token's output row is dropped — what remains is the refined
  prototype;
* query: the t frame tokens run through the same weights with no text token,
  so query and support features stay in a common space.

Blocks are standard pre-norm: ``x + Attn(LN(x))`` then ``x + FF(LN(x))``,
with no final normalization, so zeroing the attention and feed-forward
output weights reduces the whole stack to the identity (plus positional
encoding).  Everything is plain numpy with hand-written backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import gelu, gelu_grad
from .errors import DataError

LN_EPS = 1e-5

POSITIONAL_KINDS = ("sinusoidal", "none")


@dataclass(frozen=True)
class TransformerConfig:
    model_dim: int
    layers: int = 1
    heads: int = 4
    ff_dim: int = 128
    positional: str = "sinusoidal"

    def __post_init__(self):
        if self.layers < 1:
            raise DataError("transformer layers must be >= 1")
        if self.heads < 1 or self.model_dim % self.heads != 0:
            raise DataError(
                f"model dim {self.model_dim} must be divisible by heads {self.heads}"
            )
        if self.ff_dim < 1:
            raise DataError("transformer ff_dim must be >= 1")
        if self.positional not in POSITIONAL_KINDS:
            raise DataError(f"positional kind must be one of {POSITIONAL_KINDS}")


def init_transformer_params(
    cfg: TransformerConfig, rng: np.random.Generator, dtype=np.float32
) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    C, F = cfg.model_dim, cfg.ff_dim
    attn_std = np.sqrt(1.0 / C)
    ff_std1 = np.sqrt(2.0 / (C + F))
    for i in range(cfg.layers):
        p = f"transformer.{i}."
        params[p + "ln1.g"] = np.ones(C, dtype=dtype)
        params[p + "ln1.b"] = np.zeros(C, dtype=dtype)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + f"attn.{name}"] = (attn_std * rng.standard_normal((C, C))).astype(dtype)
        for name in ("bq", "bk", "bv", "bo"):
            params[p + f"attn.{name}"] = np.zeros(C, dtype=dtype)
        params[p + "ln2.g"] = np.ones(C, dtype=dtype)
        params[p + "ln2.b"] = np.zeros(C, dtype=dtype)
        params[p + "ff.w1"] = (ff_std1 * rng.standard_normal((C, F))).astype(dtype)
        params[p + "ff.b1"] = np.zeros(F, dtype=dtype)
        params[p + "ff.w2"] = (ff_std1 * rng.standard_normal((F, C))).astype(dtype)
        params[p + "ff.b2"] = np.zeros(C, dtype=dtype)
    return params


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)
    div = np.exp(-np.log(10000.0) * idx / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: pe[:, 1::2].shape[1]])
    return pe


def _p64(params, key):
    return np.asarray(params[key], dtype=np.float64)


def _layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(x, heads):
    B, M, C = x.shape
    return x.reshape(B, M, heads, C // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, M, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, M, h * dk)


def _attention_forward(params, prefix, heads, x):
    wq, wk, wv, wo = (_p64(params, prefix + f"attn.{n}") for n in ("wq", "wk", "wv", "wo"))
    bq, bk, bv, bo = (_p64(params, prefix + f"attn.{n}") for n in ("bq", "bk", "bv", "bo"))
    q = _split_heads(x @ wq + bq, heads)
    k = _split_heads(x @ wk + bk, heads)
    v = _split_heads(x @ wv + bv, heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = np.einsum("bhid,bhjd->bhij", q, k) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    attn = w / w.sum(axis=-1, keepdims=True)
    ctx = np.einsum("bhij,bhjd->bhid", attn, v)
    merged = _merge_heads(ctx)
    y = merged @ wo + bo
    return y, (x, q, k, v, attn, merged, scale)


def _attention_backward(params, prefix, heads, dy, cache):
    x, q, k, v, attn, merged, scale = cache
    wq, wk, wv, wo = (_p64(params, prefix + f"attn.{n}") for n in ("wq", "wk", "wv", "wo"))
    B, M, C = x.shape
    grads = {}
    grads[prefix + "attn.wo"] = merged.reshape(-1, C).T @ dy.reshape(-1, C)
    grads[prefix + "attn.bo"] = dy.sum(axis=(0, 1))
    dmerged = dy @ wo.T
    dctx = _split_heads(dmerged, heads)
    dattn = np.einsum("bhid,bhjd->bhij", dctx, v)
    dv = np.einsum("bhij,bhid->bhjd", attn, dctx)
    dlogits = (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * attn
    dq = np.einsum("bhij,bhjd->bhid", dlogits, k) * scale
    dk = np.einsum("bhij,bhid->bhjd", dlogits, q) * scale
    dx = np.zeros_like(x)
    for d, w, name in ((dq, wq, "wq"), (dk, wk, "wk"), (dv, wv, "wv")):
        dflat = _merge_heads(d)
        grads[prefix + f"attn.{name}"] = x.reshape(-1, C).T @ dflat.reshape(-1, C)
        grads[prefix + "attn.b" + name[1]] = dflat.sum(axis=(0, 1))
        dx += dflat @ w.T
    return dx, grads


def _ff_forward(params, prefix, x):
    w1, b1 = _p64(params, prefix + "ff.w1"), _p64(params, prefix + "ff.b1")
    w2, b2 = _p64(params, prefix + "ff.w2"), _p64(params, prefix + "ff.b2")
    z = x @ w1 + b1
    a = gelu(z)
    return a @ w2 + b2, (x, z, a)


def _ff_backward(params, prefix, dy, cache):
    x, z, a = cache
    w1 = _p64(params, prefix + "ff.w1")
    w2 = _p64(params, prefix + "ff.w2")
    F = a.shape[-1]
    C = x.shape[-1]
    grads = {
        prefix + "ff.w2": a.reshape(-1, F).T @ dy.reshape(-1, C),
        prefix + "ff.b2": dy.sum(axis=(0, 1)),
    }
    da = dy @ w2.T
    dz = da * gelu_grad(z)
    grads[prefix + "ff.w1"] = x.reshape(-1, C).T @ dz.reshape(-1, F)
    grads[prefix + "ff.b1"] = dz.sum(axis=(0, 1))
    return dz @ w1.T, grads


def transformer_layers(cfg: TransformerConfig) -> int:
    return cfg.layers


def transformer_forward(params, cfg: TransformerConfig, x: np.ndarray):
    """Encoder stack over (B, M, C) token batches; returns (y, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != cfg.model_dim:
        raise DataError(
            f"dimension-mismatch: transformer expects (B, M, {cfg.model_dim}), "
            f"got {x.shape}"
        )
    if cfg.positional == "sinusoidal":
        x = x + sinusoidal_encoding(x.shape[1], cfg.model_dim)
    caches = []
    for i in range(cfg.layers):
        p = f"transformer.{i}."
        n1, ln1_cache = _layer_norm_forward(x, _p64(params, p + "ln1.g"), _p64(params, p + "ln1.b"))
        a, attn_cache = _attention_forward(params, p, cfg.heads, n1)
        x = x + a
        n2, ln2_cache = _layer_norm_forward(x, _p64(params, p + "ln2.g"), _p64(params, p + "ln2.b"))
        f, ff_cache = _ff_forward(params, p, n2)
        x = x + f
        caches.append((ln1_cache, attn_cache, ln2_cache, ff_cache))
    return x, caches


def transformer_backward(params, cfg: TransformerConfig, caches, dy: np.ndarray):
    """Backward of transformer_forward: (param grads, input grad)."""
    dy = np.asarray(dy, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    for i in range(cfg.layers - 1, -1, -1):
        p = f"transformer.{i}."
        ln1_cache, attn_cache, ln2_cache, ff_cache = caches[i]
        dff_in, ff_grads = _ff_backward(params, p, dy, ff_cache)
        dn2, dg2, db2 = _layer_norm_backward(dff_in, ln2_cache)
        grads.update(ff_grads)
        grads[p + "ln2.g"] = dg2
        grads[p + "ln2.b"] = db2
        dy = dy + dn2
        dattn_in, attn_grads = _attention_backward(params, p, cfg.heads, dy, attn_cache)
        dn1, dg1, db1 = _layer_norm_backward(dattn_in, ln1_cache)
        grads.update(attn_grads)
        grads[p + "ln1.g"] = dg1
        grads[p + "ln1.b"] = db1
        dy = dy + dn1
    return grads, dy


def temporal_transformer(params, cfg: TransformerConfig, seq: np.ndarray) -> np.ndarray:
    """Encode one (M, C) token sequence; deterministic given params."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2:
        raise DataError(f"expected a (M, C) sequence, got shape {seq.shape}")
    y, _ = transformer_forward(params, cfg, seq[None])
    return y[0]


def modulate_support_batch(params, cfg: TransformerConfig, feats: np.ndarray, texts: np.ndarray):
    """Refine (N, t, C) prototypes with their (N, C) class text vectors.

    The text token goes last so frame positions stay 0..t-1 on both paths;
    its output row is discarded.  Returns (refined (N, t, C), cache).
    """
    feats = np.asarray(feats, dtype=np.float64)
    texts = np.asarray(texts, dtype=np.float64)
    if feats.shape[0] != texts.shape[0] or feats.shape[-1] != texts.shape[-1]:
        raise DataError(
            f"dimension-mismatch: prototypes {feats.shape} vs texts {texts.shape}"
        )
    seq = np.concatenate([feats, texts[:, None, :]], axis=1)
    out, cache = transformer_forward(params, cfg, seq)
    return out[:, :-1, :], cache


def modulate_support_batch_backward(params, cfg, cache, dout: np.ndarray):
    """Backward of modulate_support_batch: (param grads, dfeats, dtexts)."""
    dout = np.asarray(dout, dtype=np.float64)
    dfull = np.concatenate([dout, np.zeros_like(dout[:, :1, :])], axis=1)
    grads, dseq = transformer_backward(params, cfg, cache, dfull)
    return grads, dseq[:, :-1, :], dseq[:, -1, :]


def modulate_support(params, cfg: TransformerConfig, f_s: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Single-prototype view of modulate_support_batch: (t, C) + (C,) -> (t, C)."""
    out, _ = modulate_support_batch(
        params, cfg, np.asarray(f_s)[None], np.asarray(w)[None]
    )
    return out[0]


def transform_query_batch(params, cfg: TransformerConfig, feats: np.ndarray):
    """Pass (Q, t, C) query features through the same weights, no text token."""
    return transformer_forward(params, cfg, np.asarray(feats, dtype=np.float64))


def transform_query(params, cfg: TransformerConfig, f_q: np.ndarray) -> np.ndarray:
    out, _ = transform_query_batch(params, cfg, np.asarray(f_q)[None])
    return out[0]


def average_support_shots(features) -> np.ndarray:
    """Elementwise mean of K same-shape feature matrices.

    Computed as x0 + mean(xi - x0) so that K identical shots return the shot
    exactly (bit-level), which the K-shot degeneracy contract requires.
    """
    mats = [np.asarray(f) for f in features]
    if not mats:
        raise DataError("shape-mismatch: need at least one feature matrix")
    if any(m.shape != mats[0].shape for m in mats):
        raise DataError("shape-mismatch: support features differ in shape")
    stack = np.stack(mats)
    x0 = stack[0]
    return x0 + (stack - x0).mean(axis=0)
