"""Visual and text encoders sharing one embedding space.

The visual encoder is a per-frame MLP: row k of its output depends on frame k
only, so no temporal mixing happens here (that is the modulation module's
job).  The text encoder is a frozen deterministic table: every expanded
prompt string maps to a seeded Gaussian unit vector, optionally blended with
a projection of the class's hidden signal vector so that text can carry real
content about a class (``informativeness``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .data import ClassTable
from .errors import DataError, NumericError, UsageError

PLACEHOLDER = "[CLS]"

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gap(features: np.ndarray) -> np.ndarray:
    """Global average pooling: mean over the time axis of a (t, C) matrix."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] < 1:
        raise DataError(f"gap expects a (t>=1, C) matrix, got shape {features.shape}")
    return features.mean(axis=0)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """cos(a, b), clamped to [-1, 1] against rounding.  Zero vectors are an error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericError("zero-vector: cosine similarity undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Visual encoder: per-frame MLP with hand-written backward pass.
# ---------------------------------------------------------------------------

def init_visual_params(
    frame_dim: int,
    feat_dim: int,
    hidden_dim: int,
    depth: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> dict[str, np.ndarray]:
    """Glorot-normal weights for ``depth`` hidden layers plus the output map."""
    if depth < 0:
        raise UsageError("encoder depth must be >= 0")
    dims = [frame_dim] + [hidden_dim] * depth + [feat_dim]
    params: dict[str, np.ndarray] = {}
    for layer, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        std = np.sqrt(2.0 / (d_in + d_out))
        params[f"visual.w{layer}"] = (std * rng.standard_normal((d_in, d_out))).astype(dtype)
        params[f"visual.b{layer}"] = np.zeros(d_out, dtype=dtype)
    return params


def _visual_layer_count(params: dict[str, np.ndarray]) -> int:
    n = 0
    while f"visual.w{n}" in params:
        n += 1
    return n


def encode_frames(params: dict[str, np.ndarray], frames: np.ndarray):
    """Encode a batch of frame rows.

    ``frames`` may be (t, D) or (V, t, D); output keeps the leading shape with
    the last axis mapped to the feature dimension.  Returns (features, cache).
    """
    frames = np.asarray(frames, dtype=np.float64)
    n_layers = _visual_layer_count(params)
    d_in = params["visual.w0"].shape[0]
    if frames.shape[-1] != d_in:
        raise DataError(
            f"dimension-mismatch: encoder expects frame dim {d_in}, "
            f"got {frames.shape[-1]}"
        )
    lead = frames.shape[:-1]
    h = frames.reshape(-1, d_in)
    cache = {"lead": lead, "inputs": [], "preacts": []}
    for layer in range(n_layers):
        w = np.asarray(params[f"visual.w{layer}"], dtype=np.float64)
        b = np.asarray(params[f"visual.b{layer}"], dtype=np.float64)
        cache["inputs"].append(h)
        z = h @ w + b
        if layer < n_layers - 1:
            cache["preacts"].append(z)
            h = gelu(z)
        else:
            h = z
    return h.reshape(*lead, -1), cache


def encode_frames_backward(
    params: dict[str, np.ndarray], cache, grad_out: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of encode_frames w.r.t. parameters and input frames."""
    n_layers = _visual_layer_count(params)
    g = np.asarray(grad_out, dtype=np.float64).reshape(cache["inputs"][0].shape[0], -1)
    grads: dict[str, np.ndarray] = {}
    for layer in range(n_layers - 1, -1, -1):
        if layer < n_layers - 1:
            g = g * gelu_grad(cache["preacts"][layer])
        h_in = cache["inputs"][layer]
        w = np.asarray(params[f"visual.w{layer}"], dtype=np.float64)
        grads[f"visual.w{layer}"] = h_in.T @ g
        grads[f"visual.b{layer}"] = g.sum(axis=0)
        g = g @ w.T
    return grads, g.reshape(*cache["lead"], -1)


def encode_video(params: dict[str, np.ndarray], frames: np.ndarray) -> np.ndarray:
    """Per-frame encoding of one video: (t, D) -> (t, C)."""
    feats, _ = encode_frames(params, np.atleast_2d(np.asarray(frames)))
    return feats


# ---------------------------------------------------------------------------
# Text encoder: frozen, hash-seeded, optionally content-informed.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    """A template string with exactly one ``[CLS]`` placeholder."""

    text: str

    def __post_init__(self):
        if self.text.count(PLACEHOLDER) != 1:
            raise UsageError(
                f"prompt template must contain exactly one {PLACEHOLDER!r} "
                f"placeholder: {self.text!r}"
            )

    def expand(self, class_name: str) -> str:
        return self.text.replace(PLACEHOLDER, class_name)


def _hash_unit_vector(text: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{text}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class TextEncoder:
    """Maps class names to fixed C-dim vectors; never receives gradients.

    With ``informativeness`` gamma in (0, 1], the vector for a class that has
    a latent signal z blends ``normalize(A @ z)`` (A is a seeded Gaussian
    projection shared by all classes) with the pure hash vector:

        w = normalize(gamma * normalize(A z) + (1 - gamma) * hash_vec)

    gamma = 1 makes the text a clean linear view of the class content, which
    is the regime where text-guided prototype refinement can pay off.
    """

    def __init__(
        self,
        dim: int,
        seed: int = 0,
        informativeness: float = 0.0,
        normalize: bool = True,
        latents: dict[str, np.ndarray] | None = None,
    ):
        if not (0.0 <= informativeness <= 1.0):
            raise UsageError("text informativeness must be in [0, 1]")
        self.dim = dim
        self.seed = seed
        self.informativeness = informativeness
        self.normalize = normalize
        self.latents = dict(latents) if latents else {}
        self.frozen = True
        self._mix = None
        if self.latents:
            frame_dim = next(iter(self.latents.values())).shape[0]
            mix_rng = np.random.default_rng([seed, 0xA11])
            self._mix = mix_rng.standard_normal((dim, frame_dim))
        self._cache: dict[str, np.ndarray] = {}

    def encode(self, class_name: str, template: PromptTemplate) -> np.ndarray:
        if not class_name:
            raise DataError("empty-name: cannot encode an empty class name")
        text = template.expand(class_name)
        cached = self._cache.get(text)
        if cached is not None:
            return cached.copy()
        v = _hash_unit_vector(text, self.seed, self.dim)
        g = self.informativeness
        if g > 0.0:
            z = self.latents.get(class_name)
            if z is None:
                raise DataError(
                    f"text informativeness set but class {class_name!r} has no "
                    f"latent vector (dataset was built without them)"
                )
            proj = self._mix @ np.asarray(z, dtype=np.float64)
            proj = proj / np.linalg.norm(proj)
            v = g * proj + (1.0 - g) * v
        if self.normalize:
            v = v / np.linalg.norm(v)
        self._cache[text] = v
        return v.copy()


def encode_text(
    encoder: TextEncoder, class_name: str, template: PromptTemplate
) -> np.ndarray:
    """Deterministic class-prompt embedding (frozen; see TextEncoder)."""
    return encoder.encode(class_name, template)


def text_encoder_from_table(
    table: ClassTable,
    dim: int,
    seed: int = 0,
    informativeness: float = 0.0,
    normalize: bool = True,
) -> TextEncoder:
    latents = None
    if table.latents is not None:
        latents = {
            name: np.asarray(table.latents[cid], dtype=np.float64)
            for cid, name in enumerate(table.names)
        }
    return TextEncoder(
        dim=dim,
        seed=seed,
        informativeness=informativeness,
        normalize=normalize,
        latents=latents,
    )
