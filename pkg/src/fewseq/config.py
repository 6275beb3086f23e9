"""Run configuration: a flat ``key = value`` file with a closed key set.

Blank lines and ``#`` comments are ignored; unknown or duplicate keys are
hard errors, as are values outside their documented bounds.  ``seed`` is the
only key without a default.  :func:`format_config` produces a canonical
rendering whose SHA-256 prefix identifies the run in result files.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .data import TEMPORAL_PATTERNS, SyntheticSpec
from .errors import UsageError
from .metrics import METRIC_KINDS
from .modulation import POSITIONAL_KINDS
from .objectives import TAU_MAX, TAU_MIN


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data_path: str | None = None
    # synthetic dataset (used when data_path is unset)
    num_classes: int = 30
    samples_per_class: int = 30
    frame_dim: int = 16
    frames_min: int = 8
    frames_max: int = 16
    signal_strength: float = 1.0
    noise_sigma: float = 0.2
    temporal_pattern: str = "static"
    base_fraction: float = 64.0 / 88.0
    synthetic_seed: int = -1  # -1: derive from the master seed
    # episodes
    way: int = 5
    shot: int = 1
    queries_per_class: int = 1
    frames_per_clip: int = 8
    # encoders
    feat_dim: int = 64
    hidden_dim: int = 64
    encoder_depth: int = 1
    template: str = "a photo of [CLS]"
    text_informativeness: float = 0.0
    text_seed: int = 0
    text_normalize: bool = True
    # modulation
    transformer_layers: int = 1
    transformer_heads: int = 4
    transformer_ff: int = 128
    positional: str = "sinusoidal"
    # metric
    metric_kind: str = "otam"
    metric_smoothing: float = 0.1
    metric_bidirectional: bool = True
    # objectives
    alpha: float = 1.0
    beta: float = 0.25
    tau_init: float = 0.07
    # optimizer / training
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    train_episodes: int = 2000
    augment_sigma: float = 0.0
    log_every: int = 200
    ablate_video_text: bool = False
    ablate_modulation: bool = False
    # evaluation
    eval_episodes: int = 10000
    eval_workers: int = 1


# key in the config file -> dataclass field
KEY_TO_FIELD = {
    "seed": "seed",
    "data.path": "data_path",
    "synthetic.num_classes": "num_classes",
    "synthetic.samples_per_class": "samples_per_class",
    "synthetic.frame_dim": "frame_dim",
    "synthetic.frames_min": "frames_min",
    "synthetic.frames_max": "frames_max",
    "synthetic.signal_strength": "signal_strength",
    "synthetic.noise_sigma": "noise_sigma",
    "synthetic.temporal_pattern": "temporal_pattern",
    "synthetic.base_fraction": "base_fraction",
    "synthetic.seed": "synthetic_seed",
    "episode.way": "way",
    "episode.shot": "shot",
    "episode.queries_per_class": "queries_per_class",
    "episode.frames": "frames_per_clip",
    "encoder.dim": "feat_dim",
    "encoder.hidden": "hidden_dim",
    "encoder.depth": "encoder_depth",
    "text.template": "template",
    "text.informativeness": "text_informativeness",
    "text.seed": "text_seed",
    "text.normalize": "text_normalize",
    "transformer.layers": "transformer_layers",
    "transformer.heads": "transformer_heads",
    "transformer.ff_dim": "transformer_ff",
    "transformer.positional": "positional",
    "metric.kind": "metric_kind",
    "metric.smoothing": "metric_smoothing",
    "metric.bidirectional": "metric_bidirectional",
    "loss.alpha": "alpha",
    "ensemble.beta": "beta",
    "tau.init": "tau_init",
    "adam.lr": "lr",
    "adam.beta1": "adam_beta1",
    "adam.beta2": "adam_beta2",
    "adam.eps": "adam_eps",
    "train.episodes": "train_episodes",
    "train.augment_sigma": "augment_sigma",
    "train.log_every": "log_every",
    "ablate.video_text": "ablate_video_text",
    "ablate.modulation": "ablate_modulation",
    "eval.episodes": "eval_episodes",
    "eval.workers": "eval_workers",
}

FIELD_TO_KEY = {f: k for k, f in KEY_TO_FIELD.items()}

SYNTHETIC_KEYS = {k for k in KEY_TO_FIELD if k.startswith("synthetic.")} | {"seed"}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, field_name: str, raw: str):
    ftype = _FIELD_TYPES[field_name]
    raw = raw.strip()
    try:
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "str | None":
            return raw if raw else None
        return raw
    except ValueError as e:
        raise UsageError(f"config key {key!r}: {e}") from e


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def parse_config(text: str, allowed_keys=None, require_seed: bool = True) -> RunConfig:
    """Parse ``key = value`` lines into a validated RunConfig."""
    values: dict[str, object] = {}
    seen: set[str] = set()
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in KEY_TO_FIELD:
            raise UsageError(f"config line {ln}: unknown key {key!r}")
        if allowed_keys is not None and key not in allowed_keys:
            raise UsageError(f"config line {ln}: key {key!r} not allowed in this file")
        if key in seen:
            raise UsageError(f"config line {ln}: duplicate key {key!r}")
        seen.add(key)
        field_name = KEY_TO_FIELD[key]
        values[field_name] = _parse_value(key, field_name, raw)
    if "seed" not in values:
        if require_seed:
            raise UsageError("config is missing the mandatory 'seed' key")
        values["seed"] = 0
    config = RunConfig(**values)
    validate_config(config)
    return config


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e


def format_config(config: RunConfig) -> str:
    """Canonical rendering: every key, sorted, one per line."""
    lines = []
    for key in sorted(KEY_TO_FIELD):
        value = getattr(config, KEY_TO_FIELD[key])
        lines.append(f"{key} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(format_config(config).encode("utf-8")).hexdigest()[:16]


def _check(cond: bool, message: str):
    if not cond:
        raise UsageError(f"invalid config: {message}")


def validate_config(c: RunConfig):
    _check(c.seed >= 0, "seed must be >= 0")
    _check(c.num_classes >= 2, "synthetic.num_classes must be >= 2")
    _check(c.samples_per_class >= 1, "synthetic.samples_per_class must be >= 1")
    _check(c.frame_dim >= 1, "synthetic.frame_dim must be >= 1")
    _check(1 <= c.frames_min <= c.frames_max, "need 1 <= frames_min <= frames_max")
    _check(c.signal_strength >= 0, "synthetic.signal_strength must be >= 0")
    _check(c.noise_sigma >= 0, "synthetic.noise_sigma must be >= 0")
    _check(
        c.temporal_pattern in TEMPORAL_PATTERNS,
        f"synthetic.temporal_pattern must be one of {TEMPORAL_PATTERNS}",
    )
    _check(0.0 < c.base_fraction < 1.0, "synthetic.base_fraction must be in (0, 1)")
    _check(c.synthetic_seed >= -1, "synthetic.seed must be >= 0 (or -1 to reuse seed)")
    _check(c.way >= 2, "episode.way must be >= 2")
    _check(c.shot >= 1, "episode.shot must be >= 1")
    _check(c.queries_per_class >= 1, "episode.queries_per_class must be >= 1")
    _check(c.frames_per_clip >= 1, "episode.frames must be >= 1")
    _check(c.feat_dim >= 1, "encoder.dim must be >= 1")
    _check(c.hidden_dim >= 1, "encoder.hidden must be >= 1")
    _check(c.encoder_depth >= 0, "encoder.depth must be >= 0")
    _check(c.template.count("[CLS]") == 1, "text.template needs exactly one [CLS]")
    _check(0.0 <= c.text_informativeness <= 1.0, "text.informativeness must be in [0, 1]")
    _check(c.text_seed >= 0, "text.seed must be >= 0")
    _check(c.transformer_layers >= 1, "transformer.layers must be >= 1")
    _check(c.transformer_heads >= 1, "transformer.heads must be >= 1")
    _check(
        c.feat_dim % c.transformer_heads == 0,
        "encoder.dim must be divisible by transformer.heads",
    )
    _check(c.transformer_ff >= 1, "transformer.ff_dim must be >= 1")
    _check(c.positional in POSITIONAL_KINDS, f"transformer.positional must be one of {POSITIONAL_KINDS}")
    _check(c.metric_kind in METRIC_KINDS, f"metric.kind must be one of {METRIC_KINDS}")
    _check(c.metric_smoothing >= 0, "metric.smoothing must be >= 0")
    _check(c.alpha >= 0, "loss.alpha must be >= 0")
    _check(0.0 <= c.beta <= 1.0, "ensemble.beta must be in [0, 1]")
    _check(TAU_MIN <= c.tau_init <= TAU_MAX, f"tau.init must be in [{TAU_MIN}, {TAU_MAX}]")
    _check(c.lr > 0, "adam.lr must be > 0")
    _check(0.0 <= c.adam_beta1 < 1.0, "adam.beta1 must be in [0, 1)")
    _check(0.0 <= c.adam_beta2 < 1.0, "adam.beta2 must be in [0, 1)")
    _check(c.adam_eps > 0, "adam.eps must be > 0")
    _check(c.train_episodes >= 0, "train.episodes must be >= 0")
    _check(c.augment_sigma >= 0, "train.augment_sigma must be >= 0")
    _check(c.log_every >= 1, "train.log_every must be >= 1")
    _check(c.eval_episodes >= 1, "eval.episodes must be >= 1")
    _check(c.eval_workers >= 1, "eval.workers must be >= 1")


def synthetic_spec_from_config(config: RunConfig) -> SyntheticSpec:
    seed = config.synthetic_seed if config.synthetic_seed >= 0 else config.seed
    return SyntheticSpec(
        num_classes=config.num_classes,
        samples_per_class=config.samples_per_class,
        frame_dim=config.frame_dim,
        frames_min=config.frames_min,
        frames_max=config.frames_max,
        class_signal_strength=config.signal_strength,
        visual_noise_sigma=config.noise_sigma,
        temporal_pattern=config.temporal_pattern,
        base_fraction=config.base_fraction,
        seed=seed,
    )


def parse_synthetic_spec(text: str) -> SyntheticSpec:
    """Parse a gen-data spec file: only 'seed' and 'synthetic.*' keys allowed."""
    config = parse_config(text, allowed_keys=SYNTHETIC_KEYS)
    return synthetic_spec_from_config(config)
