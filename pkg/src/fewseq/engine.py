"""Episodic training, N-way K-shot evaluation, and checkpoints.

Training is single-threaded and fully determined by the config seed: the
parameter init, episode draws, frame picks, and augmentation noise all come
from generators derived from it.  Evaluation derives one generator per
episode index from (seed, index), so results are identical no matter how many
worker processes share the episode range.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass

import numpy as np

from . import alignment
from .config import RunConfig, config_hash, format_config, parse_config, synthetic_spec_from_config
from .data import (
    Dataset,
    Episode,
    generate_synthetic,
    load_dataset,
    sample_episode,
    sparse_sample_frames,
)
from .encoders import encode_frames
from .errors import DataError, IOFailure, NumericError
from .model import Model, check_mode, episode_forward, training_loss
from .modulation import modulate_support_batch
from .objectives import (
    ClassDistribution,
    ensemble_probs,
    few_shot_probs,
    video_text_probs,
)

CHECKPOINT_MAGIC = "FSARCP1"
CHECKPOINT_VERSION = 1

# rng stream tags so training and evaluation never share a stream
_STREAM_INIT = 11
_STREAM_TRAIN = 22
_STREAM_EVAL = 33


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95_halfwidth: float
    episodes: int
    seed: int
    per_episode: np.ndarray | None = None


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: RunConfig
    step: int
    frame_dim: int


class Adam:
    """Standard Adam with bias correction; state kept in float64."""

    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (p.astype(np.float64) - self.lr * update).astype(p.dtype)


def build_dataset(config: RunConfig) -> Dataset:
    if config.data_path:
        return load_dataset(config.data_path)
    return generate_synthetic(synthetic_spec_from_config(config))


def episode_arrays(
    episode: Episode,
    t: int,
    mode: str,
    rng: np.random.Generator | None = None,
    augment_sigma: float = 0.0,
):
    """Frame tensors for one episode: support (N, K, t, D), queries (Q, t, D),
    query local labels (Q,)."""
    sup = np.stack(
        [
            np.stack([sparse_sample_frames(s, t, mode, rng) for s in group])
            for group in episode.support
        ]
    ).astype(np.float64)
    qry = np.stack(
        [sparse_sample_frames(q, t, mode, rng) for q, _ in episode.queries]
    ).astype(np.float64)
    labels = np.array([local for _, local in episode.queries], dtype=np.int64)
    if augment_sigma > 0.0:
        if rng is None:
            raise DataError("augmentation noise needs an rng")
        sup = sup + augment_sigma * rng.standard_normal(sup.shape)
        qry = qry + augment_sigma * rng.standard_normal(qry.shape)
    return sup, qry, labels


def _video_base_labels(model: Model, episode: Episode) -> np.ndarray:
    """Base-class index of every episode video, support groups first."""
    labels = [
        model.base_label(episode.global_class_ids[n])
        for n in range(episode.way)
        for _ in range(episode.shot)
    ]
    labels.extend(model.base_label(q.class_id) for q, _ in episode.queries)
    return np.array(labels, dtype=np.int64)


def train(config: RunConfig, dataset: Dataset | None = None) -> Checkpoint:
    """Optimize on base-split episodes; returns the final checkpoint.

    Emits one ``step= loss= ...`` telemetry line every ``train.log_every``
    steps.  Aborts with a NumericError naming the step if the loss goes
    non-finite.
    """
    if dataset is None:
        dataset = build_dataset(config)
    model = Model(config, dataset.classes, dataset.frame_dim)
    opt = Adam(model.params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, _STREAM_TRAIN])
    base_text = None if config.ablate_video_text else model.base_text

    for step in range(1, config.train_episodes + 1):
        episode = sample_episode(
            dataset, "base", config.way, config.shot, config.queries_per_class, rng
        )
        sup, qry, labels = episode_arrays(
            episode, config.frames_per_clip, "train", rng, config.augment_sigma
        )
        ep_text = model.text_features(episode.global_class_ids)
        vid_labels = None if config.ablate_video_text else _video_base_labels(model, episode)
        loss, parts, grads = training_loss(
            model.params, config, sup, qry, labels, ep_text, base_text, vid_labels
        )
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        opt.step(model.params, grads)
        model.step = step
        if step % config.log_every == 0 or step == config.train_episodes:
            print(
                f"step={step} loss={loss:.6f} "
                f"video_text={parts['video_text']:.6f} few_shot={parts['few_shot']:.6f}"
            )
    return Checkpoint(
        params=model.params, config=config, step=model.step, frame_dim=dataset.frame_dim
    )


def model_from_checkpoint(ckpt: Checkpoint, dataset: Dataset) -> Model:
    if dataset.frame_dim != ckpt.frame_dim:
        raise DataError(
            f"dimension-mismatch: checkpoint was trained on frame dim "
            f"{ckpt.frame_dim}, dataset has {dataset.frame_dim}"
        )
    return Model(
        ckpt.config, dataset.classes, ckpt.frame_dim, params=ckpt.params, step=ckpt.step
    )


def predict_episode(
    model: Model, episode: Episode, mode: str, beta: float | None = None
) -> list[ClassDistribution]:
    """Per-query class distributions under fewshot / ensemble / zeroshot."""
    check_mode(mode, model.config)
    config = model.config
    sup, qry, _ = episode_arrays(episode, config.frames_per_clip, "eval")
    class_ids = episode.global_class_ids
    ep_text = model.text_features(class_ids)

    if mode == "zeroshot":
        qry_feats, _ = encode_frames(model.params, qry)
        return [
            video_text_probs(qf, ep_text, model.tau, class_ids) for qf in qry_feats
        ]

    scores, feats, _ = episode_forward(
        model.params,
        model.tcfg,
        model.metric,
        sup,
        qry,
        ep_text,
        config.ablate_modulation,
    )
    fs = [few_shot_probs(s, class_ids) for s in scores]
    if mode == "fewshot":
        return fs
    mix = config.beta if beta is None else beta
    n_support = episode.way * episode.shot
    qry_feats = feats[n_support:]
    vt = [video_text_probs(qf, ep_text, model.tau, class_ids) for qf in qry_feats]
    return [ensemble_probs(v, f, mix) for v, f in zip(vt, fs)]


def _episode_accuracy(model, dataset, way, shot, qpc, mode, beta, seed, index) -> float:
    rng = np.random.default_rng([seed, _STREAM_EVAL, index])
    episode = sample_episode(dataset, "novel", way, shot, qpc, rng)
    dists = predict_episode(model, episode, mode, beta)
    hits = [
        int(np.argmax(d.probs)) == local for d, (_, local) in zip(dists, episode.queries)
    ]
    return float(np.mean(hits))


_WORKER_STATE: dict = {}


def _worker_init(payload):
    _WORKER_STATE.update(payload)
    alignment.warmup()


def _worker_chunk(indices):
    s = _WORKER_STATE
    return [
        (
            i,
            _episode_accuracy(
                s["model"], s["dataset"], s["way"], s["shot"], s["qpc"],
                s["mode"], s["beta"], s["seed"], i,
            ),
        )
        for i in indices
    ]


def evaluate(
    ckpt: Checkpoint | Model,
    dataset: Dataset,
    way: int,
    shot: int,
    episodes: int,
    mode: str = "fewshot",
    seed: int | None = None,
    workers: int = 1,
    queries_per_class: int | None = None,
    beta: float | None = None,
    keep_per_episode: bool = False,
) -> EvalReport:
    """Accuracy over novel-split episodes with a 95% CI halfwidth.

    Episode i is fully determined by (seed, i), so the report is identical
    for any worker count.
    """
    model = ckpt if isinstance(ckpt, Model) else model_from_checkpoint(ckpt, dataset)
    check_mode(mode, model.config)
    if seed is None:
        seed = model.config.seed
    qpc = queries_per_class or model.config.queries_per_class
    accs = np.empty(episodes, dtype=np.float64)

    if workers <= 1:
        for i in range(episodes):
            accs[i] = _episode_accuracy(
                model, dataset, way, shot, qpc, mode, beta, seed, i
            )
    else:
        alignment.warmup()  # compile before forking so children inherit it
        payload = {
            "model": model, "dataset": dataset, "way": way, "shot": shot,
            "qpc": qpc, "mode": mode, "beta": beta, "seed": seed,
        }
        chunks = [list(range(w, episodes, workers)) for w in range(workers)]
        with multiprocessing.Pool(
            processes=workers, initializer=_worker_init, initargs=(payload,)
        ) as pool:
            for part in pool.map(_worker_chunk, chunks):
                for i, acc in part:
                    accs[i] = acc

    mean = float(accs.mean())
    sd = float(accs.std(ddof=1)) if episodes > 1 else 0.0
    halfwidth = 1.96 * sd / np.sqrt(episodes)
    return EvalReport(
        mean_accuracy=mean,
        ci95_halfwidth=float(halfwidth),
        episodes=episodes,
        seed=seed,
        per_episode=accs if keep_per_episode else None,
    )


# ---------------------------------------------------------------------------
# Checkpoint container: text header + raw little-endian float32 tensors.
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path: str):
    lines = [
        CHECKPOINT_MAGIC,
        f"version {CHECKPOINT_VERSION}",
        f"step {ckpt.step}",
        f"frame_dim {ckpt.frame_dim}",
        "config_begin",
        format_config(ckpt.config).rstrip("\n"),
        "config_end",
    ]
    names = sorted(ckpt.params)
    for name in names:
        arr = ckpt.params[name]
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "-"
        lines.append(f"tensor {name} {shape}")
    lines.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("utf-8"))
            for name in names:
                fh.write(np.ascontiguousarray(ckpt.params[name], dtype="<f4").tobytes())
    except OSError as e:
        raise IOFailure(f"io-failure: cannot write checkpoint to {path}: {e}") from e


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise IOFailure(f"io-failure: cannot read checkpoint from {path}: {e}") from e
    marker = b"end_header\n"
    pos = blob.find(marker)
    if pos < 0:
        raise DataError(f"schema-mismatch: {path}: missing end_header")
    try:
        header = blob[:pos].decode("utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise DataError(f"schema-mismatch: {path}: header is not UTF-8") from e
    body = blob[pos + len(marker):]

    if not header or header[0] != CHECKPOINT_MAGIC:
        raise DataError(f"schema-mismatch: {path}: bad magic (expected {CHECKPOINT_MAGIC})")
    idx = 1
    meta = {}
    while idx < len(header) and header[idx] != "config_begin":
        key, _, val = header[idx].partition(" ")
        meta[key] = val
        idx += 1
    if meta.get("version") != str(CHECKPOINT_VERSION):
        raise DataError(
            f"schema-mismatch: {path}: version {meta.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    if idx >= len(header):
        raise DataError(f"schema-mismatch: {path}: missing config block")
    idx += 1
    config_lines = []
    while idx < len(header) and header[idx] != "config_end":
        config_lines.append(header[idx])
        idx += 1
    if idx >= len(header):
        raise DataError(f"schema-mismatch: {path}: unterminated config block")
    idx += 1
    config = parse_config("\n".join(config_lines))

    manifest = []
    for line in header[idx:]:
        parts = line.split()
        if len(parts) != 3 or parts[0] != "tensor":
            raise DataError(f"schema-mismatch: {path}: bad manifest line {line!r}")
        name, shape_text = parts[1], parts[2]
        shape = () if shape_text == "-" else tuple(int(d) for d in shape_text.split("x"))
        manifest.append((name, shape))

    params = {}
    off = 0
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if off + nbytes > len(body):
            raise DataError(f"schema-mismatch: {path}: truncated tensor {name!r}")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).copy()
        params[name] = arr.reshape(shape) if shape else arr.reshape(())
        off += nbytes
    if off != len(body):
        raise DataError(f"schema-mismatch: {path}: {len(body) - off} trailing bytes")
    return Checkpoint(
        params=params,
        config=config,
        step=int(meta.get("step", "0")),
        frame_dim=int(meta.get("frame_dim", "0")),
    )


def export_features(model: Model, dataset: Dataset, path: str, split: str = "novel"):
    """Write raw and text-modulated per-frame features for visualization.

    The npz file holds ``video_ids``, ``class_ids``, ``class_names``,
    ``raw`` (V, t, C) encoder outputs, and ``modulated`` (V, t, C) outputs of
    the support path run with each video's own class text token.
    """
    if split == "all":
        wanted = None
    else:
        wanted = set(dataset.classes.split_ids(split))
    samples = [s for s in dataset.samples if wanted is None or s.class_id in wanted]
    if not samples:
        raise DataError(f"no videos in split {split!r}")
    t = model.config.frames_per_clip
    frames = np.stack(
        [sparse_sample_frames(s, t, "eval") for s in samples]
    ).astype(np.float64)
    raw, _ = encode_frames(model.params, frames)
    texts = model.text_features([s.class_id for s in samples])
    modulated, _ = modulate_support_batch(model.params, model.tcfg, raw, texts)
    try:
        np.savez(
            path,
            video_ids=np.array([s.video_id for s in samples]),
            class_ids=np.array([s.class_id for s in samples]),
            class_names=np.array([dataset.classes.names[s.class_id] for s in samples]),
            raw=raw,
            modulated=modulated,
        )
    except OSError as e:
        raise IOFailure(f"io-failure: cannot write features to {path}: {e}") from e


def result_record(config: RunConfig, report: EvalReport, extra: dict | None = None) -> str:
    """Machine-readable key=value block for one evaluation run."""
    rows = {
        "record": "eval",
        "config_hash": config_hash(config),
        "seed": report.seed,
        "episodes": report.episodes,
        "mean_accuracy": f"{report.mean_accuracy:.6f}",
        "ci95_halfwidth": f"{report.ci95_halfwidth:.6f}",
    }
    if extra:
        rows.update(extra)
    return "\n".join(f"{k} = {v}" for k, v in rows.items()) + "\n"
