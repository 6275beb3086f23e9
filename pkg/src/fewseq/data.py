"""Datasets of labeled frame sequences, episodic sampling, and file I/O.

A dataset is an immutable collection of :class:`VideoSample` plus a
:class:`ClassTable` that names every class and assigns it to the base
(training) or novel (testing) split.  Episodes are N-way K-shot tasks drawn
from one split.  The synthetic generator produces fully seeded datasets whose
classes are separable by construction, which makes every downstream component
testable without real video data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, IOFailure

DATASET_MAGIC = "FSARDS1"

TEMPORAL_PATTERNS = ("static", "drifting", "permuted-motif")

# Record ids/lengths are stored as float32 in the dataset body; beyond this
# bound float32 can no longer represent every integer exactly.
_MAX_EXACT_F32_INT = 2**24


@dataclass(frozen=True)
class VideoSample:
    """One labeled sequence of frame vectors, shape (L, frame_dim) float32."""

    video_id: int
    frames: np.ndarray
    class_id: int

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(
                f"video {self.video_id}: frames must be a (L>=1, D) array, "
                f"got shape {self.frames.shape}"
            )
        if not np.isfinite(self.frames).all():
            raise DataError(f"video {self.video_id}: non-finite frame values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class ClassTable:
    """Ordered class names plus the disjoint base/novel split.

    ``latents`` optionally carries one float32 vector per class: the hidden
    class signal used by the synthetic generator.  Text encoders may consume
    it to build content-informed class embeddings.
    """

    names: tuple[str, ...]
    base_ids: frozenset[int]
    novel_ids: frozenset[int]
    latents: np.ndarray | None = None

    def __post_init__(self):
        ids = set(range(len(self.names)))
        if self.base_ids & self.novel_ids:
            raise DataError("base and novel class sets overlap")
        if (self.base_ids | self.novel_ids) != ids:
            raise DataError("every class must be in exactly one split")
        if self.latents is not None and self.latents.shape[0] != len(self.names):
            raise DataError("latent table size does not match class count")

    def split_ids(self, split: str) -> list[int]:
        if split == "base":
            return sorted(self.base_ids)
        if split == "novel":
            return sorted(self.novel_ids)
        raise DataError(f"unknown split {split!r} (expected 'base' or 'novel')")


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of samples with their class table."""

    samples: tuple[VideoSample, ...]
    classes: ClassTable

    def __post_init__(self):
        n = len(self.classes.names)
        for s in self.samples:
            if not (0 <= s.class_id < n):
                raise DataError(f"video {s.video_id}: class id {s.class_id} out of range")

    @property
    def frame_dim(self) -> int:
        return self.samples[0].frames.shape[1]

    def by_class(self) -> dict[int, list[VideoSample]]:
        out: dict[int, list[VideoSample]] = {c: [] for c in range(len(self.classes.names))}
        for s in self.samples:
            out[s.class_id].append(s)
        return out


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.

    Group order defines the local labels 0..N-1.  Queries carry their local
    label; ``global_class_ids[i]`` is the dataset-level id of local class i.
    """

    way: int
    shot: int
    support: tuple[tuple[VideoSample, ...], ...]
    queries: tuple[tuple[VideoSample, int], ...]
    global_class_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.support) != self.way:
            raise DataError("episode must have exactly `way` support groups")
        if len(set(self.global_class_ids)) != self.way:
            raise DataError("episode classes must be distinct")
        for local, group in enumerate(self.support):
            if len(group) != self.shot:
                raise DataError("every support group must have exactly `shot` samples")
            for s in group:
                if s.class_id != self.global_class_ids[local]:
                    raise DataError("support group mixes classes")
        for q, local in self.queries:
            if q.class_id != self.global_class_ids[local]:
                raise DataError("query label does not match its class")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a seeded synthetic dataset."""

    num_classes: int = 30
    samples_per_class: int = 30
    frame_dim: int = 16
    frames_min: int = 8
    frames_max: int = 16
    class_signal_strength: float = 1.0
    visual_noise_sigma: float = 0.2
    temporal_pattern: str = "static"
    base_fraction: float = 64.0 / 88.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise DataError("invalid-spec: num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise DataError("invalid-spec: samples_per_class must be >= 1")
        if self.frame_dim < 1:
            raise DataError("invalid-spec: frame_dim must be >= 1")
        if self.frames_min < 1 or self.frames_max < self.frames_min:
            raise DataError("invalid-spec: need 1 <= frames_min <= frames_max")
        if self.class_signal_strength < 0:
            raise DataError("invalid-spec: class_signal_strength must be >= 0")
        if self.visual_noise_sigma < 0:
            raise DataError("invalid-spec: visual_noise_sigma must be >= 0")
        if self.temporal_pattern not in TEMPORAL_PATTERNS:
            raise DataError(
                f"invalid-spec: temporal_pattern {self.temporal_pattern!r} "
                f"not in {TEMPORAL_PATTERNS}"
            )
        if not (0.0 < self.base_fraction < 1.0):
            raise DataError("invalid-spec: base_fraction must be in (0, 1)")


def segment_centers(num_frames: int, t: int) -> np.ndarray:
    """Center frame index of each of t equal segments on a length-L timeline.

    Index k maps to floor((k + 0.5) * L / t).  When L < t the same frame can
    be the center of several segments, so indices repeat rather than padding
    the sequence with artificial frames.
    """
    if t < 1:
        raise DataError("segment count t must be >= 1")
    k = np.arange(t, dtype=np.float64)
    return np.floor((k + 0.5) * num_frames / t).astype(np.int64)


def sparse_sample_frames(
    sample: VideoSample, t: int, mode: str, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Pick t frames, one per equal segment, preserving time order.

    ``eval`` mode takes each segment's center and is a pure function of
    (L, t).  ``train`` mode picks one frame uniformly at random inside each
    segment.  Returns an array of shape (t, frame_dim).
    """
    L = sample.num_frames
    if mode == "eval":
        idx = segment_centers(L, t)
    elif mode == "train":
        if rng is None:
            raise DataError("train-mode frame sampling needs an rng")
        if t < 1:
            raise DataError("segment count t must be >= 1")
        ks = np.arange(t, dtype=np.float64)
        lo = np.floor(ks * L / t).astype(np.int64)
        hi = np.ceil((ks + 1) * L / t).astype(np.int64) - 1
        hi = np.minimum(np.maximum(hi, lo), L - 1)
        idx = rng.integers(lo, hi + 1)
    else:
        raise DataError(f"unknown sampling mode {mode!r}")
    return sample.frames[idx]


def sample_episode(
    dataset: Dataset,
    split: str,
    way: int,
    shot: int,
    queries_per_class: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw one N-way K-shot episode from the given split.

    Support and query samples of a class never overlap.  All selection is
    driven by ``rng``, so a fixed generator state reproduces the episode.
    """
    class_ids = dataset.classes.split_ids(split)
    if len(class_ids) < way:
        raise DataError(
            f"insufficient-classes: split {split!r} has {len(class_ids)} classes, "
            f"need {way}"
        )
    per_class = dataset.by_class()
    chosen = rng.choice(np.asarray(class_ids), size=way, replace=False)

    need = shot + queries_per_class
    support = []
    queries = []
    for local, cid in enumerate(int(c) for c in chosen):
        pool = per_class[cid]
        if len(pool) < need:
            raise DataError(
                f"insufficient-samples-in-class: split {split!r} class "
                f"{dataset.classes.names[cid]!r} has {len(pool)} samples, need {need}"
            )
        picks = rng.choice(len(pool), size=need, replace=False)
        support.append(tuple(pool[int(i)] for i in picks[:shot]))
        queries.extend((pool[int(i)], local) for i in picks[shot:])
    return Episode(
        way=way,
        shot=shot,
        support=tuple(support),
        queries=tuple(queries),
        global_class_ids=tuple(int(c) for c in chosen),
    )


def _pattern_frames(latent: np.ndarray, companion: np.ndarray, L: int, pattern: str) -> np.ndarray:
    """Noise-free frame means for one sample: (L, D)."""
    D = latent.shape[0]
    if pattern == "static":
        return np.broadcast_to(latent, (L, D)).copy()
    u = np.arange(L, dtype=np.float64) / max(L - 1, 1)
    if pattern == "drifting":
        theta = 0.5 * np.pi * u
        return np.cos(theta)[:, None] * latent + np.sin(theta)[:, None] * companion
    # permuted-motif: the class vector reappears under a schedule of cyclic
    # block rotations, giving every video the same ordered motif structure.
    num_motifs = 4
    seg = np.minimum((u * num_motifs).astype(np.int64), num_motifs - 1)
    shift = max(D // num_motifs, 1)
    return np.stack([np.roll(latent, int(s) * shift) for s in seg])


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Build a seed-deterministic dataset from the spec.

    Every class gets a latent vector; each sample is
    ``strength * pattern(latent, frame_index) + N(0, sigma^2)`` per frame.
    Class names are ``class_000``-style strings, and the first
    ``round(base_fraction * num_classes)`` classes (clamped so both splits are
    non-empty) form the base split.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    latents = rng.standard_normal((spec.num_classes, spec.frame_dim))
    companions = rng.standard_normal((spec.num_classes, spec.frame_dim))

    n_base = int(round(spec.base_fraction * spec.num_classes))
    n_base = min(max(n_base, 1), spec.num_classes - 1)

    names = tuple(f"class_{c:03d}" for c in range(spec.num_classes))
    table = ClassTable(
        names=names,
        base_ids=frozenset(range(n_base)),
        novel_ids=frozenset(range(n_base, spec.num_classes)),
        latents=latents.astype(np.float32),
    )

    samples = []
    vid = 0
    for c in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            L = int(rng.integers(spec.frames_min, spec.frames_max + 1))
            mean = spec.class_signal_strength * _pattern_frames(
                latents[c], companions[c], L, spec.temporal_pattern
            )
            noise = spec.visual_noise_sigma * rng.standard_normal((L, spec.frame_dim))
            frames = (mean + noise).astype(np.float32)
            samples.append(VideoSample(video_id=vid, frames=frames, class_id=c))
            vid += 1
    return Dataset(samples=tuple(samples), classes=table)


def _f32_hex(vec: np.ndarray) -> str:
    return np.asarray(vec, dtype="<f4").tobytes().hex()


def _f32_unhex(text: str, dim: int, where: str) -> np.ndarray:
    try:
        raw = bytes.fromhex(text)
    except ValueError as e:
        raise DataError(f"malformed-file: {where}: bad hex payload") from e
    if len(raw) != 4 * dim:
        raise DataError(f"malformed-file: {where}: expected {dim} float32 values")
    return np.frombuffer(raw, dtype="<f4").copy()


def save_dataset(dataset: Dataset, path: str):
    """Write the container format: text header + float32 records.

    Header lines: magic, ``frame_dim``, one ``class`` line per class
    (id, name, split), optional ``latent`` lines (hex float32), ``videos``
    count, then ``end_header``.  The body is little-endian float32 throughout;
    each record is (video_id, class_id, L) followed by L*frame_dim values.
    """
    table = dataset.classes
    for s in dataset.samples:
        if not (0 <= s.video_id < _MAX_EXACT_F32_INT and s.num_frames < _MAX_EXACT_F32_INT):
            raise DataError(f"video {s.video_id}: id/length too large for float32 records")
    lines = [DATASET_MAGIC, f"frame_dim {dataset.frame_dim}", f"classes {len(table.names)}"]
    for cid, name in enumerate(table.names):
        if any(ch.isspace() and ch != " " for ch in name) or not name:
            raise DataError(f"class {cid}: name {name!r} not storable")
        split = "base" if cid in table.base_ids else "novel"
        lines.append(f"class {cid} {name} {split}")
    if table.latents is not None:
        for cid in range(len(table.names)):
            lines.append(f"latent {cid} {_f32_hex(table.latents[cid])}")
    lines.append(f"videos {len(dataset.samples)}")
    lines.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("utf-8"))
            for s in dataset.samples:
                head = np.array([s.video_id, s.class_id, s.num_frames], dtype="<f4")
                fh.write(head.tobytes())
                fh.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
    except OSError as e:
        raise IOFailure(f"io-failure: cannot write dataset to {path}: {e}") from e


def load_dataset(path: str) -> Dataset:
    """Read a dataset container written by :func:`save_dataset`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise IOFailure(f"io-failure: cannot read dataset from {path}: {e}") from e

    marker = b"end_header\n"
    pos = blob.find(marker)
    if pos < 0:
        raise DataError(f"malformed-file: {path}: missing end_header")
    try:
        header = blob[:pos].decode("utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise DataError(f"malformed-file: {path}: header is not UTF-8") from e
    body = blob[pos + len(marker):]

    if not header or header[0] != DATASET_MAGIC:
        raise DataError(f"malformed-file: {path}: bad magic (expected {DATASET_MAGIC})")

    frame_dim = None
    num_classes = None
    num_videos = None
    class_rows: dict[int, tuple[str, str]] = {}
    latent_rows: dict[int, np.ndarray] = {}
    for ln, line in enumerate(header[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        kind = parts[0]
        where = f"{path}:{ln}"
        if kind == "frame_dim" and len(parts) == 2:
            frame_dim = int(parts[1])
        elif kind == "classes" and len(parts) == 2:
            num_classes = int(parts[1])
        elif kind == "videos" and len(parts) == 2:
            num_videos = int(parts[1])
        elif kind == "class" and len(parts) >= 4:
            cid = int(parts[1])
            split = parts[-1]
            name = " ".join(parts[2:-1])
            if split not in ("base", "novel"):
                raise DataError(f"malformed-file: {where}: bad split {split!r}")
            class_rows[cid] = (name, split)
        elif kind == "latent" and len(parts) == 3:
            if frame_dim is None:
                raise DataError(f"malformed-file: {where}: latent before frame_dim")
            latent_rows[int(parts[1])] = _f32_unhex(parts[2], frame_dim, where)
        else:
            raise DataError(f"malformed-file: {where}: unrecognized header line {line!r}")
    if frame_dim is None or num_classes is None or num_videos is None:
        raise DataError(f"malformed-file: {path}: incomplete header")
    if sorted(class_rows) != list(range(num_classes)):
        raise DataError(f"malformed-file: {path}: class ids must cover 0..{num_classes - 1}")

    latents = None
    if latent_rows:
        if sorted(latent_rows) != list(range(num_classes)):
            raise DataError(f"malformed-file: {path}: latent rows must cover every class")
        latents = np.stack([latent_rows[c] for c in range(num_classes)])

    table = ClassTable(
        names=tuple(class_rows[c][0] for c in range(num_classes)),
        base_ids=frozenset(c for c in range(num_classes) if class_rows[c][1] == "base"),
        novel_ids=frozenset(c for c in range(num_classes) if class_rows[c][1] == "novel"),
        latents=latents,
    )

    samples = []
    off = 0
    for rec in range(num_videos):
        if off + 12 > len(body):
            raise DataError(
                f"malformed-file: {path}: truncated at record {rec} (byte offset {off})"
            )
        vid_f, cid_f, L_f = struct.unpack_from("<3f", body, off)
        off += 12
        L = int(L_f)
        if L < 1 or L != L_f or cid_f != int(cid_f) or vid_f != int(vid_f):
            raise DataError(f"malformed-file: {path}: bad record head at record {rec}")
        nbytes = 4 * L * frame_dim
        if off + nbytes > len(body):
            raise DataError(
                f"malformed-file: {path}: truncated at record {rec} (byte offset {off})"
            )
        frames = np.frombuffer(body, dtype="<f4", count=L * frame_dim, offset=off)
        off += nbytes
        samples.append(
            VideoSample(
                video_id=int(vid_f),
                frames=frames.reshape(L, frame_dim).copy(),
                class_id=int(cid_f),
            )
        )
    if off != len(body):
        raise DataError(f"malformed-file: {path}: {len(body) - off} trailing bytes")
    return Dataset(samples=tuple(samples), classes=table)
