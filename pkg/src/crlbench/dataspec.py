"""Datasets, synthetic corpus generation, task splits, SLEP subsets, replay.

The synthetic corpus stands in for real audio features: each class carries a
band-limited spectral template (center band + harmonic stack with
class-specific spacing) amplitude-modulated in time at a class-specific rate,
plus i.i.d. Gaussian noise. Templates are linearly separable from good
time-pooled features yet require invariance to crops and masks, so
self-supervised training has something to learn.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, IngestionError, UsageError

FEATURE_MAGIC = b"CRLF1"


@dataclass(frozen=True)
class SpectrogramClip:
    """One fixed-size log-magnitude feature matrix with label and split tag."""

    clip_id: str
    features: np.ndarray  # (freq_bins, time_frames) float32
    label: int
    split: str  # "train" | "test"

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ConfigurationError(f"clip {self.clip_id}: bad split {self.split!r}")
        if self.features.ndim != 2:
            raise ConfigurationError(f"clip {self.clip_id}: features must be 2-D")
        if not np.all(np.isfinite(self.features)):
            raise ConfigurationError(f"clip {self.clip_id}: non-finite features")


@dataclass
class Dataset:
    """A named pool of clips with a declared class count."""

    clips: list[SpectrogramClip]
    num_classes: int
    name: str
    fold_of: dict[str, int] | None = None

    def __post_init__(self) -> None:
        ids = [c.clip_id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"dataset {self.name}: duplicate clip ids")
        for clip in self.clips:
            if not 0 <= clip.label < self.num_classes:
                raise ConfigurationError(
                    f"dataset {self.name}: clip {clip.clip_id} has label "
                    f"{clip.label} outside [0, {self.num_classes})"
                )
        for split in ("train", "test"):
            present = {c.label for c in self.clips if c.split == split}
            missing = sorted(set(range(self.num_classes)) - present)
            if missing:
                raise ConfigurationError(
                    f"dataset {self.name}: classes {missing} absent from {split} split"
                )

    def split_clips(self, split: str) -> list[SpectrogramClip]:
        return [c for c in self.clips if c.split == split]

    @property
    def feature_shape(self) -> tuple[int, int]:
        return self.clips[0].features.shape


@dataclass(frozen=True)
class TaskSequence:
    """Ordered class-disjoint partition of the label set into tasks."""

    num_tasks: int
    class_order: tuple[int, ...]
    tasks: tuple[tuple[int, ...], ...]
    seed: int

    def classes_up_to(self, t: int) -> list[int]:
        """All class ids introduced by tasks 1..t, sorted."""
        seen: set[int] = set()
        for task in self.tasks[:t]:
            seen.update(task)
        return sorted(seen)


@dataclass(frozen=True)
class TaskDataset:
    """Train/test clips restricted to one task's class set."""

    task_index: int  # 1-based
    train: list[SpectrogramClip]
    test: list[SpectrogramClip]


@dataclass(frozen=True)
class ReplayBuffer:
    """Stored past training clips: nothing ("none") or everything ("full")."""

    mode: str = "none"
    stored: tuple[SpectrogramClip, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.mode not in ("none", "full"):
            raise ConfigurationError(f"replay mode must be none|full, got {self.mode!r}")
        if self.mode == "none" and self.stored:
            raise ConfigurationError("replay mode 'none' must keep an empty buffer")


def _class_template(c: int, num_classes: int, freq_bins: int) -> np.ndarray:
    """Frequency profile of class c: center band plus a harmonic stack.

    Returns a (freq_bins,) float64 profile in [0, ~1.6].
    """
    rows = np.arange(freq_bins, dtype=np.float64)
    # Center band: classes tile the frequency axis.
    center = (c + 0.5) * freq_bins / num_classes
    band_width = max(freq_bins / 30.0, 1.0)
    profile = 1.0 * np.exp(-0.5 * ((rows - center) / band_width) ** 2)
    # Harmonic stack: fundamental and spacing are class-specific.
    fundamental = 2.0 + (3 * c) % max(freq_bins // 4, 4)
    spacing = 3.0 + (c % 5)
    k = 1
    while fundamental + k * spacing < freq_bins - 1:
        pos = fundamental + k * spacing
        profile += (0.6 / math.sqrt(k)) * np.exp(-0.5 * ((rows - pos) / 0.8) ** 2)
        k += 1
        if k > 12:
            break
    return profile


def _am_envelope(c: int, time_frames: int, phase: float) -> np.ndarray:
    """Temporal amplitude modulation at a class-specific rate."""
    frames = np.arange(time_frames, dtype=np.float64)
    rate = 1.5 + 0.75 * c  # cycles over the full clip
    return 1.0 + 0.5 * np.sin(2.0 * math.pi * rate * frames / time_frames + phase)


def generate_synthetic(
    num_classes: int,
    clips_per_class_train: int,
    clips_per_class_test: int,
    freq_bins: int,
    time_frames: int,
    noise_sigma: float,
    seed: int,
    name: str | None = None,
) -> Dataset:
    """Generate a deterministic synthetic corpus.

    Identical arguments yield a bit-identical dataset. Per-clip variation
    comes from the AM phase and a small gain jitter; the class template and
    AM rate are fixed per class.
    """
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    if freq_bins < 16:
        raise ConfigurationError(f"freq_bins must be >= 16, got {freq_bins}")
    if time_frames < 32:
        raise ConfigurationError(f"time_frames must be >= 32, got {time_frames}")
    if noise_sigma < 0:
        raise ConfigurationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if clips_per_class_train < 1 or clips_per_class_test < 1:
        raise ConfigurationError("need at least one train and one test clip per class")

    if name is None:
        name = f"synth-c{num_classes}-f{freq_bins}n{time_frames}-seed{seed}"
    rng = np.random.default_rng(seed)
    clips: list[SpectrogramClip] = []
    for c in range(num_classes):
        profile = _class_template(c, num_classes, freq_bins)
        for split, count in (("train", clips_per_class_train), ("test", clips_per_class_test)):
            for i in range(count):
                phase = rng.uniform(0.0, 2.0 * math.pi)
                gain = rng.uniform(0.75, 1.25)
                envelope = _am_envelope(c, time_frames, phase)
                spec = gain * np.outer(profile, envelope)
                if noise_sigma > 0:
                    spec = spec + noise_sigma * rng.standard_normal(spec.shape)
                else:
                    # Keep the noise draw out of the stream entirely so the
                    # sigma=0 corpus is a pure function of (seed, args).
                    pass
                clips.append(
                    SpectrogramClip(
                        clip_id=f"{name}/{split}/c{c:02d}-{i:04d}",
                        features=spec.astype(np.float32),
                        label=c,
                        split=split,
                    )
                )
    return Dataset(clips=clips, num_classes=num_classes, name=name)


def split_tasks(dataset: Dataset, num_tasks: int, seed: int) -> TaskSequence:
    """Shuffle classes and split them contiguously into class-disjoint tasks.

    When the class count does not divide evenly, the first (C mod T) tasks
    receive one extra class.
    """
    C = dataset.num_classes
    if num_tasks < 1:
        raise ConfigurationError(f"num_tasks must be >= 1, got {num_tasks}")
    if num_tasks > C:
        raise ConfigurationError(f"num_tasks {num_tasks} exceeds class count {C}")
    rng = np.random.default_rng(seed)
    order = [int(x) for x in rng.permutation(C)]
    base, extra = divmod(C, num_tasks)
    tasks: list[tuple[int, ...]] = []
    pos = 0
    for t in range(num_tasks):
        size = base + (1 if t < extra else 0)
        tasks.append(tuple(order[pos : pos + size]))
        pos += size
    return TaskSequence(
        num_tasks=num_tasks, class_order=tuple(order), tasks=tuple(tasks), seed=seed
    )


def materialize_task(dataset: Dataset, seq: TaskSequence, t: int) -> TaskDataset:
    """Filter the dataset down to task t's class set (t is 1-based)."""
    if not 1 <= t <= seq.num_tasks:
        raise UsageError(f"task index {t} outside [1, {seq.num_tasks}]")
    classes = set(seq.tasks[t - 1])
    train = [c for c in dataset.clips if c.split == "train" and c.label in classes]
    test = [c for c in dataset.clips if c.split == "test" and c.label in classes]
    return TaskDataset(task_index=t, train=train, test=test)


def slep_subset(
    task_train: Sequence[SpectrogramClip], per_task_budget: int, seed: int
) -> list[SpectrogramClip]:
    """Class-stratified sample of min(budget, |train|) clips without replacement.

    Clips are drawn round-robin over shuffled per-class pools, so per-class
    counts differ by at most one while every class has clips left. With a
    budget at or above the task size this is the identity.
    """
    if per_task_budget < 1:
        raise ConfigurationError(f"per_task_budget must be >= 1, got {per_task_budget}")
    if not task_train:
        raise UsageError("slep_subset requires a non-empty train list")
    for clip in task_train:
        if clip.split != "train":
            raise UsageError(f"slep_subset received non-train clip {clip.clip_id}")
    if per_task_budget >= len(task_train):
        return list(task_train)

    rng = np.random.default_rng(seed)
    by_class: dict[int, list[SpectrogramClip]] = {}
    for clip in task_train:
        by_class.setdefault(clip.label, []).append(clip)
    pools = []
    for label in sorted(by_class):
        pool = by_class[label]
        order = rng.permutation(len(pool))
        pools.append([pool[i] for i in order])

    chosen: list[SpectrogramClip] = []
    round_idx = 0
    while len(chosen) < per_task_budget:
        took_any = False
        for pool in pools:
            if round_idx < len(pool):
                chosen.append(pool[round_idx])
                took_any = True
                if len(chosen) == per_task_budget:
                    break
        if not took_any:
            break
        round_idx += 1
    return chosen


def replay_extend(
    buffer: ReplayBuffer, task_train: Sequence[SpectrogramClip]
) -> ReplayBuffer:
    """Fold one task's training clips into the buffer (no-op in "none" mode)."""
    if buffer.mode == "none":
        return buffer
    return replace(buffer, stored=buffer.stored + tuple(task_train))


def write_feature_file(path: Path, features: np.ndarray) -> None:
    """Binary feature format: magic, uint32 F, uint32 N, float32 row-major."""
    arr = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_feature_file(path: Path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(FEATURE_MAGIC))
            if magic != FEATURE_MAGIC:
                raise IngestionError(f"{path}: bad magic {magic!r}")
            header = fh.read(8)
            if len(header) != 8:
                raise IngestionError(f"{path}: truncated header")
            f_bins, n_frames = struct.unpack("<II", header)
            payload = fh.read(4 * f_bins * n_frames)
            if len(payload) != 4 * f_bins * n_frames:
                raise IngestionError(f"{path}: truncated payload")
            return np.frombuffer(payload, dtype="<f4").reshape(f_bins, n_frames).copy()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc


def save_dataset(dataset: Dataset, out_dir: Path) -> Path:
    """Write manifest.csv plus one feature file per clip; returns manifest path."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    fold_of = dataset.fold_of or {}
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "path", "label", "split", "fold"])
        for i, clip in enumerate(dataset.clips):
            rel = f"features/{i:06d}.bin"
            write_feature_file(out_dir / rel, clip.features)
            fold = fold_of.get(clip.clip_id, "")
            writer.writerow([clip.clip_id, rel, clip.label, clip.split, fold])
    return manifest


def load_dataset(manifest_path: Path, name: str | None = None) -> Dataset:
    """Load a dataset from a manifest CSV; enforces shape consistency."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    clips: list[SpectrogramClip] = []
    fold_of: dict[str, int] = {}
    expected_shape: tuple[int, int] | None = None
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"clip_id", "path", "label", "split", "fold"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise IngestionError(
                f"{manifest_path}: header must contain {sorted(required)}"
            )
        for row_num, row in enumerate(reader, start=2):
            clip_id = row["clip_id"]
            where = f"{manifest_path} row {row_num} ({clip_id})"
            try:
                label = int(row["label"])
            except ValueError as exc:
                raise IngestionError(f"{where}: label {row['label']!r} is not an integer") from exc
            if label < 0:
                raise IngestionError(f"{where}: negative label {label}")
            if row["split"] not in ("train", "test"):
                raise IngestionError(f"{where}: unknown split {row['split']!r}")
            feat_path = base / row["path"]
            if not feat_path.is_file():
                raise IngestionError(f"{where}: feature file missing: {feat_path}")
            features = read_feature_file(feat_path)
            if expected_shape is None:
                expected_shape = features.shape
            elif features.shape != expected_shape:
                raise IngestionError(
                    f"{where}: feature shape {features.shape} != expected {expected_shape}"
                )
            if row["fold"]:
                fold_of[clip_id] = int(row["fold"])
            clips.append(
                SpectrogramClip(clip_id=clip_id, features=features, label=label, split=row["split"])
            )
    if not clips:
        raise IngestionError(f"{manifest_path}: no clips")
    num_classes = max(c.label for c in clips) + 1
    try:
        return Dataset(
            clips=clips,
            num_classes=num_classes,
            name=name or manifest_path.parent.name,
            fold_of=fold_of or None,
        )
    except ConfigurationError as exc:
        raise IngestionError(f"{manifest_path}: {exc}") from exc


def effective_train_clips(
    task: TaskDataset, buffer: ReplayBuffer
) -> list[SpectrogramClip]:
    """The multiset of clips a task trains on: current task plus replay."""
    return list(task.train) + list(buffer.stored)
