"""Probe-based evaluation protocols and continual-learning metrics.

A linear head is fit on frozen-encoder features of a deterministic center
segment (no masking), so evaluation is reproducible and never mutates the
encoder. LEP uses all labeled data seen so far, SLEP a fixed per-task
subset, FLEP a full separate downstream dataset.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch

from . import dataspec
from .dataspec import Dataset, SpectrogramClip, TaskSequence
from .errors import ConfigurationError, EvaluationError, UsageError
from .nncore import ClassifierHead, Encoder, make_optimizer, train_step
from .objectives import cross_entropy
from .seeding import derive_seed

if TYPE_CHECKING:  # break the continual <-> evaluation import cycle
    from .continual import RunState


@dataclass
class AccuracyMatrix:
    """Lower-triangular probe accuracies A[t][j], 1-based indices, j <= t."""

    num_tasks: int
    rows: list[list[float] | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.rows:
            self.rows = [None] * self.num_tasks

    def set_row(self, t: int, values: Sequence[float]) -> None:
        if not 1 <= t <= self.num_tasks:
            raise UsageError(f"row index {t} outside [1, {self.num_tasks}]")
        if len(values) != t:
            raise UsageError(f"row {t} needs {t} entries, got {len(values)}")
        vals = [float(v) for v in values]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise UsageError(f"row {t}: accuracies must lie in [0, 1]")
        self.rows[t - 1] = vals

    def entry(self, t: int, j: int) -> float:
        if not 1 <= j <= t <= self.num_tasks:
            raise UsageError(f"entry ({t}, {j}) outside the lower triangle")
        row = self.rows[t - 1]
        if row is None:
            raise UsageError(f"row {t} not populated")
        return row[j - 1]

    @property
    def is_complete(self) -> bool:
        return all(r is not None for r in self.rows)

    def to_lists(self) -> list[list[float]]:
        if not self.is_complete:
            raise UsageError("matrix is not fully populated")
        return [list(r) for r in self.rows if r is not None]

    @classmethod
    def from_lists(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        m = cls(num_tasks=len(rows))
        for t, row in enumerate(rows, start=1):
            m.set_row(t, row)
        return m


@dataclass(frozen=True)
class ProbeConfig:
    """Linear-probe fitting parameters; the segment is a deterministic center crop."""

    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 64
    segment_len: int = 64


@dataclass(frozen=True)
class ProtocolSpec:
    """One evaluation protocol: LEP, SLEP (with budget), or FLEP (with downstream)."""

    kind: str  # "lep" | "slep" | "flep"
    probe: ProbeConfig
    slep_budget: int | None = None
    downstream: Dataset | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("lep", "slep", "flep"):
            raise ConfigurationError(f"unknown protocol kind {self.kind!r}")
        if self.kind == "slep" and (self.slep_budget is None or self.slep_budget < 1):
            raise ConfigurationError("slep requires a per-task budget >= 1")
        if self.kind == "flep" and self.downstream is None:
            raise ConfigurationError("flep requires a downstream dataset")


@dataclass(frozen=True)
class MetricsReport:
    """Average accuracy per task, the final average, and forgetting."""

    avg_accuracy_per_task: tuple[float, ...]
    final_avg_accuracy: float
    forgetting: float
    flep_curve: tuple[float, ...] | None = None


def center_segment(features: np.ndarray, segment_len: int) -> np.ndarray:
    """Deterministic center crop; shorter clips are wrap-padded like training."""
    n_frames = features.shape[1]
    if n_frames >= segment_len:
        offset = (n_frames - segment_len) // 2
        return features[:, offset : offset + segment_len]
    reps = -(-segment_len // n_frames)
    return np.tile(features, (1, reps))[:, :segment_len]


@torch.no_grad()
def extract_features(
    encoder: Encoder,
    clips: Sequence[SpectrogramClip],
    segment_len: int,
    batch_size: int = 256,
) -> torch.Tensor:
    """Frozen-encoder embeddings of center segments, shape (n, d)."""
    was_training = encoder.training
    encoder.eval()
    chunks = []
    for start in range(0, len(clips), batch_size):
        group = clips[start : start + batch_size]
        batch = np.stack([center_segment(c.features, segment_len) for c in group])
        chunks.append(encoder(torch.from_numpy(batch).float()))
    encoder.train(was_training)
    return torch.cat(chunks, dim=0)


def _fit_head(
    features: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int,
    cfg: ProbeConfig,
    seed: int,
) -> ClassifierHead:
    """Fit a randomly re-initialized linear head on cached features."""
    torch.manual_seed(derive_seed(seed, "probe-head-init"))
    head = ClassifierHead(features.shape[1], num_classes)
    optimizer = make_optimizer(head.parameters(), kind="adam", lr=cfg.lr)
    order_rng = np.random.default_rng(derive_seed(seed, "probe-batch-order"))
    n = features.shape[0]
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(perm[start : start + cfg.batch_size].copy())
            loss = cross_entropy(head(features[idx]), labels[idx])
            train_step(loss, optimizer, context=f"probe epoch {epoch}")
    return head


def train_probe(
    encoder: Encoder,
    labeled_clips: Sequence[SpectrogramClip],
    classes: Sequence[int],
    probe_cfg: ProbeConfig,
    seed: int,
) -> tuple[ClassifierHead, dict[int, int]]:
    """Train a linear probe on frozen-encoder features.

    `classes` is the evaluation label set; every class must be covered by at
    least one training clip. Returns the head and the label -> output map.
    """
    label_map = {int(c): i for i, c in enumerate(classes)}
    present = {c.label for c in labeled_clips}
    missing = sorted(set(label_map) - present)
    if missing:
        raise EvaluationError(f"probe training data covers no clips for classes {missing}")
    unknown = sorted(present - set(label_map))
    if unknown:
        raise EvaluationError(f"probe training data contains unlisted classes {unknown}")
    features = extract_features(encoder, labeled_clips, probe_cfg.segment_len)
    labels = torch.tensor([label_map[c.label] for c in labeled_clips], dtype=torch.long)
    head = _fit_head(features, labels, len(classes), probe_cfg, seed)
    return head, label_map


@torch.no_grad()
def probe_accuracy(
    encoder: Encoder,
    head: ClassifierHead,
    clips: Sequence[SpectrogramClip],
    label_map: dict[int, int],
    segment_len: int,
) -> float:
    """Fraction of clips whose argmax over the probe's outputs is the true class."""
    if not clips:
        raise UsageError("accuracy over an empty clip list is undefined")
    features = extract_features(encoder, clips, segment_len)
    preds = head(features).argmax(dim=1).numpy()
    truth = np.array([label_map[c.label] for c in clips])
    return float((preds == truth).mean())


def evaluate_in_domain(
    state: "RunState",
    seq: TaskSequence,
    dataset: Dataset,
    proto: ProtocolSpec,
    slep_cache: dict[int, list[SpectrogramClip]] | None = None,
) -> list[float]:
    """Row t of the accuracy matrix after finishing task t.

    The probe trains on labeled data of all tasks up to t (full for LEP, the
    stored per-task subsets for SLEP) over all classes seen so far, and is
    scored on each past task's test split separately.
    """
    if proto.kind not in ("lep", "slep"):
        raise UsageError(f"evaluate_in_domain expects lep/slep, got {proto.kind}")
    t = state.task_index
    if t < 1:
        raise UsageError("no tasks completed yet")
    task_data = [dataspec.materialize_task(dataset, seq, tau) for tau in range(1, t + 1)]
    probe_train: list[SpectrogramClip] = []
    for td in task_data:
        if proto.kind == "lep":
            probe_train.extend(td.train)
        else:
            if slep_cache is not None and td.task_index in slep_cache:
                subset = slep_cache[td.task_index]
            else:
                subset = dataspec.slep_subset(
                    td.train,
                    proto.slep_budget or len(td.train),
                    derive_seed(state.base_seed, "slep", td.task_index),
                )
                if slep_cache is not None:
                    slep_cache[td.task_index] = subset
            probe_train.extend(subset)
    classes = seq.classes_up_to(t)
    # Same probe seed for LEP and SLEP: with a budget covering the full task,
    # SLEP reproduces LEP entry for entry.
    head, label_map = train_probe(
        state.encoder, probe_train, classes,
        proto.probe, derive_seed(state.base_seed, "probe-indomain", t),
    )
    return [
        probe_accuracy(state.encoder, head, td.test, label_map, proto.probe.segment_len)
        for td in task_data
    ]


def evaluate_flep(state: "RunState", downstream: Dataset, proto: ProtocolSpec) -> float:
    """Out-of-domain accuracy: probe on the full downstream dataset at task t."""
    if downstream.name == state.dataset_name:
        raise ConfigurationError(
            f"FLEP downstream dataset {downstream.name!r} equals the encoder-training dataset"
        )
    train = downstream.split_clips("train")
    test = downstream.split_clips("test")
    classes = list(range(downstream.num_classes))
    head, label_map = train_probe(
        state.encoder, train, classes,
        proto.probe, derive_seed(state.base_seed, "probe-flep", state.task_index),
    )
    return probe_accuracy(state.encoder, head, test, label_map, proto.probe.segment_len)


def avg_accuracy(matrix: AccuracyMatrix, t: int) -> float:
    """Mean of row t: accuracy over all tasks seen once task t is finished."""
    if not 1 <= t <= matrix.num_tasks:
        raise UsageError(f"task index {t} outside [1, {matrix.num_tasks}]")
    row = matrix.rows[t - 1]
    if row is None or len(row) != t:
        raise UsageError(f"row {t} is not fully populated")
    return float(sum(row) / t)


def forgetting(matrix: AccuracyMatrix) -> float:
    """Mean over tasks of (peak accuracy across checkpoints - final accuracy).

    The peak ranges over every checkpoint including the last one, so each
    column contributes at least zero. A single-task run has no forgetting by
    definition; it returns 0 with a warning.
    """
    if not matrix.is_complete:
        raise UsageError("forgetting needs a fully populated matrix")
    T = matrix.num_tasks
    if T < 2:
        warnings.warn("forgetting is undefined for T=1; returning 0", RuntimeWarning)
        return 0.0
    total = 0.0
    for j in range(1, T):
        final = matrix.entry(T, j)
        peak = max(matrix.entry(tau, j) for tau in range(j, T + 1))
        total += peak - final
    return total / (T - 1)


def metrics_report(matrix: AccuracyMatrix, flep_curve: Sequence[float] | None = None) -> MetricsReport:
    avg = tuple(avg_accuracy(matrix, t) for t in range(1, matrix.num_tasks + 1))
    return MetricsReport(
        avg_accuracy_per_task=avg,
        final_avg_accuracy=avg[-1],
        forgetting=forgetting(matrix),
        flep_curve=tuple(flep_curve) if flep_curve is not None else None,
    )


def write_matrix_csv(matrix: AccuracyMatrix, path: Path) -> None:
    """Rows `t,j,accuracy` for every populated lower-triangular entry."""
    with open(path, "w") as fh:
        fh.write("t,j,accuracy\n")
        for t in range(1, matrix.num_tasks + 1):
            row = matrix.rows[t - 1]
            if row is None:
                continue
            for j, acc in enumerate(row, start=1):
                fh.write(f"{t},{j},{acc!r}\n")


def write_metrics_json(report: MetricsReport, protocol: str, seed: int, path: Path) -> None:
    payload: dict = {"protocol": protocol, "seed": seed}
    if protocol == "flep":
        payload["flep_curve"] = list(report.flep_curve or ())
        payload["final_accuracy"] = (report.flep_curve or (float("nan"),))[-1]
    else:
        payload["avg_accuracy"] = list(report.avg_accuracy_per_task)
        payload["final_avg_accuracy"] = report.final_avg_accuracy
        payload["forgetting"] = report.forgetting
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
