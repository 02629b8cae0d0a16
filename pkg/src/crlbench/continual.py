"""Task-sequence orchestration for continual representation learning.

Each task trains the encoder initialized from the end of the previous task,
under a self-supervised (cssl), supervised (csup), or mixed (joint) regime,
optionally regularized by distillation against a frozen snapshot of the
previous task's encoder and optionally rehearsing a replay buffer. The
supervised training head is per-task scaffolding and is discarded before
evaluation; probes are fit separately by the evaluation module.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import dataspec
from .augment import AugmentConfig, make_view, make_view_pair
from .dataspec import Dataset, ReplayBuffer, SpectrogramClip, TaskDataset, TaskSequence
from .errors import ConfigurationError, IntegrityError
from .evaluation import (
    AccuracyMatrix,
    MetricsReport,
    ProtocolSpec,
    evaluate_flep,
    evaluate_in_domain,
    metrics_report,
)
from .nncore import (
    ClassifierHead,
    Encoder,
    EncoderState,
    MomentumEncoder,
    ProjectionHead,
    freeze,
    make_optimizer,
    restore,
    save_state,
    snapshot,
    train_step,
)
from .objectives import (
    JointLossWeights,
    NegativeQueue,
    SSLConfig,
    barlow_twins,
    cross_entropy,
    distill_kld,
    distill_mse,
    distill_sim,
    joint_loss,
    moco_loss,
    nt_xent,
)
from .seeding import derive_seed

_DISTILL_KINDS = {
    "cssl": ("none", "mse", "sim"),
    "csup": ("none", "mse", "sim", "kld"),
    "joint": ("none", "mse", "sim"),
}


@dataclass(frozen=True)
class DistillSpec:
    """Distillation term added to the task loss for t > 1."""

    kind: str = "none"  # "none" | "mse" | "sim" | "kld"
    weight: float = 1.0
    temperature: float = 2.0  # kld softening
    sim_temperature: float = 0.5  # NT-Xent tau for kind "sim"

    def __post_init__(self) -> None:
        if self.kind not in ("none", "mse", "sim", "kld"):
            raise ConfigurationError(f"unknown distillation kind {self.kind!r}")
        if self.weight < 0:
            raise ConfigurationError("distillation weight must be >= 0")
        if self.temperature <= 0 or self.sim_temperature <= 0:
            raise ConfigurationError("distillation temperatures must be positive")


@dataclass(frozen=True)
class TrainingRegime:
    """What loss drives encoder training and how each task is optimized."""

    kind: str  # "cssl" | "csup" | "joint"
    ssl: SSLConfig | None = None
    epochs_per_task: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"
    distill: DistillSpec = field(default_factory=DistillSpec)
    replay: str = "none"
    joint: JointLossWeights | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("cssl", "csup", "joint"):
            raise ConfigurationError(f"unknown regime {self.kind!r}")
        if self.kind in ("cssl", "joint") and self.ssl is None:
            raise ConfigurationError(f"regime {self.kind} requires an SSL configuration")
        if self.kind == "joint" and self.joint is None:
            raise ConfigurationError("joint regime requires loss weights")
        if self.distill.kind not in _DISTILL_KINDS[self.kind]:
            raise ConfigurationError(
                f"distillation kind {self.distill.kind!r} is not valid for regime {self.kind!r}"
            )
        if self.epochs_per_task < 1:
            raise ConfigurationError("epochs_per_task must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.replay not in ("none", "full"):
            raise ConfigurationError(f"unknown replay mode {self.replay!r}")


@dataclass
class RunState:
    """Mutable state threaded through a task sequence.

    `last_snapshot` always carries the encoder at the end of task
    `task_index`; the teacher modules are rebuilt from it at the start of the
    next task when distillation is active, so the teacher is tagged t - 1
    while task t trains.
    """

    base_seed: int
    dataset_name: str
    encoder: Encoder
    projection: ProjectionHead | None
    augment_cfg: AugmentConfig | None = None
    task_index: int = 0
    momentum: MomentumEncoder | None = None
    queue: NegativeQueue | None = None
    last_snapshot: EncoderState | None = None
    teacher_head: ClassifierHead | None = None
    teacher_label_map: dict[int, int] | None = None
    replay: ReplayBuffer = field(default_factory=lambda: ReplayBuffer(mode="none"))
    seed_ledger: dict[str, int] = field(default_factory=dict)

    def derive(self, *parts: int | str) -> int:
        seed = derive_seed(self.base_seed, *parts)
        self.seed_ledger["/".join(str(p) for p in parts)] = seed
        return seed


def fresh_state(
    encoder_channels: Sequence[int],
    projection_dim: int,
    dataset: Dataset,
    regime: TrainingRegime,
    augment_cfg: AugmentConfig,
    seed: int,
) -> RunState:
    """Randomly initialized encoder (+ projection for SSL regimes) at t = 0."""
    torch.manual_seed(derive_seed(seed, "init", "encoder"))
    encoder = Encoder(channels=tuple(encoder_channels))
    projection = None
    if regime.kind in ("cssl", "joint"):
        torch.manual_seed(derive_seed(seed, "init", "projection"))
        projection = ProjectionHead(encoder.output_dim, projection_dim)
    return RunState(
        base_seed=seed,
        dataset_name=dataset.name,
        encoder=encoder,
        projection=projection,
        augment_cfg=augment_cfg,
        replay=ReplayBuffer(mode=regime.replay),
    )


def init_from_previous(state: RunState) -> Encoder:
    """Fresh encoder module holding the previous task's final parameters."""
    if state.task_index < 1 or state.last_snapshot is None:
        raise IntegrityError("no previous-task snapshot to initialize from")
    if state.last_snapshot.task_tag != state.task_index:
        raise IntegrityError(
            f"snapshot tag {state.last_snapshot.task_tag} does not match "
            f"completed task {state.task_index}"
        )
    encoder = restore(state.last_snapshot)
    assert isinstance(encoder, Encoder)
    return encoder


def _stack_views(views: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(views)).float()


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled minibatch index arrays; a trailing singleton is dropped."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if len(idx) >= 2:
            yield idx


def _labels_or_raise(clips: Sequence[SpectrogramClip], task_index: int) -> list[int]:
    labels = [c.label for c in clips]
    if any(l < 0 for l in labels):
        raise ConfigurationError(
            f"task {task_index}: supervised training needs a label on every clip"
        )
    return labels


def _teacher_encoder(state: RunState) -> Encoder:
    """Frozen copy of the previous task's encoder, rebuilt from the snapshot."""
    if state.last_snapshot is None:
        raise IntegrityError("distillation requested but no teacher snapshot exists")
    teacher = restore(state.last_snapshot)
    freeze(teacher)
    teacher.eval()
    assert isinstance(teacher, Encoder)
    return teacher


def run_task(state: RunState, task: TaskDataset, regime: TrainingRegime) -> RunState:
    """Train the encoder on one task and roll the state forward.

    The training set is the task's train split plus the replay buffer. For
    t > 1 with distillation enabled, a frozen copy of the previous encoder
    (and, for kld, the previous head) provides targets; teacher and student
    see the same augmented view. The supervised head is created per task and
    kept only as the next task's kld teacher.
    """
    t = state.task_index + 1
    if task.task_index != t:
        raise ConfigurationError(
            f"task index {task.task_index} does not follow completed task {state.task_index}"
        )
    if state.augment_cfg is None:
        raise ConfigurationError("run state carries no augmentation config")
    clips = dataspec.effective_train_clips(task, state.replay)
    if not clips:
        raise ConfigurationError(f"task {t} has no training clips")

    distill_on = regime.distill.kind != "none" and t > 1
    teacher = _teacher_encoder(state) if distill_on else None

    head = None
    label_map: dict[int, int] | None = None
    student_old_head = None
    if regime.kind in ("csup", "joint"):
        labels = _labels_or_raise(clips, t)
        label_map = {c: i for i, c in enumerate(sorted(set(labels)))}
        torch.manual_seed(state.derive("init", "head", t))
        head = ClassifierHead(state.encoder.output_dim, len(label_map))
    if distill_on and regime.distill.kind == "kld":
        if state.teacher_head is None or state.teacher_label_map is None:
            raise IntegrityError("kld distillation requested but no teacher head exists")
        teacher_head = copy.deepcopy(state.teacher_head)
        freeze(teacher_head)
        teacher_head.eval()
        student_old_head = copy.deepcopy(state.teacher_head)

    params: list[torch.nn.Parameter] = list(state.encoder.parameters())
    if state.projection is not None:
        params += list(state.projection.parameters())
    if head is not None:
        params += list(head.parameters())
    if student_old_head is not None:
        params += list(student_old_head.parameters())
    optimizer = make_optimizer(
        params, kind=regime.optimizer, lr=regime.lr, weight_decay=regime.weight_decay
    )

    if regime.kind in ("cssl", "joint") and regime.ssl and regime.ssl.method == "moco":
        state.momentum = MomentumEncoder(
            state.encoder, state.projection, momentum=regime.ssl.moco_momentum
        )
        gen = torch.Generator().manual_seed(state.derive("queue", t))
        state.queue = NegativeQueue.warmed(
            regime.ssl.moco_queue, state.projection.proj_dim, gen
        )
    else:
        state.momentum = None
        state.queue = None

    needs_pairs = regime.kind in ("cssl", "joint")
    for epoch in range(regime.epochs_per_task):
        order_rng = np.random.default_rng(state.derive("order", t, epoch))
        aug_rng = np.random.default_rng(state.derive("augment", t, epoch))
        for step, idx in enumerate(
            _batch_indices(len(clips), regime.batch_size, order_rng)
        ):
            batch = [clips[i] for i in idx]
            context = f"task {t} epoch {epoch} step {step}"
            if needs_pairs:
                pairs = [make_view_pair(c, state.augment_cfg, aug_rng) for c in batch]
                x_a = _stack_views([p.view_a for p in pairs])
                x_b = _stack_views([p.view_b for p in pairs])
            else:
                x_a = _stack_views([make_view(c, state.augment_cfg, aug_rng) for c in batch])
                x_b = None

            h_a = state.encoder(x_a)
            loss: torch.Tensor
            keys = None
            if regime.kind == "cssl" or regime.kind == "joint":
                assert state.projection is not None and regime.ssl is not None
                z_a = state.projection(h_a)
                if regime.ssl.method == "moco":
                    assert state.momentum is not None and state.queue is not None
                    state.momentum.update(state.encoder, state.projection)
                    keys = state.momentum.encode_keys(x_b)
                    ssl_term = moco_loss(z_a, keys, state.queue, regime.ssl.moco_temperature)
                elif regime.ssl.method == "barlow":
                    z_b = state.projection(state.encoder(x_b))
                    ssl_term = barlow_twins(z_a, z_b, regime.ssl.barlow_lambda)
                else:
                    z_b = state.projection(state.encoder(x_b))
                    ssl_term = nt_xent(z_a, z_b, regime.ssl.temperature)
                if regime.kind == "cssl":
                    loss = ssl_term
                else:
                    assert head is not None and label_map is not None
                    y = torch.tensor([label_map[batch[i].label] for i in range(len(batch))])
                    sup_term = cross_entropy(head(h_a), y)
                    loss = joint_loss(sup_term, ssl_term, regime.joint)
            else:
                assert head is not None and label_map is not None
                y = torch.tensor([label_map[c.label] for c in batch])
                loss = cross_entropy(head(h_a), y)

            if distill_on:
                assert teacher is not None
                with torch.no_grad():
                    teacher_h = teacher(x_a)
                if regime.distill.kind == "mse":
                    loss = loss + regime.distill.weight * distill_mse(h_a, teacher_h)
                elif regime.distill.kind == "sim":
                    loss = loss + regime.distill.weight * distill_sim(
                        h_a, teacher_h, regime.distill.sim_temperature
                    )
                else:
                    assert student_old_head is not None and teacher_head is not None
                    with torch.no_grad():
                        teacher_logits = teacher_head(teacher_h)
                    loss = loss + regime.distill.weight * distill_kld(
                        student_old_head(h_a), teacher_logits, regime.distill.temperature
                    )

            train_step(loss, optimizer, context=context)
            if keys is not None:
                assert state.queue is not None
                state.queue.enqueue(keys)

    state.task_index = t
    state.last_snapshot = snapshot(state.encoder, task_tag=t)
    if head is not None:
        state.teacher_head = head
        state.teacher_label_map = label_map
    state.replay = dataspec.replay_extend(state.replay, task.train)
    return state


@dataclass
class RunResult:
    """Everything one seeded sequence produced."""

    seed: int
    dataset_name: str
    num_tasks: int
    regime_kind: str
    matrices: dict[str, AccuracyMatrix]
    reports: dict[str, MetricsReport]
    flep_curve: list[float] | None
    encoder_paths: list[str]
    wall_clock_sec: float


def run_sequence(
    dataset: Dataset,
    seq: TaskSequence,
    regime: TrainingRegime,
    eval_plan: Sequence[ProtocolSpec],
    *,
    encoder_channels: Sequence[int] = (16, 32, 64),
    projection_dim: int = 64,
    augment_cfg: AugmentConfig,
    seed: int,
    output_dir: Path | None = None,
) -> RunResult:
    """Run all tasks in order, evaluating after each one.

    After task t, every in-domain protocol in the eval plan fills row t of
    its accuracy matrix and the flep protocol (if any) appends one point to
    its curve. Encoder snapshots land in `output_dir/encoder_task{t}.bin`.
    """
    started = time.monotonic()
    state = fresh_state(encoder_channels, projection_dim, dataset, regime, augment_cfg, seed)
    in_domain = [p for p in eval_plan if p.kind in ("lep", "slep")]
    flep = [p for p in eval_plan if p.kind == "flep"]
    if len(flep) > 1:
        raise ConfigurationError("at most one flep protocol per run")
    matrices = {p.kind: AccuracyMatrix(seq.num_tasks) for p in in_domain}
    if len(matrices) != len(in_domain):
        raise ConfigurationError("duplicate in-domain protocol kinds in the eval plan")
    flep_curve: list[float] = []
    slep_cache: dict[int, list[SpectrogramClip]] = {}
    encoder_paths: list[str] = []

    for t in range(1, seq.num_tasks + 1):
        if t > 1:
            state.encoder = init_from_previous(state)
        task = dataspec.materialize_task(dataset, seq, t)
        run_task(state, task, regime)
        if output_dir is not None:
            output_dir.mkdir(parents=True, exist_ok=True)
            path = output_dir / f"encoder_task{t}.bin"
            save_state(state.last_snapshot, path)
            encoder_paths.append(str(path))
        for proto in in_domain:
            row = evaluate_in_domain(state, seq, dataset, proto, slep_cache)
            matrices[proto.kind].set_row(t, row)
        for proto in flep:
            flep_curve.append(evaluate_flep(state, proto.downstream, proto))

    reports = {kind: metrics_report(m) for kind, m in matrices.items()}
    return RunResult(
        seed=seed,
        dataset_name=dataset.name,
        num_tasks=seq.num_tasks,
        regime_kind=regime.kind,
        matrices=matrices,
        reports=reports,
        flep_curve=flep_curve if flep else None,
        encoder_paths=encoder_paths,
        wall_clock_sec=time.monotonic() - started,
    )
