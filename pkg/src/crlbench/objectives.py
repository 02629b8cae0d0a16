"""Training losses: NT-Xent, MoCo InfoNCE, Barlow Twins, cross-entropy,
distillation terms, and the supervised/SSL joint combiner.

All losses are pure functions of their tensor inputs and preserve the input
dtype, so tests can run them in float64 against brute-force oracles. Frozen
arguments (teachers, keys, queue entries) are detached internally; gradients
only ever flow into the student/query side.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericGuardError, UsageError

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class SSLConfig:
    """Method selector plus the knobs each similarity objective needs."""

    method: str = "simclr"  # simclr | moco | barlow
    temperature: float = 0.5
    barlow_lambda: float = 5e-3
    moco_queue: int = 1024
    moco_momentum: float = 0.99
    moco_temperature: float = 0.07

    def __post_init__(self) -> None:
        if self.method not in ("simclr", "moco", "barlow"):
            raise ConfigurationError(f"unknown SSL method {self.method!r}")
        if self.temperature <= 0 or self.moco_temperature <= 0:
            raise ConfigurationError("temperatures must be > 0")
        if self.barlow_lambda < 0:
            raise ConfigurationError("barlow_lambda must be >= 0")
        if self.moco_queue < 1:
            raise ConfigurationError("moco_queue must be >= 1")
        if not 0.0 <= self.moco_momentum < 1.0:
            raise ConfigurationError("moco_momentum must be in [0, 1)")


@dataclass(frozen=True)
class JointLossWeights:
    """alpha weights the supervised loss, beta the SSL loss."""

    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("joint loss weights must be >= 0")
        if self.alpha == 0 and self.beta == 0:
            raise ConfigurationError("joint loss weights must not both be zero")


class NegativeQueue:
    """FIFO of at most `capacity` unit-norm key vectors."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigurationError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: deque[torch.Tensor] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def enqueue(self, keys: torch.Tensor) -> None:
        """Append detached, re-normalized rows; evict oldest beyond capacity."""
        if keys.ndim != 2:
            raise UsageError("queue expects a (B, p) batch of keys")
        keys = F.normalize(keys.detach(), dim=1, eps=_NORM_EPS)
        for row in keys:
            self._entries.append(row.clone())
            if len(self._entries) > self.capacity:
                self._entries.popleft()

    def tensor(self) -> torch.Tensor:
        if not self._entries:
            raise UsageError("negative queue is empty")
        return torch.stack(list(self._entries), dim=0)

    @classmethod
    def warmed(cls, capacity: int, dim: int, generator: torch.Generator) -> "NegativeQueue":
        """Queue pre-filled with random unit vectors, as in the original MoCo."""
        queue = cls(capacity)
        init = torch.randn(capacity, dim, generator=generator)
        queue.enqueue(init)
        return queue


def _normalize_rows(z: torch.Tensor, what: str) -> torch.Tensor:
    norms = z.norm(dim=1)
    if (norms < _NORM_EPS).any():
        raise NumericGuardError(f"{what}: zero-norm embedding row")
    return z / norms.unsqueeze(1)


def nt_xent(z_a: torch.Tensor, z_b: torch.Tensor, temperature: float) -> torch.Tensor:
    """Normalized-temperature cross-entropy over 2B stacked views.

    Anchor i's positive is its paired view; every other row in the stack is
    a negative. The mean is taken over all 2B anchors.
    """
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise UsageError(f"nt_xent: bad shapes {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    batch = z_a.shape[0]
    z = _normalize_rows(torch.cat([z_a, z_b], dim=0), "nt_xent")
    sim = z @ z.T / temperature
    n = 2 * batch
    diag = torch.eye(n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(diag, float("-inf"))
    pos_index = torch.arange(n, device=z.device).roll(batch)
    positives = sim[torch.arange(n, device=z.device), pos_index]
    return (torch.logsumexp(sim, dim=1) - positives).mean()


def moco_loss(
    q: torch.Tensor, k_pos: torch.Tensor, queue: NegativeQueue, temperature: float
) -> torch.Tensor:
    """InfoNCE with momentum keys as positives and queue entries as negatives.

    Gradients flow into q only; k_pos and the queue are detached. The caller
    enqueues k_pos afterwards.
    """
    if q.shape != k_pos.shape or q.ndim != 2:
        raise UsageError(f"moco_loss: bad shapes {tuple(q.shape)} vs {tuple(k_pos.shape)}")
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    negatives = queue.tensor().to(q.dtype)  # raises UsageError when empty
    q = _normalize_rows(q, "moco_loss")
    k = _normalize_rows(k_pos.detach(), "moco_loss")
    l_pos = (q * k).sum(dim=1, keepdim=True) / temperature
    l_neg = q @ negatives.T / temperature
    logits = torch.cat([l_pos, l_neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def barlow_twins(z_a: torch.Tensor, z_b: torch.Tensor, lam: float) -> torch.Tensor:
    """Drive the cross-correlation of batch-standardized views toward identity.

    loss = sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2, with C computed
    from per-dimension standardization over the batch (population std).
    """
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise UsageError(f"barlow_twins: bad shapes {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    if z_a.shape[0] < 2:
        raise UsageError("barlow_twins needs batch size >= 2")
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    batch = z_a.shape[0]

    def standardize(z: torch.Tensor) -> torch.Tensor:
        std = z.std(dim=0, unbiased=False)
        if (std < _NORM_EPS).any():
            warnings.warn("barlow_twins: zero-variance embedding dimension", RuntimeWarning)
        return (z - z.mean(dim=0)) / (std + _NORM_EPS)

    c = standardize(z_a).T @ standardize(z_b) / batch
    on_diag = (1.0 - c.diagonal()).pow(2).sum()
    off_diag = c.pow(2).sum() - c.diagonal().pow(2).sum()
    return on_diag + lam * off_diag


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax of the true class."""
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise UsageError(
            f"cross_entropy: bad shapes {tuple(logits.shape)} vs {tuple(labels.shape)}"
        )
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise UsageError("cross_entropy: label out of range")
    log_probs = F.log_softmax(logits, dim=1)
    return -log_probs[torch.arange(labels.shape[0], device=logits.device), labels].mean()


def distill_mse(student: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over all entries; teacher side is frozen."""
    if student.shape != teacher.shape:
        raise UsageError(
            f"distill_mse: shape mismatch {tuple(student.shape)} vs {tuple(teacher.shape)}"
        )
    return (student - teacher.detach()).pow(2).mean()


def distill_sim(student: torch.Tensor, teacher: torch.Tensor, temperature: float) -> torch.Tensor:
    """NT-Xent pairing each sample's student and teacher embeddings as positives."""
    return nt_xent(student, teacher.detach(), temperature)


def distill_kld(
    student_logits: torch.Tensor, teacher_logits: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Temperature-scaled KL(teacher || student) on old-class logits, times T^2."""
    if student_logits.shape != teacher_logits.shape or student_logits.ndim != 2:
        raise UsageError(
            f"distill_kld: shape mismatch {tuple(student_logits.shape)}"
            f" vs {tuple(teacher_logits.shape)}"
        )
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    log_p = F.log_softmax(teacher_logits.detach() / temperature, dim=1)
    log_q = F.log_softmax(student_logits / temperature, dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=1)
    return kl.mean() * temperature**2


def joint_loss(sup: torch.Tensor, ssl: torch.Tensor, weights: JointLossWeights) -> torch.Tensor:
    """alpha * supervised + beta * SSL; (1, 0) reduces to the supervised regime."""
    if not (math.isfinite(float(sup.detach())) and math.isfinite(float(ssl.detach()))):
        raise UsageError("joint_loss requires finite inputs")
    return weights.alpha * sup + weights.beta * ssl
