"""Encoder, heads, momentum copies, parameter snapshots, and the train step.

The encoder is a desk-scale stand-in for a large audio backbone: a few
conv-norm-relu-pool blocks ending in global average pooling, so a (F, L)
input maps to a d-dimensional representation in milliseconds on CPU. Probes
always read this pre-projection representation; the projection head exists
only for self-supervised training.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

from .errors import IntegrityError, TrainingDivergedError, UsageError

STATE_MAGIC = b"CRLS1"


class Encoder(nn.Module):
    """Conv blocks + global average pooling; output dim = last channel count."""

    def __init__(self, channels: tuple[int, ...] = (32, 64, 128)):
        super().__init__()
        if not 1 <= len(channels) <= 4:
            raise UsageError("encoder supports 1..4 conv blocks")
        self.channels = tuple(int(c) for c in channels)
        blocks = []
        in_ch = 1
        for out_ch in self.channels:
            blocks += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            in_ch = out_ch
        self.blocks = nn.Sequential(*blocks)

    @property
    def output_dim(self) -> int:
        return self.channels[-1]

    def descriptor(self) -> dict:
        return {"kind": "encoder", "channels": list(self.channels)}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:  # (B, F, L) -> (B, 1, F, L)
            x = x.unsqueeze(1)
        if x.ndim != 4 or x.shape[1] != 1:
            raise UsageError(f"encoder expects (B, F, L) input, got {tuple(x.shape)}")
        h = self.blocks(x)
        return h.mean(dim=(2, 3))


class ProjectionHead(nn.Module):
    """2-layer MLP d -> d -> p used only during SSL training."""

    def __init__(self, input_dim: int, proj_dim: int):
        super().__init__()
        self.input_dim = int(input_dim)
        self.proj_dim = int(proj_dim)
        self.net = nn.Sequential(
            nn.Linear(self.input_dim, self.input_dim),
            nn.ReLU(inplace=True),
            nn.Linear(self.input_dim, self.proj_dim),
        )

    def descriptor(self) -> dict:
        return {"kind": "projection", "input_dim": self.input_dim, "proj_dim": self.proj_dim}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ClassifierHead(nn.Module):
    """Single affine layer d -> num_outputs."""

    def __init__(self, input_dim: int, num_outputs: int):
        super().__init__()
        self.input_dim = int(input_dim)
        self.num_outputs = int(num_outputs)
        self.linear = nn.Linear(self.input_dim, self.num_outputs)

    def descriptor(self) -> dict:
        return {"kind": "classifier", "input_dim": self.input_dim, "num_outputs": self.num_outputs}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear(x)


def build_module(descriptor: dict) -> nn.Module:
    kind = descriptor.get("kind")
    if kind == "encoder":
        return Encoder(channels=tuple(descriptor["channels"]))
    if kind == "projection":
        return ProjectionHead(descriptor["input_dim"], descriptor["proj_dim"])
    if kind == "classifier":
        return ClassifierHead(descriptor["input_dim"], descriptor["num_outputs"])
    raise IntegrityError(f"unknown module descriptor kind {kind!r}")


def descriptor_hash(descriptor: dict) -> str:
    return hashlib.sha256(json.dumps(descriptor, sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class EncoderState:
    """Immutable flattened snapshot of a module, tagged by task index.

    `values` flattens every state_dict entry (parameters and buffers) in
    state_dict order as float32. Integer buffers (batch counters) are far
    below 2**24 at desk scale, so the float32 round-trip is exact.
    """

    task_tag: int
    values: np.ndarray
    arch_hash: str
    descriptor: dict

    def __post_init__(self) -> None:
        self.values.setflags(write=False)


def snapshot(module: nn.Module, task_tag: int) -> EncoderState:
    """Copy all parameters and buffers into an immutable flat vector."""
    chunks = [t.detach().reshape(-1).to(torch.float32).numpy() for t in module.state_dict().values()]
    flat = np.concatenate(chunks).astype(np.float32) if chunks else np.zeros(0, np.float32)
    desc = module.descriptor()
    return EncoderState(
        task_tag=task_tag, values=flat.copy(), arch_hash=descriptor_hash(desc), descriptor=desc
    )


def restore(state: EncoderState) -> nn.Module:
    """Rebuild the module and load the snapshot; forward outputs match bit-exactly."""
    if descriptor_hash(state.descriptor) != state.arch_hash:
        raise IntegrityError("snapshot architecture hash does not match its descriptor")
    module = build_module(state.descriptor)
    sd = module.state_dict()
    total = sum(int(t.numel()) for t in sd.values())
    if total != state.values.size:
        raise IntegrityError(
            f"snapshot holds {state.values.size} values, architecture needs {total}"
        )
    pos = 0
    new_sd = {}
    for key, tensor in sd.items():
        n = int(tensor.numel())
        chunk = torch.from_numpy(state.values[pos : pos + n].copy())
        new_sd[key] = chunk.reshape(tensor.shape).to(tensor.dtype)
        pos += n
    module.load_state_dict(new_sd)
    return module


def save_state(state: EncoderState, path: Path) -> None:
    """Binary layout: magic, sha256 digest, uint64 task_tag, uint64 count, float32 LE."""
    with open(path, "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(bytes.fromhex(state.arch_hash))
        fh.write(struct.pack("<QQ", state.task_tag, state.values.size))
        fh.write(np.ascontiguousarray(state.values, dtype="<f4").tobytes())


def load_state(path: Path, descriptor: dict) -> EncoderState:
    """Read a snapshot file; the expected architecture must be supplied."""
    with open(path, "rb") as fh:
        magic = fh.read(len(STATE_MAGIC))
        if magic != STATE_MAGIC:
            raise IntegrityError(f"{path}: bad magic {magic!r}")
        stored_hash = fh.read(32).hex()
        task_tag, count = struct.unpack("<QQ", fh.read(16))
        values = np.frombuffer(fh.read(4 * count), dtype="<f4")
        if values.size != count:
            raise IntegrityError(f"{path}: truncated state file")
    if stored_hash != descriptor_hash(descriptor):
        raise IntegrityError(f"{path}: architecture hash mismatch")
    return EncoderState(
        task_tag=int(task_tag), values=values.copy(), arch_hash=stored_hash, descriptor=descriptor
    )


def module_checksum(module: nn.Module) -> str:
    """Digest over all parameters and buffers; stable iff the module is untouched."""
    h = hashlib.sha256()
    for key, tensor in module.state_dict().items():
        h.update(key.encode())
        h.update(tensor.detach().to(torch.float64).numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    """Detach a module from training: no gradients, inference-mode normalization."""
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


@torch.no_grad()
def ema_update(key_module: nn.Module, query_module: nn.Module, momentum: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q, element-wise, in place."""
    key_params = list(key_module.parameters())
    query_params = list(query_module.parameters())
    if len(key_params) != len(query_params):
        raise UsageError("momentum update: parameter lists differ in length")
    for k, q in zip(key_params, query_params):
        if k.shape != q.shape:
            raise UsageError(f"momentum update: shape mismatch {tuple(k.shape)} vs {tuple(q.shape)}")
        k.mul_(momentum).add_(q.detach(), alpha=1.0 - momentum)


class MomentumEncoder:
    """EMA copy of encoder (+ projection) that never receives gradients."""

    def __init__(self, encoder: Encoder, projection: ProjectionHead, momentum: float):
        if not 0.0 <= momentum < 1.0:
            raise UsageError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.encoder = copy.deepcopy(encoder)
        self.projection = copy.deepcopy(projection)
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        for p in self.projection.parameters():
            p.requires_grad_(False)

    def update(self, query_encoder: Encoder, query_projection: ProjectionHead) -> None:
        ema_update(self.encoder, query_encoder, self.momentum)
        ema_update(self.projection, query_projection, self.momentum)

    @torch.no_grad()
    def encode_keys(self, batch: torch.Tensor) -> torch.Tensor:
        """L2-normalized key embeddings for a batch of views."""
        z = self.projection(self.encoder(batch))
        return torch.nn.functional.normalize(z, dim=1)


def make_optimizer(
    params: Iterable[torch.nn.Parameter],
    kind: str = "adam",
    lr: float = 1e-3,
    weight_decay: float = 0.0,
) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9, weight_decay=weight_decay)
    if kind == "sgd_plain":
        return torch.optim.SGD(params, lr=lr, weight_decay=weight_decay)
    raise UsageError(f"unknown optimizer kind {kind!r}")


def train_step(loss: torch.Tensor, optimizer: torch.optim.Optimizer, context: str = "") -> float:
    """One first-order update on the optimizer's parameters.

    Aborts with a diagnostic on non-finite loss or gradients; modules not
    owned by the optimizer are untouched.
    """
    if loss.ndim != 0:
        raise UsageError("train_step expects a scalar loss")
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss{' at ' + context if context else ''}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingDivergedError(
                    f"non-finite gradient{' at ' + context if context else ''}"
                )
    optimizer.step()
    return float(loss.detach())
