"""Typed experiment configuration: strict TOML in, validated dataclasses out.

Unknown sections or keys are rejected by name so a typo cannot silently fall
back to a default. The validated config can be echoed back to disk for
provenance; the echo parses to the same experiment.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentConfig, default_augment_config
from .continual import DistillSpec, TrainingRegime
from .dataspec import Dataset, generate_synthetic, load_dataset
from .errors import ConfigurationError
from .evaluation import ProbeConfig, ProtocolSpec
from .objectives import JointLossWeights, SSLConfig

_SYNTH_KEYS = {
    "kind": str,
    "num_classes": int,
    "clips_per_class_train": int,
    "clips_per_class_test": int,
    "freq_bins": int,
    "time_frames": int,
    "noise_sigma": float,
    "seed": int,
    "name": str,
    "manifest": str,
}

_SCHEMA: dict[str, dict[str, type]] = {
    "dataset": _SYNTH_KEYS,
    "tasks": {"num_tasks": int, "seed": int},
    "augment": {
        "segment_len": int,
        "num_freq_masks": int,
        "max_freq_width": int,
        "num_time_masks": int,
        "max_time_width": int,
        "mask_value": float,
    },
    "encoder": {"channels": list, "projection_dim": int},
    "training": {
        "regime": str,
        "epochs_per_task": int,
        "batch_size": int,
        "lr": float,
        "weight_decay": float,
        "optimizer": str,
        "replay": str,
    },
    "objective": {
        "method": str,
        "temperature": float,
        "barlow_lambda": float,
        "moco_queue": int,
        "moco_momentum": float,
        "moco_temperature": float,
    },
    "distill": {"kind": str, "weight": float, "temperature": float, "sim_temperature": float},
    "joint": {"alpha": float, "beta": float},
    "probe": {"epochs": int, "lr": float, "batch_size": int, "segment_len": int},
    "protocols": {"lep": bool, "slep": bool, "slep_budget": int, "flep": bool},
    "downstream": _SYNTH_KEYS,
    "run": {"seeds": list, "output_dir": str, "quiet": bool},
}


@dataclass(frozen=True)
class DatasetSpec:
    """Either synthetic-generation parameters or a manifest directory."""

    kind: str = "synthetic"
    num_classes: int = 10
    clips_per_class_train: int = 36
    clips_per_class_test: int = 12
    freq_bins: int = 32
    time_frames: int = 64
    noise_sigma: float = 1.0
    seed: int = 1
    name: str | None = None
    manifest: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "manifest"):
            raise ConfigurationError(f"dataset kind must be synthetic|manifest, got {self.kind!r}")
        if self.kind == "manifest" and not self.manifest:
            raise ConfigurationError("dataset kind 'manifest' needs a manifest directory")

    def load(self) -> Dataset:
        if self.kind == "manifest":
            assert self.manifest is not None
            path = Path(self.manifest)
            if path.is_dir():
                path = path / "manifest.csv"
            return load_dataset(path, name=self.name)
        return generate_synthetic(
            num_classes=self.num_classes,
            clips_per_class_train=self.clips_per_class_train,
            clips_per_class_test=self.clips_per_class_test,
            freq_bins=self.freq_bins,
            time_frames=self.time_frames,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
            name=self.name,
        )


@dataclass(frozen=True)
class ProtocolPlan:
    lep: bool = True
    slep: bool = False
    slep_budget: int = 8
    flep: bool = False

    def __post_init__(self) -> None:
        if not (self.lep or self.slep or self.flep):
            raise ConfigurationError("at least one evaluation protocol must be enabled")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one `run` needs, validated; `raw` is the echo source."""

    dataset: DatasetSpec
    num_tasks: int
    task_seed: int
    augment: AugmentConfig
    encoder_channels: tuple[int, ...]
    projection_dim: int
    regime: TrainingRegime
    probe: ProbeConfig
    protocols: ProtocolPlan
    downstream: DatasetSpec | None
    seeds: tuple[int, ...]
    output_dir: str
    quiet: bool
    raw: dict = field(repr=False, default_factory=dict)

    def eval_plan(self, downstream: Dataset | None) -> list[ProtocolSpec]:
        plan: list[ProtocolSpec] = []
        if self.protocols.lep:
            plan.append(ProtocolSpec(kind="lep", probe=self.probe))
        if self.protocols.slep:
            plan.append(
                ProtocolSpec(kind="slep", probe=self.probe, slep_budget=self.protocols.slep_budget)
            )
        if self.protocols.flep:
            if downstream is None:
                raise ConfigurationError("flep enabled but no downstream dataset given")
            plan.append(ProtocolSpec(kind="flep", probe=self.probe, downstream=downstream))
        return plan


def _check_keys(section: str, table: dict, schema: dict[str, type]) -> None:
    for key, value in table.items():
        if key not in schema:
            raise ConfigurationError(f"[{section}] unknown key {key!r}")
        want = schema[key]
        if want is float and isinstance(value, int) and not isinstance(value, bool):
            continue  # TOML integers are fine where floats are expected
        if not isinstance(value, want) or (want is int and isinstance(value, bool)):
            raise ConfigurationError(
                f"[{section}] key {key!r} must be {want.__name__}, got {type(value).__name__}"
            )


def _dataset_spec(table: dict, section: str) -> DatasetSpec:
    _check_keys(section, table, _SYNTH_KEYS)
    kwargs = dict(table)
    if "noise_sigma" in kwargs:
        kwargs["noise_sigma"] = float(kwargs["noise_sigma"])
    return DatasetSpec(**kwargs)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate one experiment config from TOML text."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"config is not valid TOML: {exc}") from exc
    for section in raw:
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        if not isinstance(raw[section], dict):
            raise ConfigurationError(f"[{section}] must be a table")
        _check_keys(section, raw[section], _SCHEMA[section])

    dataset = _dataset_spec(raw.get("dataset", {}), "dataset")
    tasks = raw.get("tasks", {})
    num_tasks = int(tasks.get("num_tasks", 1))
    task_seed = int(tasks.get("seed", 0))

    enc = raw.get("encoder", {})
    channels = tuple(int(c) for c in enc.get("channels", [16, 32, 64]))
    if not channels or not all(isinstance(c, int) and c > 0 for c in channels):
        raise ConfigurationError("[encoder] channels must be a non-empty list of positive ints")
    projection_dim = int(enc.get("projection_dim", 64))

    aug_table = raw.get("augment", {})
    if dataset.kind == "synthetic":
        feat_f, feat_n = dataset.freq_bins, dataset.time_frames
    else:
        feat_f, feat_n = 0, 0  # resolved against the loaded data at run time
    seg = int(aug_table.get("segment_len", max(feat_n // 2, 32)))
    base = default_augment_config(feat_f or seg, seg) if feat_f else None
    augment = AugmentConfig(
        segment_len=seg,
        num_freq_masks=int(aug_table.get("num_freq_masks", base.num_freq_masks if base else 2)),
        max_freq_width=int(aug_table.get("max_freq_width", base.max_freq_width if base else 0)),
        num_time_masks=int(aug_table.get("num_time_masks", base.num_time_masks if base else 2)),
        max_time_width=int(aug_table.get("max_time_width", base.max_time_width if base else 0)),
        mask_value=float(aug_table.get("mask_value", 0.0)),
    )

    training = raw.get("training", {})
    regime_kind = str(training.get("regime", "cssl"))
    ssl = None
    if regime_kind in ("cssl", "joint") or "objective" in raw:
        obj = raw.get("objective", {})
        ssl = SSLConfig(
            method=str(obj.get("method", "simclr")),
            temperature=float(obj.get("temperature", 0.5)),
            barlow_lambda=float(obj.get("barlow_lambda", 5e-3)),
            moco_queue=int(obj.get("moco_queue", 1024)),
            moco_momentum=float(obj.get("moco_momentum", 0.99)),
            moco_temperature=float(obj.get("moco_temperature", 0.07)),
        )
    dis = raw.get("distill", {})
    distill = DistillSpec(
        kind=str(dis.get("kind", "none")),
        weight=float(dis.get("weight", 1.0)),
        temperature=float(dis.get("temperature", 2.0)),
        sim_temperature=float(dis.get("sim_temperature", 0.5)),
    )
    joint = None
    if regime_kind == "joint" or "joint" in raw:
        jt = raw.get("joint", {})
        joint = JointLossWeights(alpha=float(jt.get("alpha", 1.0)), beta=float(jt.get("beta", 0.2)))
    regime = TrainingRegime(
        kind=regime_kind,
        ssl=ssl,
        epochs_per_task=int(training.get("epochs_per_task", 20)),
        batch_size=int(training.get("batch_size", 64)),
        lr=float(training.get("lr", 1e-3)),
        weight_decay=float(training.get("weight_decay", 0.0)),
        optimizer=str(training.get("optimizer", "adam")),
        distill=distill,
        replay=str(training.get("replay", "none")),
        joint=joint,
    )

    pr = raw.get("probe", {})
    probe = ProbeConfig(
        epochs=int(pr.get("epochs", 30)),
        lr=float(pr.get("lr", 1e-2)),
        batch_size=int(pr.get("batch_size", 64)),
        segment_len=int(pr.get("segment_len", augment.segment_len)),
    )

    pt = raw.get("protocols", {})
    protocols = ProtocolPlan(
        lep=bool(pt.get("lep", True)),
        slep=bool(pt.get("slep", False)),
        slep_budget=int(pt.get("slep_budget", 8)),
        flep=bool(pt.get("flep", False)),
    )
    downstream = None
    if "downstream" in raw:
        downstream = _dataset_spec(raw["downstream"], "downstream")
    if protocols.flep and downstream is None:
        raise ConfigurationError("[protocols] flep = true requires a [downstream] section")

    run = raw.get("run", {})
    seeds_raw = run.get("seeds", [1])
    if not isinstance(seeds_raw, list) or not seeds_raw:
        raise ConfigurationError("[run] seeds must be a non-empty list of ints")
    if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds_raw):
        raise ConfigurationError("[run] seeds must be a non-empty list of ints")
    return ExperimentConfig(
        dataset=dataset,
        num_tasks=num_tasks,
        task_seed=task_seed,
        augment=augment,
        encoder_channels=channels,
        projection_dim=projection_dim,
        regime=regime,
        probe=probe,
        protocols=protocols,
        downstream=downstream,
        seeds=tuple(int(s) for s in seeds_raw),
        output_dir=str(run.get("output_dir", "runs/exp")),
        quiet=bool(run.get("quiet", False)),
        raw=raw,
    )


def load_config(path: Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigurationError(f"cannot echo config value of type {type(value).__name__}")


def config_echo(cfg: ExperimentConfig) -> str:
    """Render the parsed config back to TOML; parsing the echo round-trips."""
    lines: list[str] = []
    for section in _SCHEMA:
        table = cfg.raw.get(section)
        if not table:
            continue
        lines.append(f"[{section}]")
        for key in _SCHEMA[section]:
            if key in table:
                lines.append(f"{key} = {_toml_value(table[key])}")
        lines.append("")
    return "\n".join(lines)


def effective_config_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved settings for embedding into results, defaults included.

    Output-location and verbosity settings are omitted so results produced in
    different directories from the same experiment compare equal.
    """
    out: dict[str, Any] = {
        "dataset": {
            k: v
            for k, v in vars(cfg.dataset).items()
            if v is not None
        },
        "tasks": {"num_tasks": cfg.num_tasks, "seed": cfg.task_seed},
        "augment": vars(cfg.augment).copy(),
        "encoder": {"channels": list(cfg.encoder_channels), "projection_dim": cfg.projection_dim},
        "training": {
            "regime": cfg.regime.kind,
            "epochs_per_task": cfg.regime.epochs_per_task,
            "batch_size": cfg.regime.batch_size,
            "lr": cfg.regime.lr,
            "weight_decay": cfg.regime.weight_decay,
            "optimizer": cfg.regime.optimizer,
            "replay": cfg.regime.replay,
        },
        "distill": vars(cfg.regime.distill).copy(),
        "probe": vars(cfg.probe).copy(),
        "protocols": vars(cfg.protocols).copy(),
        "seeds": list(cfg.seeds),
    }
    if cfg.regime.ssl is not None:
        out["objective"] = vars(cfg.regime.ssl).copy()
    if cfg.regime.joint is not None:
        out["joint"] = vars(cfg.regime.joint).copy()
    if cfg.downstream is not None:
        out["downstream"] = {k: v for k, v in vars(cfg.downstream).items() if v is not None}
    return out
