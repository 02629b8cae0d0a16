"""Command-line entry points: generate-data, run, plot, report.

`run` executes one experiment per seed, persists every artifact under the
output directory, and prints the final average accuracy and forgetting per
protocol. `plot` and `report` consume the emitted results.json files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_echo, effective_config_dict, load_config
from .continual import RunResult, run_sequence
from .dataspec import save_dataset, split_tasks
from .errors import ConfigurationError, CrlBenchError, UsageError
from .evaluation import write_matrix_csv, write_metrics_json

CHANCE_LABEL = "chance"


def _say(quiet: bool, message: str) -> None:
    if not quiet:
        print(message, file=sys.stderr)


def apply_thread_cap() -> None:
    """CRLBENCH_THREADS caps torch intra-op parallelism for the process."""
    cap = os.environ.get("CRLBENCH_THREADS")
    if not cap:
        return
    try:
        n = int(cap)
    except ValueError as exc:
        raise ConfigurationError(f"CRLBENCH_THREADS must be an integer, got {cap!r}") from exc
    if n < 1:
        raise ConfigurationError(f"CRLBENCH_THREADS must be >= 1, got {n}")
    import torch

    torch.set_num_threads(n)


def run_label(cfg: ExperimentConfig) -> str:
    """Human-readable tag for one configuration, used in plots and reports."""
    if cfg.regime.kind == "cssl":
        label = f"cssl-{cfg.regime.ssl.method}" if cfg.regime.ssl else "cssl"
    elif cfg.regime.kind == "csup":
        label = "csup"
    else:
        assert cfg.regime.joint is not None
        label = f"joint-a{cfg.regime.joint.alpha:g}-b{cfg.regime.joint.beta:g}"
        if cfg.regime.ssl:
            label += f"-{cfg.regime.ssl.method}"
    if cfg.regime.distill.kind != "none":
        label += f"+{cfg.regime.distill.kind}"
    if cfg.regime.replay == "full":
        label += "+replay"
    return label


def cmd_generate_data(cfg: ExperimentConfig, output: Path, quiet: bool = False) -> Path:
    """Materialize the configured dataset(s) to manifest + feature files."""
    dataset = cfg.dataset.load()
    manifest = save_dataset(dataset, output)
    _say(quiet, f"wrote {len(dataset.clips)} clips under {output}")
    if cfg.downstream is not None:
        down = cfg.downstream.load()
        down_manifest = save_dataset(down, output / "downstream")
        _say(quiet, f"wrote downstream dataset to {down_manifest}")
    return manifest


def _result_payload(res: RunResult, output_dir: Path) -> dict:
    protocols: dict[str, dict] = {}
    for kind, matrix in res.matrices.items():
        report = res.reports[kind]
        protocols[kind] = {
            "matrix": matrix.to_lists(),
            "avg_accuracy": list(report.avg_accuracy_per_task),
            "final_avg_accuracy": report.final_avg_accuracy,
            "forgetting": report.forgetting,
            "completed": True,
        }
    if res.flep_curve is not None:
        protocols["flep"] = {
            "curve": list(res.flep_curve),
            "final_accuracy": res.flep_curve[-1],
            "completed": True,
        }
    rel_paths = [str(Path(p).relative_to(output_dir)) for p in res.encoder_paths]
    return {
        "seed": res.seed,
        "protocols": protocols,
        "encoder_paths": rel_paths,
        "wall_clock_sec": res.wall_clock_sec,
    }


def _aggregate(per_seed: list[dict]) -> dict:
    """Mean and population std of each protocol's headline metrics."""
    agg: dict[str, dict] = {}
    kinds = sorted({k for payload in per_seed for k in payload["protocols"]})
    for kind in kinds:
        rows = [p["protocols"][kind] for p in per_seed if kind in p["protocols"]]
        agg[kind] = {}
        metric_keys = ("final_accuracy",) if kind == "flep" else (
            "final_avg_accuracy", "forgetting",
        )
        for key in metric_keys:
            values = np.array([r[key] for r in rows], dtype=np.float64)
            agg[kind][key] = {
                "mean": float(values.mean()),
                "std": float(values.std()),
            }
    return agg


def cmd_run(cfg: ExperimentConfig, quiet: bool = False) -> dict:
    """Execute the experiment once per seed and persist all artifacts."""
    started = time.monotonic()
    output_dir = Path(cfg.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / "config.echo.toml").write_text(config_echo(cfg))

    dataset = cfg.dataset.load()
    feat_f, feat_n = dataset.feature_shape
    if cfg.augment.segment_len > feat_n:
        raise ConfigurationError(
            f"segment_len {cfg.augment.segment_len} exceeds clip length {feat_n}"
        )
    if cfg.augment.max_freq_width > feat_f:
        raise ConfigurationError(
            f"max_freq_width {cfg.augment.max_freq_width} exceeds {feat_f} frequency bins"
        )
    seq = split_tasks(dataset, cfg.num_tasks, cfg.task_seed)
    downstream = cfg.downstream.load() if (cfg.protocols.flep and cfg.downstream) else None
    eval_plan = cfg.eval_plan(downstream)

    per_seed: list[dict] = []
    for seed in cfg.seeds:
        _say(quiet, f"seed {seed}: training {cfg.num_tasks} task(s), regime {cfg.regime.kind}")
        seed_dir = output_dir / f"seed{seed}"
        res = run_sequence(
            dataset,
            seq,
            cfg.regime,
            eval_plan,
            encoder_channels=cfg.encoder_channels,
            projection_dim=cfg.projection_dim,
            augment_cfg=cfg.augment,
            seed=seed,
            output_dir=seed_dir,
        )
        for i, (kind, matrix) in enumerate(res.matrices.items()):
            suffix = "" if i == 0 else f"_{kind}"
            write_matrix_csv(matrix, seed_dir / f"accuracy_matrix{suffix}.csv")
            write_metrics_json(res.reports[kind], kind, seed, seed_dir / f"metrics_{kind}.json")
        if res.flep_curve is not None:
            with open(seed_dir / "metrics_flep.json", "w") as fh:
                json.dump(
                    {
                        "protocol": "flep",
                        "seed": seed,
                        "flep_curve": list(res.flep_curve),
                        "final_accuracy": res.flep_curve[-1],
                    },
                    fh,
                    indent=2,
                )
                fh.write("\n")
        per_seed.append(_result_payload(res, seed_dir))

    payload = {
        "label": run_label(cfg),
        "config": effective_config_dict(cfg),
        "dataset_name": dataset.name,
        "num_tasks": cfg.num_tasks,
        "num_classes": dataset.num_classes,
        "cum_classes": [len(seq.classes_up_to(t)) for t in range(1, cfg.num_tasks + 1)],
        "task_classes": [list(task) for task in seq.tasks],
        "downstream_classes": downstream.num_classes if downstream else None,
        "seeds": list(cfg.seeds),
        "runs": per_seed,
        "aggregate": _aggregate(per_seed),
        "wall_clock_sec": time.monotonic() - started,
    }
    with open(output_dir / "results.json", "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")

    for kind, metrics in payload["aggregate"].items():
        parts = []
        for key, stat in metrics.items():
            parts.append(f"{key}={stat['mean']:.4f}+-{stat['std']:.4f}")
        print(f"{payload['label']} {kind}: " + ", ".join(parts))
    return payload


def _load_results(paths: list[Path]) -> list[dict]:
    if not paths:
        raise UsageError("no results files given")
    loaded = []
    for p in paths:
        try:
            with open(p) as fh:
                loaded.append(json.load(fh))
        except OSError as exc:
            raise UsageError(f"cannot read results file {p}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"results file {p} is not valid JSON: {exc}") from exc
    t0 = loaded[0].get("num_tasks")
    for p, res in zip(paths, loaded):
        if res.get("num_tasks") != t0:
            raise UsageError(
                f"results mix task counts: {paths[0]} has T={t0}, {p} has T={res.get('num_tasks')}"
            )
    return loaded


def cmd_plot(result_paths: list[Path], output: Path, quiet: bool = False) -> list[Path]:
    """Average-accuracy trajectories (and FLEP curves) as SVG + PNG."""
    results = _load_results(result_paths)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    output.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    num_tasks = results[0]["num_tasks"]
    xs = list(range(1, num_tasks + 1))

    in_domain_kinds = sorted(
        {k for res in results for k in res["runs"][0]["protocols"] if k in ("lep", "slep")}
    )
    for kind in in_domain_kinds:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for res in results:
            curves = [
                run["protocols"][kind]["avg_accuracy"]
                for run in res["runs"]
                if kind in run["protocols"]
            ]
            if not curves:
                continue
            mean_curve = np.mean(np.array(curves, dtype=np.float64), axis=0)
            ax.plot(xs, mean_curve, marker="o", label=res.get("label", "run"))
        chance = [1.0 / c for c in results[0]["cum_classes"]]
        ax.plot(xs, chance, linestyle=":", color="gray", label=CHANCE_LABEL)
        ax.set_xlabel("task")
        ax.set_ylabel("average accuracy")
        ax.set_xticks(xs)
        ax.set_ylim(0.0, 1.0)
        ax.set_title(kind.upper())
        ax.legend(fontsize=8)
        fig.tight_layout()
        for ext in ("svg", "png"):
            path = output / f"trajectory_{kind}.{ext}"
            fig.savefig(path)
            written.append(path)
        plt.close(fig)

    if any("flep" in res["runs"][0]["protocols"] for res in results):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for res in results:
            curves = [
                run["protocols"]["flep"]["curve"]
                for run in res["runs"]
                if "flep" in run["protocols"]
            ]
            if not curves:
                continue
            mean_curve = np.mean(np.array(curves, dtype=np.float64), axis=0)
            ax.plot(xs, mean_curve, marker="s", label=res.get("label", "run"))
        down = next(
            (res["downstream_classes"] for res in results if res.get("downstream_classes")), None
        )
        if down:
            ax.axhline(1.0 / down, linestyle=":", color="gray", label=CHANCE_LABEL)
        ax.set_xlabel("task")
        ax.set_ylabel("downstream accuracy")
        ax.set_xticks(xs)
        ax.set_ylim(0.0, 1.0)
        ax.set_title("FLEP")
        ax.legend(fontsize=8)
        fig.tight_layout()
        for ext in ("svg", "png"):
            path = output / f"flep_curve.{ext}"
            fig.savefig(path)
            written.append(path)
        plt.close(fig)

    for path in written:
        _say(quiet, f"wrote {path}")
    return written


_REPORT_COLUMNS = (
    ("lep", "final_avg_accuracy", "LEP A", True),
    ("lep", "forgetting", "LEP F", False),
    ("slep", "final_avg_accuracy", "SLEP A", True),
    ("slep", "forgetting", "SLEP F", False),
    ("flep", "final_accuracy", "FLEP A", True),
)


def cmd_report(result_paths: list[Path], output: Path, quiet: bool = False) -> tuple[Path, Path]:
    """Markdown + CSV summary table, one row per run, best per column bolded."""
    results = _load_results(result_paths)
    columns = [
        col for col in _REPORT_COLUMNS if any(col[0] in res["aggregate"] for res in results)
    ]
    if not columns:
        raise UsageError("results contain no reportable protocols")

    cells: list[list[float | None]] = []
    for res in results:
        row: list[float | None] = []
        for kind, metric, _, _ in columns:
            entry = res["aggregate"].get(kind)
            row.append(entry[metric]["mean"] if entry else None)
        cells.append(row)

    best: list[float | None] = []
    for j, (_, _, _, higher_better) in enumerate(columns):
        values = [row[j] for row in cells if row[j] is not None]
        if not values:
            best.append(None)
        else:
            best.append(max(values) if higher_better else min(values))

    output.mkdir(parents=True, exist_ok=True)
    md_path = output / "report.md"
    csv_path = output / "report.csv"

    headers = [c[2] for c in columns]
    md_lines = ["| run | " + " | ".join(headers) + " |",
                "| --- | " + " | ".join("---" for _ in headers) + " |"]
    csv_lines = ["run," + ",".join(h.replace(" ", "_") for h in headers)]
    for res, row in zip(results, cells):
        label = res.get("label", "run")
        md_cells, csv_cells = [], []
        for j, value in enumerate(row):
            if value is None:
                md_cells.append("-")
                csv_cells.append("")
            else:
                text = repr(value)
                md_cells.append(f"**{text}**" if value == best[j] else text)
                csv_cells.append(text)
        md_lines.append("| " + " | ".join([label] + md_cells) + " |")
        csv_lines.append(",".join([label] + csv_cells))
    md_path.write_text("\n".join(md_lines) + "\n")
    csv_path.write_text("\n".join(csv_lines) + "\n")
    _say(quiet, f"wrote {md_path} and {csv_path}")
    return md_path, csv_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crlbench",
        description="Continual representation-learning benchmark on synthetic spectrograms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="materialize the configured dataset to disk")
    gen.add_argument("--config", required=True, type=Path)
    gen.add_argument("--output", type=Path, default=None)
    gen.add_argument("--quiet", action="store_true")

    run = sub.add_parser("run", help="train and evaluate per the config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--output", type=Path, default=None, help="override [run] output_dir")
    run.add_argument("--seeds", type=str, default=None, help="comma-separated seed override")
    run.add_argument("--quiet", action="store_true")

    plot = sub.add_parser("plot", help="accuracy trajectories from results.json files")
    plot.add_argument("results", nargs="*", type=Path)
    plot.add_argument("--output", type=Path, default=Path("plots"))
    plot.add_argument("--quiet", action="store_true")

    report = sub.add_parser("report", help="summary table from results.json files")
    report.add_argument("results", nargs="*", type=Path)
    report.add_argument("--output", type=Path, default=Path("reports"))
    report.add_argument("--quiet", action="store_true")
    return parser


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from exc
    if not seeds:
        raise UsageError("--seeds produced an empty seed list")
    return seeds


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    apply_thread_cap()
    if args.command == "generate-data":
        cfg = load_config(args.config)
        output = args.output or Path(cfg.output_dir) / "data"
        cmd_generate_data(cfg, output, quiet=args.quiet)
        return 0
    if args.command == "run":
        cfg = load_config(args.config)
        overrides = {}
        if args.output is not None:
            overrides["output_dir"] = str(args.output)
        if args.seeds is not None:
            overrides["seeds"] = _parse_seeds(args.seeds)
        if args.quiet:
            overrides["quiet"] = True
        if overrides:
            import copy
            import dataclasses

            # Patch the echo source too so the persisted config matches what ran.
            raw = copy.deepcopy(cfg.raw)
            run_table = raw.setdefault("run", {})
            if "output_dir" in overrides:
                run_table["output_dir"] = overrides["output_dir"]
            if "seeds" in overrides:
                run_table["seeds"] = list(overrides["seeds"])
            if "quiet" in overrides:
                run_table["quiet"] = True
            cfg = dataclasses.replace(cfg, raw=raw, **overrides)
        cmd_run(cfg, quiet=cfg.quiet)
        return 0
    if args.command == "plot":
        cmd_plot(list(args.results), args.output, quiet=args.quiet)
        return 0
    if args.command == "report":
        cmd_report(list(args.results), args.output, quiet=args.quiet)
        return 0
    raise UsageError(f"unknown command {args.command!r}")


def entrypoint() -> None:
    try:
        sys.exit(main())
    except CrlBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    entrypoint()
