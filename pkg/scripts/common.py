"""Shared preset for the desk-scale experiment scripts.

Every script trains on the same synthetic 10-class corpus with the same
encoder, augmentation, probe, and optimizer settings; conditions differ only
in regime, task count, replay mode, and loss weights. Each condition goes
through the config pipeline so a run leaves the full artifact set (config
echo, accuracy matrices, per-protocol metrics, results.json) in its own
subdirectory, ready for `crlbench plot` and `crlbench report`.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from crlbench.cli import apply_thread_cap, cmd_run
from crlbench.config import parse_config

_TEMPLATE = """\
[dataset]
num_classes = 10
clips_per_class_train = 36
clips_per_class_test = 12
freq_bins = 32
time_frames = 64
noise_sigma = 2.0
seed = 1

[tasks]
num_tasks = {num_tasks}
seed = 3

[augment]
segment_len = 32

[training]
regime = "{regime}"
epochs_per_task = {epochs}
batch_size = 64
lr = 1e-3
weight_decay = 1e-4
replay = "{replay}"
{extra}
[probe]
epochs = 30
lr = 1e-2
batch_size = 64
segment_len = 32

[protocols]
lep = true

[run]
seeds = [{seeds}]
output_dir = "{output_dir}"
"""

SIMCLR_SECTION = """
[objective]
method = "simclr"
temperature = 0.2
"""


def base_parser(description: str, default_epochs: int) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--seeds", type=str, default="11,12,13", help="comma-separated run seeds")
    parser.add_argument("--epochs", type=int, default=default_epochs, help="epochs per task")
    parser.add_argument(
        "--output", type=Path, default=Path("runs"), help="parent directory for per-condition runs"
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress messages")
    return parser


def desk_payload(
    regime: str,
    num_tasks: int,
    epochs: int,
    seeds: str,
    output_dir: Path,
    replay: str = "none",
    extra: str = "",
    quiet: bool = False,
) -> dict:
    """Run one condition at the desk preset and return its results payload."""
    apply_thread_cap()
    text = _TEMPLATE.format(
        regime=regime,
        num_tasks=num_tasks,
        epochs=epochs,
        replay=replay,
        extra=extra,
        seeds=", ".join(s.strip() for s in seeds.split(",")),
        output_dir=output_dir,
    )
    return cmd_run(parse_config(text), quiet=quiet)


def print_table(title: str, header: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    print()
    print(title)
    print("  " + "  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        print("  " + "  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
