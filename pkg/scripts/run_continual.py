"""Continual trend experiment: supervised vs SimCLR across class-disjoint tasks.

Trains both regimes through the same task sequence and compares the final
average probe accuracy and forgetting. The self-supervised encoder is
expected to end higher and forget less than the supervised one.
"""

from common import SIMCLR_SECTION, base_parser, desk_payload, print_table


def main() -> int:
    parser = base_parser(__doc__, default_epochs=60)
    parser.add_argument("--tasks", type=int, default=5, help="number of class-disjoint tasks")
    args = parser.parse_args()
    rows = []
    result_paths = []
    for regime in ("csup", "cssl"):
        out = args.output / f"continual-{regime}"
        payload = desk_payload(
            regime,
            num_tasks=args.tasks,
            epochs=args.epochs,
            seeds=args.seeds,
            output_dir=out,
            extra=SIMCLR_SECTION if regime == "cssl" else "",
            quiet=args.quiet,
        )
        agg = payload["aggregate"]["lep"]
        rows.append([
            payload["label"],
            f"{agg['final_avg_accuracy']['mean']:.4f} +- {agg['final_avg_accuracy']['std']:.4f}",
            f"{agg['forgetting']['mean']:.4f} +- {agg['forgetting']['std']:.4f}",
        ])
        result_paths.append(out / "results.json")
    print_table(
        f"continual learning over {args.tasks} tasks",
        ["condition", "final avg accuracy", "forgetting"],
        rows,
    )
    joined = " ".join(str(p) for p in result_paths)
    print(f"\nnext: crlbench plot {joined}")
    print(f"      crlbench report {joined}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
