"""Replay ablation: how much does revisiting old data help each regime?

Runs supervised and SimCLR training with and without full replay of earlier
tasks. Full replay should lift the final average accuracy of both regimes,
and the supervised regime, which forgets more, should gain at least as much.
"""

from common import SIMCLR_SECTION, base_parser, desk_payload, print_table


def main() -> int:
    parser = base_parser(__doc__, default_epochs=60)
    parser.add_argument("--tasks", type=int, default=5, help="number of class-disjoint tasks")
    args = parser.parse_args()
    finals: dict[tuple[str, str], float] = {}
    rows = []
    for regime in ("csup", "cssl"):
        for replay in ("none", "full"):
            payload = desk_payload(
                regime,
                num_tasks=args.tasks,
                epochs=args.epochs,
                seeds=args.seeds,
                output_dir=args.output / f"replay-{regime}-{replay}",
                replay=replay,
                extra=SIMCLR_SECTION if regime == "cssl" else "",
                quiet=args.quiet,
            )
            agg = payload["aggregate"]["lep"]
            finals[(regime, replay)] = agg["final_avg_accuracy"]["mean"]
            rows.append([
                payload["label"],
                replay,
                f"{agg['final_avg_accuracy']['mean']:.4f} +- {agg['final_avg_accuracy']['std']:.4f}",
                f"{agg['forgetting']['mean']:.4f} +- {agg['forgetting']['std']:.4f}",
            ])
    print_table(
        f"replay ablation over {args.tasks} tasks",
        ["condition", "replay", "final avg accuracy", "forgetting"],
        rows,
    )
    for regime in ("csup", "cssl"):
        gain = finals[(regime, "full")] - finals[(regime, "none")]
        print(f"  {regime} replay gain: {gain:+.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
