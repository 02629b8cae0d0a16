"""Joint-loss sweep: how much self-supervision to mix into supervised training.

Sweeps the SSL weight beta in L = alpha * L_sup + beta * L_ssl with alpha
fixed at 1. beta = 0 recovers plain supervised training; a moderate beta
should improve the final average accuracy over the task sequence.
"""

from common import SIMCLR_SECTION, base_parser, desk_payload, print_table


def main() -> int:
    parser = base_parser(__doc__, default_epochs=60)
    parser.add_argument("--tasks", type=int, default=5, help="number of class-disjoint tasks")
    parser.add_argument("--betas", type=str, default="0,0.2,1.0", help="comma-separated SSL weights")
    args = parser.parse_args()
    rows = []
    for raw in args.betas.split(","):
        beta = float(raw)
        extra = SIMCLR_SECTION + f"\n[joint]\nalpha = 1.0\nbeta = {beta}\n"
        payload = desk_payload(
            "joint",
            num_tasks=args.tasks,
            epochs=args.epochs,
            seeds=args.seeds,
            output_dir=args.output / f"joint-b{beta:g}",
            extra=extra,
            quiet=args.quiet,
        )
        agg = payload["aggregate"]["lep"]
        rows.append([
            f"beta={beta:g}",
            f"{agg['final_avg_accuracy']['mean']:.4f} +- {agg['final_avg_accuracy']['std']:.4f}",
            f"{agg['forgetting']['mean']:.4f} +- {agg['forgetting']['std']:.4f}",
        ])
    print_table(
        f"joint loss sweep over {args.tasks} tasks (alpha = 1)",
        ["condition", "final avg accuracy", "forgetting"],
        rows,
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
