"""Offline sanity check: supervised vs SimCLR encoders on the full corpus.

Trains each encoder once on all ten classes (a single task) and reports the
linear-probe accuracy of the frozen representation. Both regimes should land
well above the 0.10 chance level, with the supervised encoder at or slightly
above the self-supervised one.
"""

from common import SIMCLR_SECTION, base_parser, desk_payload, print_table


def main() -> int:
    args = base_parser(__doc__, default_epochs=20).parse_args()
    rows = []
    for regime in ("csup", "cssl"):
        payload = desk_payload(
            regime,
            num_tasks=1,
            epochs=args.epochs,
            seeds=args.seeds,
            output_dir=args.output / f"offline-{regime}",
            extra=SIMCLR_SECTION if regime == "cssl" else "",
            quiet=args.quiet,
        )
        acc = payload["aggregate"]["lep"]["final_avg_accuracy"]
        rows.append([payload["label"], f"{acc['mean']:.4f} +- {acc['std']:.4f}"])
    print_table("offline probe accuracy (chance 0.10)", ["condition", "accuracy"], rows)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
