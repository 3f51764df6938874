"""Command-line front-end: run experiment presets or the verification battery."""

from __future__ import annotations

import argparse
import sys

from . import harness


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdrelab",
        description="Sequential density-ratio estimation lab: train temporal "
                    "integrators, estimate LLR trajectories, and evaluate SPRT "
                    "early classification against an analytic Gaussian oracle.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment preset")
    run_p.add_argument("--preset", required=True, choices=harness.preset_names())
    run_p.add_argument("--seeds", default=None,
                       help="comma-separated seed list replacing the preset default")
    run_p.add_argument("--out", default="artifacts", help="output directory root")
    run_p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override applied to every variant, "
                            "e.g. data.offset=1.0 or epochs=3")

    sub.add_parser("verify", help="run the oracle-equivalence and invariant battery")

    args = parser.parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_verify()


def _cmd_run(args) -> int:
    configs, default_seeds = harness.preset_configs(args.preset)
    seeds = default_seeds
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
        if not seeds:
            print("error: --seeds parsed to an empty list", file=sys.stderr)
            return 2
    for item in args.override:
        if "=" not in item:
            print(f"error: override {item!r} is not KEY=VALUE", file=sys.stderr)
            return 2
        key, value = item.split("=", 1)
        try:
            harness.apply_override(configs, key.strip(), value.strip())
        except (KeyError, ValueError) as err:
            print(f"error: {err}", file=sys.stderr)
            return 2
    root = harness.run_experiment(configs, seeds, args.out)
    print(f"preset {args.preset}: {len(configs)} variants x {len(seeds)} seeds")
    print(f"artifacts written to {root}")
    print(f"summary: {root / 'summary.json'}")
    return 0


def _cmd_verify() -> int:
    checks = harness.verification_suite()
    failed = 0
    for name, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  ({detail})"
        print(line)
        failed += 0 if ok else 1
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 1


if __name__ == "__main__":
    raise SystemExit(main())
