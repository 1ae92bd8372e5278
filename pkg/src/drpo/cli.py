"""``bench`` command line entry point."""

from __future__ import annotations

import argparse
import sys

from .bench import KINDS, MASTER_SEED_ENV, parse_assignments, parse_config, run_experiment
from .nn import ConfigurationError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bench",
        description="Run offline policy-learning experiments on the recommendation simulator.",
        epilog=f"The master seed defaults to ${MASTER_SEED_ENV} (or 0).",
    )
    p.add_argument("kind", nargs="?", choices=KINDS, help="experiment kind")
    p.add_argument("--scenario", help="scenario name, comma list, or 'all'")
    p.add_argument("--algos", help="comma-separated algorithm list")
    p.add_argument("--seeds", type=int, help="number of seeds (indices 0..n-1)")
    p.add_argument("--steps", type=int, help="gradient steps per run")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a field (algo.*, scenario.*, exp.* or a bare name); repeatable")
    p.add_argument("--master-seed", type=int, dest="master_seed")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def _print_table(result) -> None:
    if not result.aggregates:
        return
    label_keys = [k for k in result.aggregates[0] if not k.endswith(("_mean", "_std")) and k != "n_seeds"]
    for rec in result.aggregates:
        label = " ".join(f"{k}={rec[k]}" for k in label_keys)
        print(f"{label}  reward={rec['reward_mean']:.4f}±{rec['reward_std']:.4f}  "
              f"ecpm={rec['ecpm_mean']:.4f}±{rec['ecpm_std']:.4f}  dist={rec['dist_mean']:.3g}  "
              f"n={rec['n_seeds']}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = parse_config(args.config, kind=args.kind, scenario=args.scenario, algos=args.algos,
                            seeds=args.seeds, steps=args.steps, out=args.out,
                            master_seed=args.master_seed, jobs=args.jobs,
                            set=parse_assignments(args.set))
    except ConfigurationError as exc:
        parser.error(str(exc))
    progress = None if args.quiet else (lambda r: print(getattr(r, "run_id", r), flush=True))
    result = run_experiment(spec, progress=progress)
    if not args.quiet:
        _print_table(result)
        if result.out_dir is not None:
            print(f"wrote {result.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
