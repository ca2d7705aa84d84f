"""Command line entry point: ``implicit-lra run|tune|gen-synthetic``."""
import argparse
import sys

from .bench import ExperimentConfig, run_experiment, save_dataset, synthetic_low_rank, tune
from .entry_functions import ConfigurationError


def _write(text, path):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def cmd_run(args):
    cfg = ExperimentConfig.load(args.config)
    report = run_experiment(cfg, keep_projections=args.projection_out is not None)
    _write(report.to_csv(), args.out)
    if args.ledger_out:
        _write(report.ledger_text(), args.ledger_out)
    if args.projection_out:
        import numpy as np
        last = max(report.projections)
        np.savetxt(args.projection_out, report.projections[last], delimiter=",", fmt="%.17g")
    return 0


def cmd_tune(args):
    cfg = ExperimentConfig.load(args.config)
    result, budget = tune(cfg, args.budget_ratio)
    print(f"# budget_words={budget!r}")
    print("k,r")
    for k, r in result.items():
        print(f"{k},{'NA' if r is None else r}")
    return 0 if all(r is not None for r in result.values()) else 1


def cmd_gen(args):
    A = synthetic_low_rank(args.n, args.d, args.rank, args.noise, args.seed)
    fmt = args.format or ("binary-f64" if args.out.endswith(".bin") else "csv-dense")
    save_dataset(A, args.out, fmt)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="implicit-lra",
                                 description="Approximate PCA of f(sum of server matrices).")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config and emit the CSV report")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="CSV path (default stdout)")
    run.add_argument("--ledger-out", help="write every run's message ledger here")
    run.add_argument("--projection-out", help="write the last run's d x k basis as CSV")
    run.set_defaults(func=cmd_run)

    tn = sub.add_parser("tune", help="largest r per k whose predicted words fit the budget")
    tn.add_argument("--budget-ratio", type=float, required=True)
    tn.add_argument("--config", required=True)
    tn.set_defaults(func=cmd_tune)

    gen = sub.add_parser("gen-synthetic", help="write a low-rank plus noise matrix")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--d", type=int, required=True)
    gen.add_argument("--rank", type=int, required=True)
    gen.add_argument("--noise", type=float, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--format", choices=["csv-dense", "binary-f64"])
    gen.set_defaults(func=cmd_gen)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
