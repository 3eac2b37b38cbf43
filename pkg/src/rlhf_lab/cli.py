"""Command-line runner: ``run``, ``sweep``, ``gradcheck`` and ``report``.

Exit codes: 0 success, 1 failed gradient check, 2 invalid configuration or
arguments, 3 runtime failure in a pipeline stage.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .config import ConfigError, load_config
from .csvio import read_csv
from .experiment import ARTIFACTS, StageError, run_pipeline, run_sweep
from .gradcheck import DEFAULT_TOL, run_gradchecks

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated numbers, got {text!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlhf-lab", description="Tabular RLHF experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline for one config")
    run.add_argument("config")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    run.add_argument("--output-dir", default=None)

    sweep = sub.add_parser("sweep", help="sweep coverage (kappa) or KL strength (beta)")
    sweep.add_argument("config")
    sweep.add_argument("--axis", required=True, choices=("kappa", "beta"))
    sweep.add_argument("--grid", type=_parse_grid, default=None)
    sweep.add_argument("--jobs", type=int, default=1)
    sweep.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    sweep.add_argument("--output-dir", default=None)

    grad = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--instances", type=int, default=20)

    report = sub.add_parser("report", help="pretty-print a gap_report.csv")
    report.add_argument("path")
    return parser


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.overrides)
    result = run_pipeline(cfg, args.output_dir)
    print(f"wrote {', '.join(ARTIFACTS)} to {result.output_dir}")
    print(f"delta_j={result.gap.delta_j:.6g} j_star={result.gap.j_star:.6g} j_rlhf={result.gap.j_rlhf:.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.jobs < 1:
        raise ConfigError("--jobs", "must be >= 1")
    result = run_sweep(cfg, args.axis, args.grid, args.output_dir, args.jobs)
    print(f"{'value':>10} {'mean_delta_j':>14} {'stderr':>12} {'mean_ood_mse':>14} {'mean_kl':>12}")
    for p in result.points:
        print(f"{p.value:>10.4g} {p.delta_j_mean:>14.6g} {p.delta_j_stderr:>12.4g} "
              f"{p.ood_mse_mean:>14.6g} {p.kl_to_pre_mean:>12.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradchecks(args.seed, args.instances)
    failed = [r for r in results if not r.passed]
    by_op: dict[tuple[str, str], float] = {}
    for r in results:
        key = (r.module, r.operation)
        by_op[key] = max(by_op.get(key, 0.0), r.max_rel_error)
    for (module, op), err in by_op.items():
        status = "ok" if all(r.passed for r in results if (r.module, r.operation) == (module, op)) else "FAIL"
        print(f"{status:4} {module}.{op} max_rel_error={err:.3e}")
    for r in failed:
        print(f"FAILED {r.module}.{r.operation} instance={r.instance} "
              f"worst_coordinate={r.worst_coordinate} rel_error={r.max_rel_error:.3e} tol={DEFAULT_TOL:g}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_report(args) -> int:
    try:
        header, rows = read_csv(args.path)
    except OSError as exc:
        raise ConfigError("path", f"cannot read {args.path}: {exc.strerror}") from None
    width = max(len(h) for h in header)
    for i, row in enumerate(rows):
        if len(rows) > 1:
            print(f"# row {i}")
        for name, value in zip(header, row):
            print(f"{name:<{width}}  {value}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage already; keep --help at 0
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
