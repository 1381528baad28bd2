"""Command-line front end: simulate, run, report, check."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from pathlib import Path

from . import bench, checks
from .config import (
    ConfigError,
    ExperimentGrid,
    ScenarioConfig,
    format_config,
    load_config,
)
from .fusion import FusionHyper
from .synthgen import RCT, RWD, generate_dataset, replication_rng


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, help="override base seed")
    p.add_argument("--reps", type=int, help="override replications per cell")
    p.add_argument("--methods", help="comma-separated estimator names")
    p.add_argument("--psi", help="comma-separated hidden-confounding grid")
    p.add_argument("--alpha-r", type=float, dest="alpha_r", help="RCT outcome curvature")
    p.add_argument("--alpha-o", type=float, dest="alpha_o", help="RWD outcome curvature")
    p.add_argument("--mode", choices=("both", "control-only"), default="both")
    p.add_argument("--nco", choices=("n1", "n2", "n3", "none"), default="none")
    p.add_argument("--fast", action="store_true", help="halve reps/bootstrap, widen tolerances")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--phi2", type=float, help="double-shrink prior effect variance")
    p.add_argument("--omega2", type=float, help="double-shrink prior bias variance")
    p.add_argument("--debug-oracle", action="store_true", dest="debug_oracle",
                   help="export latents and potential outcomes too")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rctfusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, desc in (
        ("simulate", "write synthetic RCT/RWD datasets as CSV"),
        ("run", "execute the benchmark grid; write metrics and plots"),
        ("report", "summarize a finished run against the acceptance thresholds"),
        ("check", "run the grid and assert the acceptance-style checks"),
    ):
        p = sub.add_parser(name, help=desc)
        _add_common(p)
    return parser


def resolve_grid(args) -> ExperimentGrid:
    grid = load_config(args.config) if args.config else ExperimentGrid()
    sc = grid.scenario
    overrides = {}
    for key in ("seed", "reps", "alpha_r", "alpha_o"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.fast:
        overrides["reps"] = max(1, overrides.get("reps", sc.reps) // 2)
    if overrides:
        sc = dataclasses.replace(sc, **overrides)
    grid_kwargs = {"scenario": sc, "alpha_pairs": grid.alpha_pairs, "methods": grid.methods}
    if args.psi:
        try:
            grid_kwargs["psi_values"] = tuple(float(t) for t in args.psi.split(",") if t.strip())
        except ValueError:
            raise ConfigError(f"--psi: cannot parse {args.psi!r}") from None
    else:
        grid_kwargs["psi_values"] = grid.psi_values
    if args.methods:
        grid_kwargs["methods"] = tuple(t.strip() for t in args.methods.split(",") if t.strip())
    return ExperimentGrid(**grid_kwargs)


def resolve_hyper(args) -> FusionHyper:
    kwargs = {}
    if args.fast:
        kwargs["bootstrap_b"] = 100
    if args.nco != "none":
        kwargs["nco_column"] = args.nco
    if args.phi2 is not None:
        kwargs["double_shrink_phi2"] = args.phi2
    if args.omega2 is not None:
        kwargs["double_shrink_omega2"] = args.omega2
    return FusionHyper(**kwargs)


def cmd_simulate(args) -> int:
    grid = resolve_grid(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for psi in grid.psi_values:
        cfg = grid.cell(psi)
        rng = replication_rng(cfg, rep=0)
        for source in (RCT, RWD):
            data = generate_dataset(cfg, source, rng)
            path = out / f"{source}_psi{psi:g}.csv"
            path.write_text(data.to_csv(debug_oracle=args.debug_oracle), encoding="utf-8")
            print(f"wrote {path} ({data.n} rows)")
    return 0


def _progress(msg: str) -> None:
    print(msg, flush=True)


def cmd_run(args) -> int:
    grid = resolve_grid(args)
    hyper = resolve_hyper(args)
    bench.validate_methods(grid.methods, hyper)
    result = bench.run_grid(grid, hyper, mode=args.mode, threads=args.threads, progress=_progress)
    written = bench.emit(result, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def _rows_from_csv(out: Path) -> bench.GridResult:
    def read(path, alpha_cols=False):
        rows = []
        if not path.exists():
            return rows
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                def num(key, default=math.nan):
                    val = rec.get(key, "")
                    return float(val) if val not in ("", None) else default

                rows.append(
                    bench.MetricsRow(
                        method=rec.get("method", "procova"),
                        psi=num("psi", 0.0),
                        alpha_o=num("alpha_o", 0.0),
                        alpha_r=num("alpha_r", 0.0),
                        rbias=num("rBias"),
                        rrmse=num("rrmse", num("rRMSE")),
                        coverage=num("coverage"),
                        rel_ci_length=num("rel_ci_length"),
                        mean_weight=None if rec.get("mean_weight", "") == "" else float(rec["mean_weight"]),
                        failures=int(rec.get("failures", 0) or 0),
                        rmse=math.nan,
                        mean_tau=math.nan,
                    )
                )
        return rows

    rows = read(out / "metrics.csv")
    table2 = read(out / "table2.csv")
    grid = load_config(out / "config.txt") if (out / "config.txt").exists() else ExperimentGrid()
    return bench.GridResult(rows=rows, table2=table2, oracle_bias={}, grid=grid)


def cmd_report(args) -> int:
    out = Path(args.out)
    if not (out / "metrics.csv").exists():
        print(f"no metrics.csv under {out}; run `rctfusion run --out {out}` first", file=sys.stderr)
        return 2
    result = _rows_from_csv(out)
    outcomes = checks.evaluate(result, fast=args.fast)
    text = checks.render(outcomes)
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    resolved = format_config(resolve_grid(args))
    (out / "resolved_config.txt").write_text(resolved, encoding="utf-8")
    print(text)
    print(f"wrote {out / 'report.txt'} and {out / 'resolved_config.txt'}")
    return 0


def cmd_check(args) -> int:
    grid = resolve_grid(args)
    hyper = resolve_hyper(args)
    bench.validate_methods(grid.methods, hyper)
    result = bench.run_grid(grid, hyper, mode=args.mode, threads=args.threads, progress=_progress)
    bench.emit(result, args.out)
    outcomes = checks.evaluate(result, fast=args.fast)
    print(checks.render(outcomes))
    return 0 if all(c.passed for c in outcomes) else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {
        "simulate": cmd_simulate,
        "run": cmd_run,
        "report": cmd_report,
        "check": cmd_check,
    }[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
