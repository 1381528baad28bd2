"""Monte Carlo benchmark: grid runner, comparison metrics, CSV/plot emission.

Replications are pure functions of (scenario, cell, rep); every random stream
derives from those three, so results are byte-identical regardless of worker
count or scheduling.
"""

from __future__ import annotations

import csv
import math
import os
import zlib
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import fusion
from .config import ConfigError, ExperimentGrid, ScenarioConfig, format_config
from .estimate import (
    AteEstimate,
    baseline_estimate,
    fit_baseline,
    normal_ci,
    stratified_aipw,
)
from .fusion import FusionDiagnostics, FusionHyper
from .nuisance import fit_propensity, outcome_library
from .synthgen import RCT, RWD, concat, generate_dataset, true_ate

ORACLE_PREPASS_FACTOR = 10

# Registry of estimators runnable by name.  Each entry names the shared
# resources a method needs so replications only compute what is used.
METHOD_NAMES = (
    "tau_r",
    "tau_o",
    "oracle",
    "mse_minimizing",
    "anchored_thresholding",
    "test_then_pool",
    "shrink_s1",
    "shrink_s2",
    "double_shrink",
    "experiment_grounding",
    "confounding_function",
    "power_likelihood",
    "experiment_selector",
    "experiment_selector_n1",
    "experiment_selector_n2",
    "experiment_selector_n3",
    "procova",
    "nco_effect",
)

_SELECTOR_FIXED_NCO = {
    "experiment_selector_n1": "n1",
    "experiment_selector_n2": "n2",
    "experiment_selector_n3": "n3",
}


def _selector_nco(name: str, hyper: FusionHyper) -> str | None:
    # The plain selector honours the configured NCO column (default: none);
    # the suffixed variants pin theirs.
    if name == "experiment_selector":
        return hyper.nco_column
    return _SELECTOR_FIXED_NCO[name]


def validate_methods(methods, hyper: FusionHyper) -> None:
    unknown = [m for m in methods if m not in METHOD_NAMES]
    if unknown:
        raise ConfigError(
            f"unknown method name(s) {unknown}; registry: {', '.join(METHOD_NAMES)}"
        )
    if "double_shrink" in methods and (
        hyper.double_shrink_phi2 is None or hyper.double_shrink_omega2 is None
    ):
        raise ConfigError(
            "double_shrink needs double_shrink_phi2 and double_shrink_omega2 "
            "(pass --phi2/--omega2); estimating them is out of scope"
        )


@dataclass
class RepOutcome:
    tau: float = math.nan
    lo: float = math.nan
    hi: float = math.nan
    weight: float = math.nan
    aux: float = math.nan
    failed: bool = True


def _method_rng(cfg: ScenarioConfig, cell: int, rep: int, label: str) -> np.random.Generator:
    salt = zlib.crc32(label.encode())
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, cell, rep, salt)))


def _outcome(est: AteEstimate, diag: FusionDiagnostics | None = None) -> RepOutcome:
    weight = math.nan
    aux = math.nan
    if diag is not None:
        if diag.learning_weight is not None:
            weight = float(diag.learning_weight)
        aux = float(diag.extras.get("aux_metric", math.nan))
    return RepOutcome(
        tau=est.tau_hat, lo=est.ci[0], hi=est.ci[1], weight=weight, aux=aux, failed=False
    )


_FAILURES = (ValueError, RuntimeError, KeyError, np.linalg.LinAlgError)


def run_replication(
    cfg: ScenarioConfig,
    cell: int,
    rep: int,
    methods: tuple[str, ...],
    hyper: FusionHyper,
    mode: str,
    true_delta: float,
) -> dict[str, RepOutcome]:
    """One replication: generate, fit, run every requested method."""
    rng_data = _method_rng(cfg, cell, rep, "data")
    rct = generate_dataset(cfg, RCT, rng_data)
    rwd = generate_dataset(cfg, RWD, rng_data)
    quadratic = cfg.alpha_r != 0.0 or cfg.alpha_o != 0.0
    candidates = outcome_library(include_squares=quadratic, cv_folds=hyper.cv_folds)

    out: dict[str, RepOutcome] = {m: RepOutcome() for m in methods}
    try:
        fits_r = fit_baseline(rct, candidates, _method_rng(cfg, cell, rep, "fits_rct"))
        fits_o = fit_baseline(rwd, candidates, _method_rng(cfg, cell, rep, "fits_rwd"))
        est_r = baseline_estimate(rct, fits_r, "tau_r")
        est_o = baseline_estimate(rwd, fits_o, "tau_o")
    except _FAILURES:
        return out  # baselines failed: every method is recorded as failed

    shared: dict[str, object] = {}

    def pair_draws():
        if "pair" not in shared:
            shared["pair"] = fusion.pair_bootstrap_draws(
                rct, rwd, fits_r, fits_o, hyper.bootstrap_b, _method_rng(cfg, cell, rep, "pair_boot")
            )
        return shared["pair"]

    def strata_draws():
        if "strata" not in shared:
            strata, fits = stratified_aipw(
                rct, rwd, candidates, _method_rng(cfg, cell, rep, "strata_fit"), return_fits=True
            )
            draws = fusion.strata_bootstrap_draws(
                rct, rwd, fits, hyper.bootstrap_b, _method_rng(cfg, cell, rep, "strata_boot")
            )
            shared["strata"] = (strata, draws)
        return shared["strata"]

    selector_methods = ("experiment_selector",) + tuple(_SELECTOR_FIXED_NCO)

    def selector_results():
        if "selector" not in shared:
            ncos = tuple(
                dict.fromkeys(_selector_nco(m, hyper) for m in methods if m in selector_methods)
            )
            shared["selector"] = fusion.experiment_selector(
                rct,
                rwd,
                hyper,
                candidates,
                _method_rng(cfg, cell, rep, "selector"),
                mode=mode,
                ncos=ncos,
            )
        return shared["selector"]

    for name in methods:
        try:
            if name == "tau_r":
                out[name] = _outcome(est_r)
            elif name == "tau_o":
                out[name] = _outcome(est_o)
            elif name == "oracle":
                out[name] = _outcome(oracle(est_r, est_o, true_delta))
            elif name == "mse_minimizing":
                out[name] = _outcome(*fusion.mse_minimizing(est_r, est_o, pair_draws()))
            elif name == "anchored_thresholding":
                out[name] = _outcome(*fusion.anchored_thresholding(est_r, est_o, hyper, pair_draws()))
            elif name == "test_then_pool":
                out[name] = _outcome(*fusion.test_then_pool(est_r, est_o, hyper))
            elif name in ("shrink_s1", "shrink_s2"):
                strata, draws = strata_draws()
                fn = fusion.shrink_s1 if name == "shrink_s1" else fusion.shrink_s2
                out[name] = _outcome(*fn(strata, hyper, draws, rct.n + rwd.n))
            elif name == "double_shrink":
                strata, draws = strata_draws()
                out[name] = _outcome(fusion.double_shrink(strata, hyper, draws, rct.n + rwd.n))
            elif name == "experiment_grounding":
                out[name] = _outcome(
                    *fusion.experiment_grounding(
                        rct, rwd, _method_rng(cfg, cell, rep, name), b=hyper.bootstrap_b
                    )
                )
            elif name == "confounding_function":
                out[name] = _outcome(
                    *fusion.confounding_function(
                        rct, rwd, _method_rng(cfg, cell, rep, name), b=hyper.bootstrap_b
                    )
                )
            elif name == "power_likelihood":
                out[name] = _outcome(
                    *fusion.power_likelihood(
                        rct,
                        rwd,
                        hyper,
                        _method_rng(cfg, cell, rep, name),
                        mode=mode,
                        quadratic=quadratic,
                    )
                )
            elif name in selector_methods:
                res = selector_results()[_selector_nco(name, hyper)]
                out[name] = _outcome(res.estimate, res.diagnostics)
            elif name == "procova":
                out[name] = _outcome(
                    *fusion.procova(rct, rwd, candidates, _method_rng(cfg, cell, rep, name))
                )
            elif name == "nco_effect":
                nco = hyper.nco_column or "n1"
                pooled = concat([rct, rwd])
                prop = fit_propensity(pooled)
                out[name] = _outcome(
                    fusion.nco_effect(
                        pooled,
                        nco,
                        prop,
                        outcome_library(cv_folds=hyper.cv_folds),
                        _method_rng(cfg, cell, rep, name),
                    )
                )
        except _FAILURES:
            out[name] = RepOutcome()
    return out


def oracle(est_r: AteEstimate, est_o: AteEstimate, true_delta: float) -> AteEstimate:
    """Inverse-variance pool of the RCT estimate and the debiased RWD estimate."""
    if est_r.var_hat <= 0 or est_o.var_hat <= 0:
        raise ValueError("oracle pooling needs positive baseline variances")
    tau_o_fixed = est_o.tau_hat - true_delta
    var = 1.0 / (1.0 / est_r.var_hat + 1.0 / est_o.var_hat)
    tau = var * (est_r.tau_hat / est_r.var_hat + tau_o_fixed / est_o.var_hat)
    return AteEstimate(
        tau_hat=tau,
        var_hat=var,
        n=est_r.n + est_o.n,
        ci=normal_ci(tau, var),
        method="oracle",
        influence=None,
    )


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    """One (method, cell) of the benchmark output."""

    method: str
    psi: float
    alpha_o: float
    alpha_r: float
    rbias: float
    rrmse: float
    coverage: float
    rel_ci_length: float
    mean_weight: float | None
    failures: int
    rmse: float
    mean_tau: float
    mean_aux: float = math.nan


def _truth_for(method: str, cfg: ScenarioConfig) -> float:
    return 0.0 if method == "nco_effect" else true_ate(cfg)


def aggregate_cell(
    cfg: ScenarioConfig,
    methods: tuple[str, ...],
    outcomes: list[dict[str, RepOutcome]],
) -> list[MetricsRow]:
    """Fold per-replication outcomes into the benchmark's comparison metrics."""
    truth = true_ate(cfg)

    def arrays(name):
        ok = np.array([not o[name].failed for o in outcomes])
        tau = np.array([o[name].tau for o in outcomes])
        lo = np.array([o[name].lo for o in outcomes])
        hi = np.array([o[name].hi for o in outcomes])
        wt = np.array([o[name].weight for o in outcomes])
        aux = np.array([o[name].aux for o in outcomes])
        return ok, tau, lo, hi, wt, aux

    ok_r, tau_r, lo_r, hi_r, _, _ = arrays("tau_r")
    if not ok_r.any():
        raise RuntimeError("the RCT-only baseline failed on every replication")
    rmse_r = float(np.sqrt(np.mean((tau_r[ok_r] - truth) ** 2)))
    sd_r = float(np.std(tau_r[ok_r], ddof=1)) if ok_r.sum() > 1 else math.nan
    mean_len_r = float(np.mean(hi_r[ok_r] - lo_r[ok_r]))

    if "tau_o" in methods:
        ok_o, tau_o, _, _, _, _ = arrays("tau_o")
        delta = float(np.mean(tau_o[ok_o]) - truth) if ok_o.any() else math.nan
    else:
        delta = math.nan
    rbias = delta / sd_r if sd_r > 0 else math.nan

    rows = []
    for name in methods:
        ok, tau, lo, hi, wt, aux = arrays(name)
        m_truth = _truth_for(name, cfg)
        n_ok = int(ok.sum())
        if n_ok:
            rmse = float(np.sqrt(np.mean((tau[ok] - m_truth) ** 2)))
            coverage = float(np.mean((lo[ok] <= m_truth) & (m_truth <= hi[ok])))
            rel_len = float(np.mean(hi[ok] - lo[ok]) / mean_len_r)
            mean_tau = float(np.mean(tau[ok]))
            w_ok = wt[ok]
            mean_weight = float(np.nanmean(w_ok)) if np.any(~np.isnan(w_ok)) else None
            aux_ok = aux[ok]
            mean_aux = float(np.nanmean(aux_ok)) if np.any(~np.isnan(aux_ok)) else math.nan
        else:
            rmse = coverage = rel_len = mean_tau = mean_aux = math.nan
            mean_weight = None
        rows.append(
            MetricsRow(
                method=name,
                psi=cfg.psi,
                alpha_o=cfg.alpha_o,
                alpha_r=cfg.alpha_r,
                rbias=rbias,
                rrmse=rmse / rmse_r if rmse_r > 0 else math.nan,
                coverage=coverage,
                rel_ci_length=rel_len,
                mean_weight=mean_weight,
                failures=len(outcomes) - n_ok,
                rmse=rmse,
                mean_tau=mean_tau,
                mean_aux=mean_aux,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------


def _rep_task(args):
    cfg, cell, rep, methods, hyper, mode, true_delta = args
    return (cell, rep, run_replication(cfg, cell, rep, methods, hyper, mode, true_delta))


def _run_cell_tasks(tasks, threads: int):
    if threads <= 1:
        results = [_rep_task(t) for t in tasks]
    else:
        ctx = get_context("fork")
        chunk = max(1, len(tasks) // (threads * 8))
        with ctx.Pool(processes=threads) as pool:
            results = list(pool.imap_unordered(_rep_task, tasks, chunksize=chunk))
    results.sort(key=lambda r: (r[0], r[1]))
    return results


def rwd_bias_prepass(
    cfg: ScenarioConfig,
    cell: int,
    hyper: FusionHyper,
    threads: int = 1,
    factor: int = ORACLE_PREPASS_FACTOR,
) -> float:
    """Dedicated MC estimate of E[tau_o] - truth with factor x reps."""
    reps = cfg.reps * factor
    tasks = [(cfg, cell, rep, ("tau_o",), hyper, "both", 0.0) for rep in range(reps)]
    results = _run_cell_tasks(tasks, threads)
    taus = np.array([r[2]["tau_o"].tau for r in results if not r[2]["tau_o"].failed])
    if taus.size == 0:
        raise RuntimeError("oracle pre-pass: every replication failed")
    return float(np.mean(taus) - true_ate(cfg))


def run_cell(
    cfg: ScenarioConfig,
    methods: tuple[str, ...],
    hyper: FusionHyper,
    cell: int = 0,
    mode: str = "both",
    true_delta: float = 0.0,
    threads: int = 1,
) -> list[MetricsRow]:
    """Run one grid cell (one scenario) over cfg.reps replications."""
    validate_methods(methods, hyper)
    tasks = [(cfg, cell, rep, methods, hyper, mode, true_delta) for rep in range(cfg.reps)]
    results = _run_cell_tasks(tasks, threads)
    return aggregate_cell(cfg, methods, [r[2] for r in results])


@dataclass
class GridResult:
    rows: list[MetricsRow]
    table2: list[MetricsRow]
    oracle_bias: dict[float, float]
    grid: ExperimentGrid


# Cell-salt blocks: the main psi sweep, the curvature sweep, and the oracle
# pre-pass must never share replication streams.
_CELL_MAIN, _CELL_ALPHA, _CELL_PREPASS = 0, 1000, 2000


def run_grid(
    grid: ExperimentGrid,
    hyper: FusionHyper,
    mode: str = "both",
    threads: int = 1,
    progress=None,
) -> GridResult:
    """Execute the psi sweep plus the curvature sweep for the prognostic method."""
    validate_methods(grid.methods, hyper)
    say = progress or (lambda msg: None)

    oracle_bias: dict[float, float] = {}
    if "oracle" in grid.methods:
        for i, psi in enumerate(grid.psi_values):
            cfg = grid.cell(psi)
            oracle_bias[psi] = rwd_bias_prepass(cfg, _CELL_PREPASS + i, hyper, threads)
            say(f"pre-pass psi={psi}: delta={oracle_bias[psi]:+.4f}")

    rows: list[MetricsRow] = []
    for i, psi in enumerate(grid.psi_values):
        cfg = grid.cell(psi)
        rows.extend(
            run_cell(
                cfg,
                grid.methods,
                hyper,
                cell=_CELL_MAIN + i,
                mode=mode,
                true_delta=oracle_bias.get(psi, 0.0),
                threads=threads,
            )
        )
        say(f"cell psi={psi} done")

    table2: list[MetricsRow] = []
    if "procova" in grid.methods and grid.alpha_pairs:
        for j, (alpha_o, alpha_r) in enumerate(grid.alpha_pairs):
            cfg = grid.alpha_cell(alpha_o, alpha_r)
            table2.extend(
                run_cell(
                    cfg,
                    ("tau_r", "procova"),
                    hyper,
                    cell=_CELL_ALPHA + j,
                    mode=mode,
                    threads=threads,
                )
            )
            say(f"alpha cell (alpha_o={alpha_o}, alpha_r={alpha_r}) done")
    return GridResult(rows=rows, table2=table2, oracle_bias=oracle_bias, grid=grid)


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

METRICS_HEADER = (
    "method",
    "psi",
    "rBias",
    "rRMSE",
    "coverage",
    "rel_ci_length",
    "mean_weight",
    "failures",
)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def write_metrics_csv(rows: list[MetricsRow], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r.method,
                    _fmt(r.psi),
                    _fmt(r.rbias),
                    _fmt(r.rrmse),
                    _fmt(r.coverage),
                    _fmt(r.rel_ci_length),
                    _fmt(r.mean_weight),
                    r.failures,
                ]
            )


def write_table2_csv(table2: list[MetricsRow], path: Path) -> None:
    rows = [r for r in table2 if r.method == "procova"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("alpha_o", "alpha_r", "rrmse", "coverage"))
        for r in rows:
            writer.writerow([_fmt(r.alpha_o), _fmt(r.alpha_r), _fmt(r.rrmse), _fmt(r.coverage)])


def emit(result: GridResult, out_dir) -> list[Path]:
    """Write metrics.csv, table2.csv, the resolved config, and the figures."""
    if not result.rows:
        raise ConfigError("no methods produced rows; nothing to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "metrics.csv"
    write_metrics_csv(result.rows, path)
    written.append(path)

    if result.table2:
        path = out / "table2.csv"
        write_table2_csv(result.table2, path)
        written.append(path)

    if result.oracle_bias:
        path = out / "oracle_bias.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("psi", "true_delta"))
            for psi, d in result.oracle_bias.items():
                writer.writerow([_fmt(psi), _fmt(d)])
        written.append(path)

    path = out / "config.txt"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(result.grid))
    written.append(path)

    written.extend(plot_figures(result.rows, out))
    return written


def plot_figures(rows: list[MetricsRow], out: Path) -> list[Path]:
    """One SVG per figure family, deterministic across reruns."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "rctfusion"

    by_method: dict[str, list[MetricsRow]] = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r)
    for rlist in by_method.values():
        rlist.sort(key=lambda r: r.psi)

    families = [
        ("rrmse", "relative RMSE", lambda r: r.rrmse, (0.0, 2.5), True),
        ("coverage", "coverage of 95% CI", lambda r: r.coverage, (0.0, 1.0), False),
        ("ci_length", "relative CI length", lambda r: r.rel_ci_length, (0.0, 2.5), True),
    ]
    written = []
    for fname, ylabel, getter, ylim, refline in families:
        fig, ax = plt.subplots(figsize=(7.0, 4.5))
        for method, rlist in sorted(by_method.items()):
            xs = [r.rbias for r in rlist]
            ys = [getter(r) for r in rlist]
            if all(y is None or (isinstance(y, float) and math.isnan(y)) for y in ys):
                continue
            style = "--" if method == "oracle" else "-"
            ax.plot(xs, ys, style, marker="o", markersize=3, label=method)
        if refline:
            ax.axhline(1.0, color="grey", lw=0.8, zorder=0)
        if fname == "coverage":
            ax.axhline(0.95, color="grey", lw=0.8, zorder=0)
        ax.set_xlabel("relative bias of the RWD estimator (rBias)")
        ax.set_ylabel(ylabel)
        ax.set_xlim(-0.5, 12.0)
        ax.set_ylim(*ylim)
        ax.legend(fontsize=7, ncol=2)
        path = out / f"{fname}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)

    weight_methods = [
        m
        for m in ("mse_minimizing", "power_likelihood", "experiment_selector",
                  "experiment_selector_n1", "experiment_selector_n2", "experiment_selector_n3")
        if m in by_method
    ]
    if weight_methods:
        fig, ax = plt.subplots(figsize=(7.0, 4.5))
        for method in weight_methods:
            rlist = by_method[method]
            xs = [r.rbias for r in rlist]
            ys = [r.mean_weight if r.mean_weight is not None else math.nan for r in rlist]
            ax.plot(xs, ys, "-", marker="o", markersize=3, label=method)
        ax.set_xlabel("relative bias of the RWD estimator (rBias)")
        ax.set_ylabel("mean learning weight")
        ax.set_xlim(-0.5, 12.0)
        ax.set_ylim(0.0, 1.05)
        ax.legend(fontsize=7)
        path = out / "weights.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
