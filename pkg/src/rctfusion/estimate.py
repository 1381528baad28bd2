"""Doubly robust ATE estimation, stratified estimates, and the shared bootstrap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nuisance import (
    NuisanceFit,
    fit_outcome_pair,
    fit_propensity,
    refit_outcome,
    refit_propensity,
)
from .synthgen import Dataset

Z95 = 1.96
K_STRATA = 4


@dataclass
class AteEstimate:
    """Point estimate with variance and a 95% interval.

    ``influence`` holds the centered per-unit contributions when the method
    admits them (None for bootstrap-only methods, where ``var_hat`` is the
    bootstrap variance).
    """

    tau_hat: float
    var_hat: float
    n: int
    ci: tuple[float, float]
    method: str
    influence: np.ndarray | None = None

    def covers(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]

    @property
    def ci_length(self) -> float:
        return self.ci[1] - self.ci[0]


def normal_ci(tau: float, var: float) -> tuple[float, float]:
    half = Z95 * float(np.sqrt(max(var, 0.0)))
    return (tau - half, tau + half)


def aipw_summands(
    data: Dataset,
    m0: NuisanceFit,
    m1: NuisanceFit,
    prop: NuisanceFit,
    outcome_col: str = "y",
) -> np.ndarray:
    """Per-unit augmented inverse-propensity-weighted contributions."""
    e = prop.predict(data)
    if np.any(e <= 0.0) or np.any(e >= 1.0):
        raise RuntimeError("unclipped propensity of 0 or 1 reached the weighting step")
    y = data.column(outcome_col)
    a = data.a
    m0v = m0.predict(data)
    m1v = m1.predict(data)
    return a * (y - m1v) / e - (1.0 - a) * (y - m0v) / (1.0 - e) + (m1v - m0v)


def aipw(
    data: Dataset,
    m0: NuisanceFit,
    m1: NuisanceFit,
    prop: NuisanceFit,
    method: str = "aipw",
    outcome_col: str = "y",
) -> AteEstimate:
    """AIPW point estimate with empirical sandwich variance."""
    summand = aipw_summands(data, m0, m1, prop, outcome_col)
    tau = float(summand.mean())
    influence = summand - tau
    var = float(np.sum(influence**2)) / data.n**2
    return AteEstimate(
        tau_hat=tau,
        var_hat=var,
        n=data.n,
        ci=normal_ci(tau, var),
        method=method,
        influence=influence,
    )


@dataclass
class BaselineFits:
    """Frozen nuisance fits of one dataset, reusable across bootstrap draws."""

    m0: NuisanceFit
    m1: NuisanceFit
    prop: NuisanceFit

    def refit(self, data: Dataset) -> "BaselineFits":
        return BaselineFits(
            m0=refit_outcome(self.m0, data, 0),
            m1=refit_outcome(self.m1, data, 1),
            prop=refit_propensity(self.prop, data),
        )


def fit_baseline(
    data: Dataset,
    candidates,
    rng: np.random.Generator,
    prop_fit: NuisanceFit | None = None,
) -> BaselineFits:
    """Fit per-arm outcome models (CV-selected) plus a propensity model."""
    m0, m1 = fit_outcome_pair(data, candidates, rng)
    return BaselineFits(m0=m0, m1=m1, prop=prop_fit or fit_propensity(data))


def baseline_estimate(data: Dataset, fits: BaselineFits, method: str = "aipw") -> AteEstimate:
    return aipw(data, fits.m0, fits.m1, fits.prop, method=method)


def fit_and_aipw(
    data: Dataset,
    candidates,
    rng: np.random.Generator,
    method: str = "aipw",
    prop_fit: NuisanceFit | None = None,
) -> AteEstimate:
    return baseline_estimate(data, fit_baseline(data, candidates, rng, prop_fit), method)


# ---------------------------------------------------------------------------
# Stratification (sign of x1 crossed with sign of x3, K = 4)
# ---------------------------------------------------------------------------


def stratum_labels(data: Dataset) -> np.ndarray:
    return (2 * (data.x1 > 0.0) + (data.x3 > 0.0)).astype(int)


@dataclass
class StrataEstimates:
    """Per-stratum ATE vectors for the RCT and RWD with diagonal variances."""

    tau_r: np.ndarray
    tau_o: np.ndarray
    sigma2_r: np.ndarray
    sigma2_o: np.ndarray
    w: np.ndarray
    counts_r: np.ndarray
    counts_o: np.ndarray

    @property
    def k(self) -> int:
        return self.tau_r.shape[0]

    def __post_init__(self):
        if self.k < 3:
            raise ValueError(f"shrinkage needs K >= 3 strata, got {self.k}")
        if np.any(self.sigma2_r <= 0.0) or np.any(self.sigma2_o <= 0.0):
            raise ValueError("all stratum variances must be positive")
        if abs(self.w.sum() - 1.0) > 1e-12:
            raise ValueError("stratum weights must sum to 1")


def stratified_aipw(
    rct: Dataset,
    rwd: Dataset,
    candidates,
    rng: np.random.Generator,
    min_per_stratum: int = 10,
    return_fits: bool = False,
):
    """Independent AIPW per (stratum, source); weights are RCT stratum shares.

    With ``return_fits`` the per-(stratum, source) nuisance fits come back
    too, so bootstrap draws can refit coefficients under frozen families.
    """
    lab = {"rct": stratum_labels(rct), "rwd": stratum_labels(rwd)}
    data = {"rct": rct, "rwd": rwd}
    tau = {s: np.empty(K_STRATA) for s in data}
    s2 = {s: np.empty(K_STRATA) for s in data}
    cnt = {s: np.empty(K_STRATA, dtype=int) for s in data}
    fits = {s: [] for s in data}
    for k in range(K_STRATA):
        for src in ("rct", "rwd"):
            idx = np.flatnonzero(lab[src] == k)
            if idx.size < min_per_stratum:
                raise ValueError(f"stratum {k} has {idx.size} {src} units (< {min_per_stratum})")
            sub = data[src].take(idx)
            if np.unique(sub.a).size < 2:
                raise ValueError(f"stratum {k} has a single treatment arm in the {src}")
            bf = fit_baseline(sub, candidates, rng)
            est = baseline_estimate(sub, bf, method=f"stratum{k}_{src}")
            tau[src][k] = est.tau_hat
            s2[src][k] = est.var_hat
            cnt[src][k] = idx.size
            fits[src].append(bf)
    strata = StrataEstimates(
        tau_r=tau["rct"],
        tau_o=tau["rwd"],
        sigma2_r=s2["rct"],
        sigma2_o=s2["rwd"],
        w=cnt["rct"] / cnt["rct"].sum(),
        counts_r=cnt["rct"],
        counts_o=cnt["rwd"],
    )
    return (strata, fits) if return_fits else strata


# ---------------------------------------------------------------------------
# Nonparametric bootstrap
# ---------------------------------------------------------------------------


def _resample_indices(n: int, labels: np.ndarray | None, rng: np.random.Generator) -> np.ndarray:
    if labels is None:
        return rng.integers(0, n, size=n)
    parts = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        parts.append(idx[rng.integers(0, idx.size, size=idx.size)])
    return np.concatenate(parts)


def bootstrap_ci(
    estimator,
    rct: Dataset,
    rwd: Dataset,
    rng: np.random.Generator,
    b: int = 200,
    stratified: bool = False,
) -> tuple[float, float]:
    """Percentile bootstrap CI, resampling the RCT and RWD separately.

    ``estimator`` is a replayable closure (rct, rwd) -> float.  With
    ``stratified`` each of the K strata is resampled within itself.  A draw
    on which the estimator fails is redrawn, up to 5*b total attempts.
    """
    if b < 50:
        raise ValueError(f"bootstrap needs b >= 50 draws, got {b}")
    lab_r = stratum_labels(rct) if stratified else None
    lab_o = stratum_labels(rwd) if stratified else None
    stats = np.empty(b)
    attempts = 0
    got = 0
    while got < b:
        if attempts >= 5 * b:
            raise RuntimeError(f"bootstrap exceeded {5 * b} attempts ({got}/{b} draws succeeded)")
        attempts += 1
        rct_b = rct.take(_resample_indices(rct.n, lab_r, rng))
        rwd_b = rwd.take(_resample_indices(rwd.n, lab_o, rng))
        try:
            stats[got] = estimator(rct_b, rwd_b)
        except (ValueError, RuntimeError, np.linalg.LinAlgError):
            continue
        got += 1
    return (float(np.quantile(stats, 0.025)), float(np.quantile(stats, 0.975)))
