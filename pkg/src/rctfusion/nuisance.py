"""Outcome-mean and propensity models with discrete cross-validated selection.

The candidate set {mean-only, linear, linear-plus-squares, logistic} stands in
for a discrete learner-ensemble: every candidate is fit, the one with the
lowest V-fold squared-error loss wins, and the winner is refit on all rows.
Propensity predictions are clipped away from 0 and 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._linalg import irls_logistic, lstsq, solve_ols
from .config import ConfigError
from .synthgen import Dataset

MEAN, LINEAR, LINEAR_SQUARES, LOGISTIC = "mean", "linear", "linear_squares", "logistic"

DEFAULT_COVARIATES = ("x1", "x2", "x3", "x4")
DEFAULT_SQUARES = ("x1", "x3", "x4")
DEFAULT_PS_COVARIATES = ("x1", "x2", "x3")
PROPENSITY_BOUND = 0.025


@dataclass(frozen=True)
class LearnerSpec:
    """One candidate model: a family plus the covariate columns it sees."""

    family: str
    covariates: tuple[str, ...] = ()
    square_cols: tuple[str, ...] = ()
    cv_folds: int = 5

    def __post_init__(self):
        if self.family not in (MEAN, LINEAR, LINEAR_SQUARES, LOGISTIC):
            raise ConfigError(f"unknown learner family {self.family!r}")
        if self.cv_folds < 2:
            raise ConfigError(f"cv_folds must be >= 2, got {self.cv_folds}")
        if self.family in (LINEAR, LINEAR_SQUARES) and not self.covariates:
            raise ConfigError(f"family {self.family!r} needs a non-empty covariate set")

    def design(self, data: Dataset) -> np.ndarray:
        cols = [np.ones(data.n)]
        if self.family != MEAN:
            cols += [data.column(c) for c in self.covariates]
        if self.family == LINEAR_SQUARES:
            cols += [data.column(c) ** 2 for c in self.square_cols]
        return np.column_stack(cols)


def outcome_library(
    covariates: tuple[str, ...] = DEFAULT_COVARIATES,
    squares: tuple[str, ...] = DEFAULT_SQUARES,
    include_squares: bool = False,
    cv_folds: int = 5,
) -> list[LearnerSpec]:
    """Candidate outcome models; the quadratic candidate joins only on request."""
    lib = [
        LearnerSpec(MEAN, cv_folds=cv_folds),
        LearnerSpec(LINEAR, covariates, cv_folds=cv_folds),
    ]
    if include_squares:
        lib.append(LearnerSpec(LINEAR_SQUARES, covariates, squares, cv_folds=cv_folds))
    return lib


@dataclass
class NuisanceFit:
    """A fitted nuisance model; immutable in use and cheap to share."""

    spec: LearnerSpec
    coef: np.ndarray
    bound: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def predict(self, data: Dataset) -> np.ndarray:
        raw = self.spec.design(data) @ self.coef
        if self.spec.family == LOGISTIC:
            return np.clip(expit(raw), self.bound, 1.0 - self.bound)
        return raw


def _arm_subset(data: Dataset, arm) -> Dataset:
    if arm == "both":
        return data
    mask = data.a == float(arm)
    if not mask.any():
        raise ValueError(f"no units in arm {arm!r}")
    return data.take(np.flatnonzero(mask))


def fit_outcome(
    data: Dataset,
    arm,
    candidates: list[LearnerSpec],
    rng: np.random.Generator,
    outcome_col: str = "y",
) -> NuisanceFit:
    """Discrete selection among outcome candidates by V-fold squared error.

    Rank-deficient candidates are dropped (recorded in diagnostics); a
    mean-only candidate is always in the running, so selection never returns
    a model with a higher CV loss than the mean.
    """
    sub = _arm_subset(data, arm)
    if sub.n < 10:
        raise ValueError(f"need >= 10 rows to fit an outcome model, got {sub.n} in arm {arm!r}")
    cands = list(candidates)
    if not any(c.family == MEAN for c in cands):
        cands.insert(0, LearnerSpec(MEAN, cv_folds=cands[0].cv_folds))

    y = sub.column(outcome_col)
    folds = min(cands[0].cv_folds, sub.n)
    fold_id = rng.permuted(np.arange(sub.n) % folds)

    losses: dict[str, float] = {}
    dropped: list[str] = []
    best = None
    best_loss = np.inf
    for cand in cands:
        X = cand.design(sub)
        _, rank = lstsq(X, y)
        if rank < X.shape[1]:
            dropped.append(cand.family)
            continue
        sse = 0.0
        for v in range(folds):
            tr = fold_id != v
            te = ~tr
            beta, r_tr = lstsq(X[tr], y[tr])
            if r_tr < X.shape[1]:
                sse = np.inf
                break
            sse += float(np.sum((y[te] - X[te] @ beta) ** 2))
        loss = sse / sub.n
        losses[cand.family] = loss
        # Numerical ties go to the earlier (simpler) candidate.
        if best is None or loss < best_loss - 1e-12 * (1.0 + abs(best_loss)):
            best = cand
            best_loss = loss

    if best is None:  # every candidate rank-deficient; constant model always works
        best = LearnerSpec(MEAN, cv_folds=cands[0].cv_folds)
        losses[MEAN] = float(np.var(y))
        dropped.append("all")
    coef, _ = lstsq(best.design(sub), y)
    if not np.all(np.isfinite(coef)):
        raise ValueError("outcome fit produced non-finite coefficients")
    return NuisanceFit(
        spec=best,
        coef=coef,
        diagnostics={"cv_losses": losses, "dropped": dropped, "arm": arm, "outcome": outcome_col},
    )


def fit_outcome_pair(
    data: Dataset,
    candidates: list[LearnerSpec],
    rng: np.random.Generator,
    outcome_col: str = "y",
) -> tuple[NuisanceFit, NuisanceFit]:
    """Per-arm outcome fits (m0, m1)."""
    m0 = fit_outcome(data, 0, candidates, rng, outcome_col)
    m1 = fit_outcome(data, 1, candidates, rng, outcome_col)
    return m0, m1


def fit_propensity(
    data: Dataset,
    spec: LearnerSpec | None = None,
    bound: float = PROPENSITY_BOUND,
) -> NuisanceFit:
    """Logistic propensity via IRLS with clipped predictions."""
    if spec is None:
        spec = LearnerSpec(LOGISTIC, DEFAULT_PS_COVARIATES)
    if spec.family != LOGISTIC:
        raise ConfigError(f"propensity fitting needs the logistic family, got {spec.family!r}")
    if not (0.0 < bound <= 0.5):
        raise ConfigError(f"propensity bound must lie in (0, 0.5], got {bound}")
    vals = np.unique(data.a)
    if vals.size < 2:
        raise ValueError("propensity fit needs both treatment arms present")
    X = spec.design(data)
    coef, n_iter, converged = irls_logistic(X, data.a)
    if not np.all(np.isfinite(coef)):
        raise ValueError("propensity fit produced non-finite coefficients")
    return NuisanceFit(
        spec=spec,
        coef=coef,
        bound=bound,
        diagnostics={"n_iter": n_iter, "converged": converged},
    )


def refit_outcome(fit: NuisanceFit, data: Dataset, arm, outcome_col: str | None = None) -> NuisanceFit:
    """Re-estimate coefficients on new rows, keeping the selected family."""
    sub = _arm_subset(data, arm)
    col = outcome_col or fit.diagnostics.get("outcome", "y")
    coef = solve_ols(fit.spec.design(sub), sub.column(col))
    return NuisanceFit(spec=fit.spec, coef=coef, diagnostics={"refit": True, "arm": arm})


def refit_propensity(fit: NuisanceFit, data: Dataset) -> NuisanceFit:
    """Re-estimate a logistic fit on new rows with the same design and bound."""
    if fit.diagnostics.get("fixed"):
        return fit
    coef, n_iter, converged = irls_logistic(fit.spec.design(data), data.a, beta0=fit.coef)
    return NuisanceFit(
        spec=fit.spec,
        coef=coef,
        bound=fit.bound,
        diagnostics={"refit": True, "n_iter": n_iter, "converged": converged},
    )


def known_propensity(p: float = 0.5) -> NuisanceFit:
    """Fixed (intercept-only) propensity, e.g. the known RCT coin."""
    logit = float(np.log(p / (1.0 - p)))
    return NuisanceFit(
        spec=LearnerSpec(LOGISTIC, ()),
        coef=np.array([logit]),
        bound=0.0,
        diagnostics={"fixed": True},
    )
