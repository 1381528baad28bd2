"""Learner selection, IRLS propensity fitting, clipping, determinism."""

import dataclasses

import numpy as np
import pytest

from rctfusion.config import ScenarioConfig
from rctfusion.nuisance import (
    LINEAR,
    LINEAR_SQUARES,
    LOGISTIC,
    MEAN,
    LearnerSpec,
    NuisanceFit,
    fit_outcome,
    fit_propensity,
    known_propensity,
    outcome_library,
)
from rctfusion.synthgen import generate_dataset, generate_pair


def _with(data, **cols):
    return dataclasses.replace(data, **cols)


@pytest.fixture
def rct():
    return generate_pair(ScenarioConfig(seed=101))[0]


def test_constant_outcome_selects_mean(rct):
    data = _with(rct, y=np.full(rct.n, 3.25))
    fit = fit_outcome(data, "both", outcome_library(), np.random.default_rng(0))
    assert fit.spec.family == MEAN
    np.testing.assert_allclose(fit.predict(data), 3.25, atol=1e-12)


def test_exact_linear_signal_recovers_slope(rct):
    data = _with(rct, y=2.0 * rct.x1)
    fit = fit_outcome(data, "both", outcome_library(), np.random.default_rng(1))
    assert fit.spec.family == LINEAR
    slope = fit.coef[1 + fit.spec.covariates.index("x1")]
    assert slope == pytest.approx(2.0, abs=1e-8)


def test_quadratic_signal_prefers_squares_candidate():
    data = generate_dataset(ScenarioConfig(n_r=2000, seed=103), "rct", np.random.default_rng(103))
    rng = np.random.default_rng(2)
    y = data.x4**2 + 0.1 * rng.standard_normal(data.n)
    data = _with(data, y=y)
    fit = fit_outcome(data, "both", outcome_library(include_squares=True), np.random.default_rng(3))
    losses = fit.diagnostics["cv_losses"]
    assert losses[LINEAR_SQUARES] < losses[LINEAR]
    assert fit.spec.family == LINEAR_SQUARES


def test_selection_never_worse_than_mean(rct):
    fit = fit_outcome(rct, "both", outcome_library(include_squares=True), np.random.default_rng(4))
    losses = fit.diagnostics["cv_losses"]
    assert losses[fit.spec.family] <= losses[MEAN]


def test_rank_deficient_candidate_dropped(rct):
    data = _with(rct, x4=np.zeros(rct.n))
    cands = [LearnerSpec(LINEAR, ("x4",))]
    fit = fit_outcome(data, "both", cands, np.random.default_rng(5))
    assert fit.spec.family == MEAN
    assert LINEAR in fit.diagnostics["dropped"]


def test_empty_arm_raises(rct):
    data = _with(rct, a=np.zeros(rct.n))
    with pytest.raises(ValueError, match="no units in arm"):
        fit_outcome(data, 1, outcome_library(), np.random.default_rng(6))


def test_refit_same_data_is_deterministic(rct):
    f1 = fit_outcome(rct, 1, outcome_library(), np.random.default_rng(42))
    f2 = fit_outcome(rct, 1, outcome_library(), np.random.default_rng(42))
    np.testing.assert_array_equal(f1.coef, f2.coef)
    assert f1.spec == f2.spec


def test_intercept_only_propensity_matches_treated_fraction(rct):
    fit = fit_propensity(rct, LearnerSpec(LOGISTIC, ()))
    np.testing.assert_allclose(fit.predict(rct), rct.a.mean(), atol=1e-8)


def test_propensity_clipping():
    fit = NuisanceFit(spec=LearnerSpec(LOGISTIC, ()), coef=np.array([-6.0]), bound=0.025)
    rct = generate_pair(ScenarioConfig(seed=107))[0]
    # raw expit(-6) ~ 0.0025 < 0.025, so every prediction is clipped up
    assert np.all(fit.predict(rct) == 0.025)


def test_propensity_predictions_bounded(rct):
    fit = fit_propensity(rct)
    p = fit.predict(rct)
    assert np.all(p >= 0.025) and np.all(p <= 0.975)


def test_single_arm_propensity_errors(rct):
    data = _with(rct, a=np.ones(rct.n))
    with pytest.raises(ValueError, match="both treatment arms"):
        fit_propensity(data)


@pytest.mark.mc
def test_rwd_propensity_recovers_truth_at_scale():
    cfg = ScenarioConfig(n_o=100_000, psi=0.0, seed=109)
    rwd = generate_dataset(cfg, "rwd", np.random.default_rng(109))
    fit = fit_propensity(rwd)
    np.testing.assert_allclose(fit.coef, [-0.5, 1.0, 1.0, 1.0], atol=0.05)


def test_known_propensity_is_exact():
    fit = known_propensity(0.5)
    rct = generate_pair(ScenarioConfig(seed=113))[0]
    np.testing.assert_allclose(fit.predict(rct), 0.5, atol=1e-12)
