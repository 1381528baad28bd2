"""Fusion estimators: hand-computed examples, limits, and properties."""

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from rctfusion import fusion
from rctfusion.config import ConfigError, ScenarioConfig
from rctfusion.estimate import AteEstimate, StrataEstimates, fit_baseline, normal_ci
from rctfusion.fusion import (
    FusionHyper,
    PairDraws,
    StrataDraws,
    anchored_thresholding,
    confounding_function,
    double_shrink,
    double_shrink_vector,
    experiment_grounding,
    experiment_selector,
    mse_minimizing,
    nco_effect,
    power_likelihood,
    procova,
    shrink_s1,
    shrink_s2,
    shrink_vector,
    soft_threshold_bias,
    test_then_pool,
)
from rctfusion.nuisance import MEAN, LearnerSpec, fit_propensity, outcome_library
from rctfusion.synthgen import generate_pair, true_ate


def est(tau, var, n=300, method="x"):
    return AteEstimate(tau_hat=tau, var_hat=var, n=n, ci=normal_ci(tau, var), method=method)


def const_pair_draws(tau_r, var_r, tau_o, var_o, b=60):
    return PairDraws(
        tau_r=np.full(b, tau_r),
        var_r=np.full(b, var_r),
        tau_o=np.full(b, tau_o),
        var_o=np.full(b, var_o),
    )


def const_strata_draws(strata, b=60):
    k = strata.k
    return StrataDraws(
        tau_r=np.tile(strata.tau_r, (b, 1)),
        tau_o=np.tile(strata.tau_o, (b, 1)),
        sigma2_r=np.tile(strata.sigma2_r, (b, 1)),
        sigma2_o=np.tile(strata.sigma2_o, (b, 1)),
        w=np.tile(strata.w, (b, 1)),
    )


def make_strata(tau_r, tau_o, s2_r=1.0, s2_o=1.0, k=4):
    return StrataEstimates(
        tau_r=np.full(k, float(tau_r)) if np.isscalar(tau_r) else np.asarray(tau_r, float),
        tau_o=np.full(k, float(tau_o)) if np.isscalar(tau_o) else np.asarray(tau_o, float),
        sigma2_r=np.full(k, float(s2_r)),
        sigma2_o=np.full(k, float(s2_o)),
        w=np.full(k, 1.0 / k),
        counts_r=np.full(k, 75),
        counts_o=np.full(k, 300),
    )


HYPER = FusionHyper()


# ---------------------------------------------------------------------------
# MSE-minimizing combination
# ---------------------------------------------------------------------------


def test_mse_weight_hand_example():
    er, eo = est(0.2, 0.01), est(0.2, 0.0025)
    estimate, diag = mse_minimizing(er, eo, const_pair_draws(0.2, 0.01, 0.2, 0.0025))
    assert diag.learning_weight == pytest.approx(0.01 / 0.0125, abs=1e-12)
    assert estimate.tau_hat == pytest.approx(0.2, abs=1e-12)


def test_mse_weight_zero_when_rct_noiseless():
    estimate, diag = mse_minimizing(est(0.3, 0.0), est(0.9, 0.04), const_pair_draws(0.3, 0.0, 0.9, 0.04))
    assert diag.learning_weight == 0.0
    assert estimate.tau_hat == 0.3


def test_mse_weight_vanishes_with_huge_disagreement():
    estimate, diag = mse_minimizing(est(0.0, 0.01), est(1e6, 0.01), const_pair_draws(0.0, 0.01, 1e6, 0.01))
    assert diag.learning_weight < 1e-10
    assert estimate.tau_hat == pytest.approx(0.0, abs=1e-3)


@given(
    tau_r=st.floats(-5, 5),
    tau_o=st.floats(-5, 5),
    var_r=st.floats(1e-6, 10),
    var_o=st.floats(1e-6, 10),
)
@settings(max_examples=60, deadline=None)
def test_mse_weight_always_in_unit_interval(tau_r, tau_o, var_r, var_o):
    _, diag = mse_minimizing(
        est(tau_r, var_r), est(tau_o, var_o), const_pair_draws(tau_r, var_r, tau_o, var_o)
    )
    assert 0.0 <= diag.learning_weight <= 1.0


# ---------------------------------------------------------------------------
# Anchored thresholding
# ---------------------------------------------------------------------------


def test_soft_threshold_examples():
    assert soft_threshold_bias(0.5, 0.6) == 0.0
    assert soft_threshold_bias(1.0, 0.6) == pytest.approx(0.4, abs=1e-12)
    assert soft_threshold_bias(-1.0, 0.6) == pytest.approx(-0.4, abs=1e-12)


@given(delta=st.floats(-10, 10), threshold=st.floats(0, 10))
@settings(max_examples=80, deadline=None)
def test_soft_threshold_contracts_and_keeps_sign(delta, threshold):
    out = soft_threshold_bias(delta, threshold)
    assert abs(out) <= abs(delta) + 1e-12
    assert out * delta >= 0.0


def test_anchored_large_delta_limit_is_exact():
    # For |delta| >= threshold: tau - tau_r == omega * gamma * s exactly.
    hyper = FusionHyper(gamma=2.0)
    var_r, var_o = 0.01, 0.0025
    s = math.sqrt(var_r + var_o)
    er, eo = est(0.0, var_r), est(50.0, var_o)
    estimate, diag = anchored_thresholding(er, eo, hyper, const_pair_draws(0.0, var_r, 50.0, var_o))
    omega = var_r / (var_r + var_o)
    assert estimate.tau_hat - er.tau_hat == pytest.approx(omega * 2.0 * s, abs=1e-12)
    assert diag.extras["aux_metric"] == pytest.approx(omega * 2.0 * s, abs=1e-12)


def test_anchored_below_threshold_is_pooled_form():
    hyper = FusionHyper(gamma=2.0)
    er, eo = est(0.20, 0.01), est(0.25, 0.0025)
    estimate, diag = anchored_thresholding(er, eo, hyper, const_pair_draws(0.2, 0.01, 0.25, 0.0025))
    omega = 0.01 / 0.0125
    assert diag.bias_estimate == 0.0
    assert estimate.tau_hat == pytest.approx((1 - omega) * 0.20 + omega * 0.25, abs=1e-12)


def test_anchored_default_gamma_from_sample_sizes():
    hyper = FusionHyper()
    assert hyper.resolve_gamma(300, 1200) == pytest.approx(math.sqrt(math.log(300)), abs=1e-12)


# ---------------------------------------------------------------------------
# Test-then-pool
# ---------------------------------------------------------------------------


def test_ttp_pools_identical_estimates():
    estimate, diag = test_then_pool(est(0.2, 0.01), est(0.2, 0.01), HYPER)
    assert not diag.test_reject
    assert estimate.tau_hat == pytest.approx(0.2, abs=1e-12)
    assert estimate.var_hat == pytest.approx(0.005, abs=1e-12)


def test_ttp_returns_rct_verbatim_on_rejection():
    er = est(0.0, 0.0001, method="tau_r")
    eo = est(1.0, 0.0001)
    estimate, diag = test_then_pool(er, eo, HYPER)
    assert diag.test_reject
    assert estimate.tau_hat == er.tau_hat
    assert estimate.var_hat == er.var_hat
    assert estimate.ci == er.ci
    assert estimate.method == "test_then_pool"


def test_ttp_pooled_variance_halves_with_equal_inputs():
    v = 0.02
    estimate, _ = test_then_pool(est(0.1, v), est(0.12, v), HYPER)
    assert estimate.var_hat == pytest.approx(v / 2, abs=1e-15)


# ---------------------------------------------------------------------------
# Shrinkage over strata
# ---------------------------------------------------------------------------


def test_shrink_s1_hand_example():
    strata = make_strata(tau_r=1.0, tau_o=0.0, s2_r=1.0)
    estimate, diag = shrink_s1(strata, HYPER, const_strata_draws(strata), n=1500)
    # Q = 4, a = K-2 = 2, factor = 1 - 2/4 = 0.5 in every stratum.
    np.testing.assert_allclose(diag.shrink_factors, 0.5, atol=1e-12)
    assert estimate.tau_hat == pytest.approx(0.5, abs=1e-12)


def test_shrink_s1_agreement_returns_rwd_vector():
    strata = make_strata(tau_r=0.7, tau_o=0.7)
    estimate, diag = shrink_s1(strata, HYPER, const_strata_draws(strata), n=1500)
    np.testing.assert_allclose(diag.shrink_factors, 0.0, atol=1e-12)
    assert estimate.tau_hat == pytest.approx(0.7, abs=1e-12)


def test_shrink_s1_huge_disagreement_returns_rct_vector():
    strata = make_strata(tau_r=1e6, tau_o=0.0)
    vec = shrink_vector(strata, HYPER, "s1")
    np.testing.assert_allclose(vec, strata.tau_r, rtol=1e-6)


def test_shrink_s2_equal_variance_scalar_factor():
    strata = make_strata(tau_r=[1.0, 2.0, -1.0, 0.5], tau_o=0.0, s2_r=0.5)
    d = strata.tau_r
    expected_factor = max(0.0, 1.0 - 4 * 0.5 / float(d @ d))
    vec = shrink_vector(strata, HYPER, "s2")
    np.testing.assert_allclose(vec, expected_factor * d, atol=1e-12)


def test_shrink_s2_limits():
    agree = make_strata(tau_r=0.3, tau_o=0.3)
    np.testing.assert_allclose(shrink_vector(agree, HYPER, "s2"), agree.tau_o, atol=1e-12)
    far = make_strata(tau_r=1e7, tau_o=0.0)
    np.testing.assert_allclose(shrink_vector(far, HYPER, "s2"), far.tau_r, rtol=1e-6)


def test_shrink_s2_bootstrap_ci_brackets_point():
    strata = make_strata(tau_r=[0.4, 0.1, 0.3, 0.2], tau_o=[0.2, 0.2, 0.1, 0.3], s2_r=0.02, s2_o=0.01)
    estimate, _ = shrink_s2(strata, HYPER, const_strata_draws(strata), n=1500)
    assert estimate.ci[0] <= estimate.tau_hat <= estimate.ci[1]


# ---------------------------------------------------------------------------
# Double shrinkage
# ---------------------------------------------------------------------------


def test_double_shrink_limits():
    strata = make_strata(tau_r=[0.5, 0.4, 0.6, 0.5], tau_o=[0.1, 0.2, 0.0, 0.1], s2_r=0.04, s2_o=0.01)
    draws = const_strata_draws(strata)
    hyper = FusionHyper(double_shrink_phi2=1.0, double_shrink_omega2=1e12)
    assert double_shrink(strata, hyper, draws, 1500).tau_hat == pytest.approx(
        float(strata.w @ ((strata.tau_r * (1.0 + 0.01) + strata.tau_o * 0.04) / 1.05)), rel=1e-6
    )
    hyper0 = FusionHyper(double_shrink_phi2=1.0, double_shrink_omega2=0.0)
    assert double_shrink(strata, hyper0, draws, 1500).tau_hat == 0.0
    hyper_phi = FusionHyper(double_shrink_phi2=1e14, double_shrink_omega2=1.0)
    vec = double_shrink_vector(strata, 1e14, 1.0)
    a_lim = 1.0 / (strata.sigma2_r + 1.0)
    np.testing.assert_allclose(vec, a_lim * strata.tau_r, rtol=1e-5)


def test_double_shrink_requires_prior_variances():
    strata = make_strata(tau_r=0.4, tau_o=0.2)
    with pytest.raises(ConfigError, match="double_shrink"):
        double_shrink(strata, FusionHyper(), const_strata_draws(strata), 1500)
    with pytest.raises(ConfigError, match="nonnegative"):
        double_shrink(
            strata,
            FusionHyper(double_shrink_phi2=-1.0, double_shrink_omega2=1.0),
            const_strata_draws(strata),
            1500,
        )


@given(
    phi2=st.floats(0.0, 100.0),
    omega2=st.floats(0.0, 100.0),
    tr=st.floats(-3, 3),
    to=st.floats(-3, 3),
)
@settings(max_examples=60, deadline=None)
def test_double_shrink_interpolates_toward_zero(phi2, omega2, tr, to):
    strata = make_strata(tau_r=tr, tau_o=to, s2_r=0.5, s2_o=0.2)
    vec = double_shrink_vector(strata, phi2, omega2)
    lam = (phi2 + 0.2) / (phi2 + 0.2 + 0.5)
    inner = lam * tr + (1 - lam) * to
    assert np.all(np.abs(vec) <= abs(inner) + 1e-12)
    assert np.all(vec * inner >= -1e-12)


# ---------------------------------------------------------------------------
# Bias-correction estimators
# ---------------------------------------------------------------------------


@pytest.mark.mc
def test_grounding_correction_vanishes_without_confounding():
    cfg = ScenarioConfig(psi=0.0, seed=301, reps=40)
    betas = []
    for rep in range(40):
        rct, rwd = generate_pair(cfg, rep)
        _, diag = experiment_grounding(rct, rwd, np.random.default_rng(rep), b=50)
        betas.append(diag.extras["correction_coef"])
    mean_beta = np.mean(betas, axis=0)
    se = np.std(betas, axis=0, ddof=1) / math.sqrt(len(betas))
    assert np.all(np.abs(mean_beta) <= 3.0 * se + 0.02)


@pytest.mark.mc
def test_grounding_null_scenario_estimates_zero():
    from rctfusion.config import MsmCoeffs

    cfg = ScenarioConfig(msm=MsmCoeffs(beta_a=0.0, beta_ax3=0.0), psi=0.0, seed=303)
    taus = []
    for rep in range(30):
        rct, rwd = generate_pair(cfg, rep)
        estimate, _ = experiment_grounding(rct, rwd, np.random.default_rng(rep), b=50)
        taus.append(estimate.tau_hat)
    assert abs(np.mean(taus)) < 3.0 * np.std(taus, ddof=1) / math.sqrt(len(taus))


def test_grounding_rank_deficient_design_errors():
    rct, rwd = generate_pair(ScenarioConfig(seed=305))
    rct = dataclasses.replace(rct, x1=np.zeros(rct.n), x2=np.zeros(rct.n))
    # x2 == intercept-collinear (all zeros) makes the RCT design deficient
    with pytest.raises(ValueError, match="rank"):
        fusion._grounding_point(rct, rwd)


@pytest.mark.mc
def test_confounding_coefficients_vanish_at_psi_zero():
    cfg = ScenarioConfig(psi=0.0, seed=307)
    coefs = []
    for rep in range(30):
        rct, rwd = generate_pair(cfg, rep)
        _, diag = confounding_function(rct, rwd, np.random.default_rng(rep), b=50)
        coefs.append(diag.extras["confounding_coef"])
    mean_c = np.mean(coefs, axis=0)
    se = np.std(coefs, axis=0, ddof=1) / math.sqrt(len(coefs))
    assert np.all(np.abs(mean_c) <= 3.0 * se + 0.02)


def test_confounding_collinear_basis_errors():
    rct, rwd = generate_pair(ScenarioConfig(seed=309))
    # A constant covariate column collapses the confounding block onto the
    # covariate block.
    rct = dataclasses.replace(rct, x1=np.zeros(rct.n))
    rwd = dataclasses.replace(rwd, x1=np.zeros(rwd.n))
    with pytest.raises(ValueError, match="collinear"):
        fusion._confounding_point(rct, rwd)


# ---------------------------------------------------------------------------
# Power likelihood
# ---------------------------------------------------------------------------


def test_power_likelihood_duplicated_rct_matches_rct_only_fit():
    # If the external rows are the RCT rows themselves, the tempered fit's
    # posterior mean equals the RCT-only least squares for every eta.
    rct, _ = generate_pair(ScenarioConfig(seed=311))
    estimate, diag = power_likelihood(rct, rct, HYPER, np.random.default_rng(0))
    X = fusion._pl_design(rct, quadratic=False)
    beta, *_ = np.linalg.lstsq(X, rct.y, rcond=None)
    expected = beta[1] + beta[2] * np.mean(rct.x3)
    assert diag.extras["tau_mean_exact"] == pytest.approx(expected, abs=1e-8)


def test_power_likelihood_eta_zero_is_rct_only_wls():
    cfg = ScenarioConfig(psi=4.0, seed=313)  # extreme bias forces eta = 0
    rct, rwd = generate_pair(cfg)
    estimate, diag = power_likelihood(rct, rwd, HYPER, np.random.default_rng(1))
    assert diag.learning_weight == 0.0
    X = fusion._pl_design(rct, quadratic=False)
    beta, *_ = np.linalg.lstsq(X, rct.y, rcond=None)
    expected = beta[1] + beta[2] * np.mean(rct.x3)
    assert diag.extras["tau_mean_exact"] == pytest.approx(expected, abs=1e-8)
    assert estimate.tau_hat == pytest.approx(expected, abs=0.02)  # draw noise


def test_power_likelihood_grid_must_contain_zero_and_one():
    with pytest.raises(ConfigError, match="eta_grid"):
        FusionHyper(eta_grid=(0.1, 0.5, 1.0))
    with pytest.raises(ConfigError, match="eta_grid"):
        FusionHyper(eta_grid=(0.0, 0.5))


def test_power_likelihood_control_only_drops_treated_rows():
    rct, rwd = generate_pair(ScenarioConfig(seed=315))
    est_b, _ = power_likelihood(rct, rwd, HYPER, np.random.default_rng(2), mode="both")
    est_c, _ = power_likelihood(rct, rwd, HYPER, np.random.default_rng(2), mode="control-only")
    assert est_c.n == rct.n + int((rwd.a == 0).sum())
    assert est_b.n == rct.n + rwd.n


def test_power_likelihood_credible_interval_brackets_mean():
    rct, rwd = generate_pair(ScenarioConfig(seed=317))
    estimate, diag = power_likelihood(rct, rwd, HYPER, np.random.default_rng(3))
    assert estimate.ci[0] < estimate.tau_hat < estimate.ci[1]
    assert 0.0 <= diag.learning_weight <= 1.0


# ---------------------------------------------------------------------------
# Experiment selector
# ---------------------------------------------------------------------------


def test_selector_constant_nco_reduces_to_plain_selector():
    rct, rwd = generate_pair(ScenarioConfig(seed=319))
    rct = dataclasses.replace(rct, n3=np.zeros(rct.n))
    rwd = dataclasses.replace(rwd, n3=np.zeros(rwd.n))
    res = experiment_selector(
        rct, rwd, HYPER, outcome_library(), np.random.default_rng(4), ncos=(None, "n3")
    )
    # A constant NCO has AIPW effect exactly zero, so the selection and the
    # resulting estimate must coincide with the no-NCO selector.
    assert res["n3"].estimate.tau_hat == pytest.approx(res[None].estimate.tau_hat, abs=1e-12)
    assert res["n3"].diagnostics.learning_weight == res[None].diagnostics.learning_weight


def test_selector_proportion_bounds_and_diagnostics():
    rct, rwd = generate_pair(ScenarioConfig(seed=321))
    res = experiment_selector(rct, rwd, HYPER, outcome_library(), np.random.default_rng(5))
    prop = res[None].diagnostics.learning_weight
    assert 0.0 <= prop <= 1.0
    assert res[None].estimate.ci[0] <= res[None].estimate.tau_hat <= res[None].estimate.ci[1]


def test_selector_rejects_unknown_nco():
    rct, rwd = generate_pair(ScenarioConfig(seed=323))
    with pytest.raises(ConfigError, match="NCO"):
        experiment_selector(rct, rwd, HYPER, outcome_library(), np.random.default_rng(6), ncos=("n9",))


def test_selector_control_only_uses_rwd_controls():
    rct, rwd = generate_pair(ScenarioConfig(seed=325))
    res = experiment_selector(
        rct, rwd, HYPER, outcome_library(), np.random.default_rng(7), mode="control-only"
    )
    assert 0.0 <= res[None].diagnostics.learning_weight <= 1.0


# ---------------------------------------------------------------------------
# Prognostic adjustment and NCO effects
# ---------------------------------------------------------------------------


def test_procova_constant_score_equals_plain_adjustment():
    rct, rwd = generate_pair(ScenarioConfig(seed=327))
    estimate, diag = procova(rct, rwd, [LearnerSpec(MEAN)], np.random.default_rng(8))
    assert diag.extras["fallback"] == "dropped_score"
    # Plain covariate-adjusted regression with centered treatment interactions.
    a_c = rct.a - rct.a.mean()
    covs = [rct.column(c) - rct.column(c).mean() for c in ("x1", "x2", "x3", "x4")]
    X = np.column_stack([np.ones(rct.n), a_c] + covs + [a_c * c for c in covs])
    beta, *_ = np.linalg.lstsq(X, rct.y, rcond=None)
    assert estimate.tau_hat == pytest.approx(beta[1], abs=1e-10)


def test_procova_needs_rwd_controls():
    rct, rwd = generate_pair(ScenarioConfig(seed=329))
    rwd = dataclasses.replace(rwd, a=np.ones(rwd.n))
    with pytest.raises(ValueError, match="control arm"):
        procova(rct, rwd, outcome_library(), np.random.default_rng(9))


def test_procova_influence_consistent_with_sandwich():
    rct, rwd = generate_pair(ScenarioConfig(seed=331))
    estimate, _ = procova(rct, rwd, outcome_library(), np.random.default_rng(10))
    assert abs(np.mean(estimate.influence)) < 1e-8
    assert estimate.var_hat == pytest.approx(
        float(np.sum(estimate.influence**2)) / estimate.n**2, rel=1e-10
    )


def test_nco_effect_null_in_rct():
    cfg = ScenarioConfig(n_r=5000, seed=333)
    rct, _ = generate_pair(cfg)
    prop = fit_propensity(rct)
    for col in ("n1", "n2", "n3"):
        estimate = nco_effect(rct, col, prop, outcome_library(), np.random.default_rng(11))
        assert abs(estimate.tau_hat) <= 2.5 * math.sqrt(estimate.var_hat)


@pytest.mark.mc
def test_nco_effect_detects_confounding_in_pooled_data():
    from rctfusion.synthgen import concat

    cfg = ScenarioConfig(psi=2.0, seed=335)
    hits_n1, hits_n3 = 0, 0
    reps = 20
    for rep in range(reps):
        rct, rwd = generate_pair(cfg, rep)
        pooled = concat([rct, rwd])
        prop = fit_propensity(pooled)
        e1 = nco_effect(pooled, "n1", prop, outcome_library(), np.random.default_rng(rep))
        e3 = nco_effect(pooled, "n3", prop, outcome_library(), np.random.default_rng(rep))
        hits_n1 += abs(e1.tau_hat) > 1.96 * math.sqrt(e1.var_hat)
        hits_n3 += abs(e3.tau_hat) > 1.96 * math.sqrt(e3.var_hat)
    assert hits_n1 >= 0.9 * reps  # strong NCO flags confounding
    assert hits_n3 <= 0.3 * reps  # pure-noise NCO stays null


def test_learning_weights_bounded_on_real_data():
    rct, rwd = generate_pair(ScenarioConfig(seed=337, psi=0.4))
    rng = np.random.default_rng(12)
    fits_r = fit_baseline(rct, outcome_library(), rng)
    fits_o = fit_baseline(rwd, outcome_library(), rng)
    from rctfusion.estimate import baseline_estimate

    er = baseline_estimate(rct, fits_r, "tau_r")
    eo = baseline_estimate(rwd, fits_o, "tau_o")
    draws = fusion.pair_bootstrap_draws(rct, rwd, fits_r, fits_o, 60, np.random.default_rng(13))
    _, d1 = mse_minimizing(er, eo, draws)
    assert 0.0 <= d1.learning_weight <= 1.0
    _, d2 = power_likelihood(rct, rwd, HYPER, np.random.default_rng(14))
    assert 0.0 <= d2.learning_weight <= 1.0
