"""Generator checks: margins, copula coupling, treatment laws, determinism."""

import numpy as np
import pytest

from rctfusion.config import ConfigError, ScenarioConfig, rho_from_logit
from rctfusion.synthgen import (
    RCT,
    RWD,
    assign_treatment,
    generate_dataset,
    generate_pair,
    potential_outcome,
    sample_covariates,
    sample_outcomes,
    true_ate,
)


def test_rho_from_logit_matches_tanh_identity():
    # 2*expit(x) - 1 == tanh(x/2) gives an independent route to the value.
    assert rho_from_logit(0.1) == pytest.approx(np.tanh(0.05), abs=1e-15)
    assert rho_from_logit(0.1) == pytest.approx(0.05, abs=5e-4)
    assert rho_from_logit(0.0) == 0.0
    assert rho_from_logit(2.0) == pytest.approx(np.tanh(1.0), abs=1e-15)


def test_default_copula_matches_reported_correlations():
    r12, r13, r23 = ScenarioConfig().copula_rhos()
    assert r12 == pytest.approx(0.05, abs=5e-4)
    assert r13 == pytest.approx(0.76, abs=5e-3)
    assert r23 == pytest.approx(0.46, abs=5e-3)


def test_non_positive_definite_logits_rejected():
    # rho12 ~ -1, rho13 ~ 1, rho23 ~ 1 cannot coexist.
    with pytest.raises(ConfigError, match="copula_logits"):
        ScenarioConfig(copula_logits=(-50.0, 50.0, 50.0))


def test_zero_logits_make_x1_and_outcome_residual_independent():
    cfg = ScenarioConfig(copula_logits=(0.0, 0.0, 0.0), seed=7)
    rng = np.random.default_rng(7)
    cols = sample_covariates(cfg, 100_000, rng)
    corr = np.corrcoef(cols["x1"], cols["z3"])[0, 1]
    assert abs(corr) < 0.02


def test_marginal_moments_at_scale():
    cfg = ScenarioConfig(seed=11)
    cols = sample_covariates(cfg, 100_000, np.random.default_rng(11))
    assert abs(np.mean(cols["x1"])) < 0.02
    assert abs(np.var(cols["x1"]) - 1.0) < 0.03
    assert abs(np.mean(cols["x2"]) - 0.5) < 0.01
    u = cols["u1"] + cols["u2"]
    assert abs(np.var(u) - 1.1) < 0.03


def test_potential_outcome_at_origin_is_intercept():
    cfg = ScenarioConfig()
    cols = {k: np.zeros(3) for k in ("x3", "x4", "u1", "u2", "z3")}
    assert potential_outcome(cfg, cols, a=0.0, alpha=0.0) == pytest.approx([0.5] * 3)


def test_unit_effect_is_exact_rowwise():
    cfg = ScenarioConfig(seed=3)
    rct, rwd = generate_pair(cfg)
    for data in (rct, rwd):
        np.testing.assert_allclose(
            data.y1 - data.y0, cfg.msm.beta_a + cfg.msm.beta_ax3 * data.x3, rtol=0, atol=1e-12
        )


def test_observed_outcome_consistent_with_assignment():
    rct, rwd = generate_pair(ScenarioConfig(seed=5))
    for data in (rct, rwd):
        expected = np.where(data.a == 1.0, data.y1, data.y0)
        np.testing.assert_array_equal(data.y, expected)


def test_mean_unit_effect_matches_analytic_ate():
    cfg = ScenarioConfig(seed=13)
    rng = np.random.default_rng(13)
    cols = sample_covariates(cfg, 1_000_000, rng)
    cols = sample_outcomes(cfg, cols, RCT, rng)
    assert np.mean(cols["y1"] - cols["y0"]) == pytest.approx(true_ate(cfg), abs=0.002)


def test_true_ate_analytic():
    from rctfusion.config import MsmCoeffs

    assert true_ate(ScenarioConfig()) == pytest.approx(0.2, abs=1e-15)
    assert true_ate(ScenarioConfig(msm=MsmCoeffs(beta_a=0.7, beta_ax3=0.0))) == 0.7
    assert true_ate(ScenarioConfig(msm=MsmCoeffs(beta_a=0.0, beta_ax3=0.0))) == 0.0


def test_rct_assignment_is_fair_coin():
    cfg = ScenarioConfig(n_r=100_000, seed=17)
    rng = np.random.default_rng(17)
    cols = sample_covariates(cfg, 100_000, rng)
    cols = sample_outcomes(cfg, cols, RCT, rng)
    cols = assign_treatment(cfg, cols, RCT, rng)
    assert 0.495 < np.mean(cols["a"]) < 0.505


def test_rwd_assignment_probability_at_origin():
    cfg = ScenarioConfig(psi=0.0, seed=19)
    n = 100_000
    cols = {k: np.zeros(n) for k in ("x1", "x2", "x3", "x4", "u1", "u2", "z3")}
    cols = sample_outcomes(cfg, cols, RWD, np.random.default_rng(19))
    cols = assign_treatment(cfg, cols, RWD, np.random.default_rng(20))
    # expit(-0.5) computed independently
    expected = 1.0 / (1.0 + np.exp(0.5))
    assert expected == pytest.approx(0.37754066879814546, abs=1e-12)
    assert np.mean(cols["a"]) == pytest.approx(expected, abs=0.005)


def test_copula_monotonicity_in_outcome_logit():
    corrs = []
    for logit in (0.0, 1.0, 2.0):
        cfg = ScenarioConfig(copula_logits=(0.1, logit, 1.0), n_r=100_000, seed=23)
        rng = np.random.default_rng(23)
        cols = sample_covariates(cfg, 100_000, rng)
        cols = sample_outcomes(cfg, cols, RCT, rng)
        cols = assign_treatment(cfg, cols, RCT, rng)
        near_zero = (np.abs(cols["x3"]) < 0.25) & (cols["a"] == 0.0)
        corrs.append(np.corrcoef(cols["x1"][near_zero], cols["y"][near_zero])[0, 1])
    assert corrs[0] < corrs[1] < corrs[2]


def test_source_flag_constant_per_dataset():
    rct, rwd = generate_pair(ScenarioConfig(seed=29))
    assert np.all(rct.s == 1.0)
    assert np.all(rwd.s == 0.0)


def test_determinism_bit_identical():
    cfg = ScenarioConfig(seed=31, psi=0.7)
    a1, b1 = generate_pair(cfg, rep=4)
    a2, b2 = generate_pair(cfg, rep=4)
    import dataclasses

    for f in dataclasses.fields(a1):
        np.testing.assert_array_equal(getattr(a1, f.name), getattr(a2, f.name))
        np.testing.assert_array_equal(getattr(b1, f.name), getattr(b2, f.name))


def test_csv_export_columns_and_debug_flag():
    rct, _ = generate_pair(ScenarioConfig(seed=37))
    plain = rct.to_csv()
    header = plain.splitlines()[0]
    assert header == "x1,x2,x3,x4,a,y,n1,n2,n3,s"
    assert len(plain.splitlines()) == rct.n + 1
    debug = rct.to_csv(debug_oracle=True)
    assert debug.splitlines()[0].endswith("u1,u2,z3,y0,y1")
    assert rct.to_csv() == plain  # stable bytes


@pytest.mark.mc
def test_confounding_bias_grows_with_absolute_psi():
    # The observational estimator's bias is ~0 at psi=0 and grows in |psi|,
    # with the sign of psi setting the direction.
    from rctfusion.estimate import fit_and_aipw
    from rctfusion.nuisance import outcome_library

    def mc_bias(psi, reps=80):
        cfg = ScenarioConfig(psi=psi, seed=51)
        taus = []
        for rep in range(reps):
            _, rwd = generate_pair(cfg, rep)
            taus.append(fit_and_aipw(rwd, outcome_library(), np.random.default_rng(rep)).tau_hat)
        return float(np.mean(taus)) - true_ate(cfg)

    b0, b_pos, b_pos2, b_neg = mc_bias(0.0), mc_bias(0.3), mc_bias(0.8), mc_bias(-0.3)
    assert abs(b0) < 0.05
    assert b_pos > 0.2 and b_pos2 > b_pos
    assert b_neg < -0.2


def test_curvature_enters_per_source():
    cfg = ScenarioConfig(alpha_r=2.0, alpha_o=0.0, seed=41)
    rct, rwd = generate_pair(cfg)
    # Quadratic term present in the RCT outcomes, absent in the RWD.
    cols_r = {k: getattr(rct, k) for k in ("x3", "x4", "u1", "u2", "z3")}
    np.testing.assert_allclose(rct.y0, potential_outcome(cfg, cols_r, 0.0, 2.0), atol=1e-12)
    cols_o = {k: getattr(rwd, k) for k in ("x3", "x4", "u1", "u2", "z3")}
    np.testing.assert_allclose(rwd.y0, potential_outcome(cfg, cols_o, 0.0, 0.0), atol=1e-12)
