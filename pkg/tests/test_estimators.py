import math

import numpy as np
import pytest

from intou_gql import (
    ExpansionKind,
    FitConfig,
    InputError,
    OptimConfig,
    RandomEffectLaw,
    RankDeficiencyError,
    RngStream,
    Scenario,
    StageError,
    ThetaParams,
    default_start,
    expansion_terms,
    fit_joint,
    fit_stepwise,
    joint_gqlf,
    make_dataset,
    marginal_covariance,
    quasi_score,
    sd_scale_report,
    simulate_dataset,
    stage1_ols,
    stage2_covariance,
    stage3_gls,
)
from intou_gql.estimators import third_derivative_tensor
from intou_gql.gqlf import observed_information, sandwich_estimates

from conftest import TRUE_THETA, random_blocks


def design_blocks(rng, n_ind, beta, noise=1.0):
    blocks = []
    for _ in range(n_ind):
        n = int(rng.integers(2, 6))
        times = np.sort(rng.choice(np.arange(1.0, 11.0), n, replace=False))
        x = np.column_stack([np.ones(n), times, np.full(n, float(rng.integers(0, 2)))])
        blocks.append((times, x, np.ones((n, 1)), x @ beta + noise * rng.normal(size=n)))
    return blocks


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


def test_stage1_intercept_only_is_pooled_mean():
    rng = np.random.default_rng(0)
    blocks = [(t, np.ones((t.size, 1)), z, y) for t, _, z, y in random_blocks(rng, 7)]
    ds = make_dataset(blocks)
    pooled = np.concatenate([b[3] for b in blocks]).mean()
    assert stage1_ols(ds)[0] == pytest.approx(pooled, abs=1e-13)


def test_stage1_exact_recovery_and_pinv_oracle():
    rng = np.random.default_rng(1)
    beta = np.array([2.0, -1.0, 0.5])
    exact = make_dataset(design_blocks(rng, 12, beta, noise=0.0))
    np.testing.assert_allclose(stage1_ols(exact), beta, atol=1e-12)
    noisy = design_blocks(rng, 12, beta)
    X = np.vstack([b[1] for b in noisy])
    y = np.concatenate([b[3] for b in noisy])
    np.testing.assert_allclose(stage1_ols(make_dataset(noisy)), np.linalg.pinv(X) @ y, atol=1e-10)


def test_stage1_rank_deficiency_names_column():
    rng = np.random.default_rng(2)
    blocks = []
    for t, x, z, y in random_blocks(rng, 5):
        x = x.copy()
        x[:, 2] = 2.0 * x[:, 1]
        blocks.append((t, x, z, y))
    with pytest.raises(RankDeficiencyError) as info:
        stage1_ols(make_dataset(blocks))
    assert info.value.column == 3
    assert "x_3" in str(info.value)
    with pytest.raises(StageError) as info:
        fit_stepwise(make_dataset(blocks))
    assert info.value.stage == 1 and isinstance(info.value.cause, RankDeficiencyError)


# ---------------------------------------------------------------------------
# Stage 3
# ---------------------------------------------------------------------------


def test_stage3_with_constant_covariance_is_ols():
    # one observation per individual at a common time: Sigma_i is the same 1x1 matrix for all i
    rng = np.random.default_rng(3)
    blocks = [(np.array([2.0]), rng.normal(size=(1, 3)), np.ones((1, 1)), rng.normal(size=1)) for _ in range(20)]
    ds = make_dataset(blocks)
    v = TRUE_THETA.v
    np.testing.assert_allclose(stage3_gls(ds, v), stage1_ols(ds), rtol=1e-12)


def test_stage3_single_observations_is_weighted_least_squares():
    rng = np.random.default_rng(4)
    blocks = [(np.array([float(rng.integers(1, 20))]), rng.normal(size=(1, 3)), np.ones((1, 1)), rng.normal(size=1))
              for _ in range(25)]
    ds = make_dataset(blocks)
    v = TRUE_THETA.v
    w = np.array([1.0 / marginal_covariance(np.ones((1, 1)), b[0], v)[0, 0] for b in blocks])
    X = np.vstack([b[1] for b in blocks])
    y = np.concatenate([b[3] for b in blocks])
    hand = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    np.testing.assert_allclose(stage3_gls(ds, v), hand, rtol=1e-11)


def test_stage3_is_a_stationary_point(scenario_dataset):
    v = np.array([2.5, 1.0, 0.2, 0.3])
    beta = stage3_gls(scenario_dataset, v)
    theta = ThetaParams.from_vector(np.concatenate([beta, v]), 3)
    score = quasi_score(scenario_dataset, theta).beta_block
    assert np.max(np.abs(score)) < 1e-8


def test_stage3_rejects_bad_covariance(scenario_dataset):
    with pytest.raises(Exception):
        stage3_gls(scenario_dataset, [3.0, -1.0, 0.16, 0.25])


# ---------------------------------------------------------------------------
# Stage 2 consistency
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_stage2_consistency_at_known_beta():
    # a well-identified parameter point (slow OU decay, visible system noise)
    theta0 = ThetaParams([2.0, -1.0, 0.5], [1.0], 0.5, 1.0, 0.25)
    law = RandomEffectLaw(kind="gaussian")
    vs = []
    for r in range(200):
        ds = simulate_dataset(RngStream(1000 + r), Scenario(n_individuals=100, theta_true=theta0, random_effect_law=law))
        v, res = stage2_covariance(ds, theta0.beta)
        vs.append(v)
        # the returned point is at least as good as the truth
        assert joint_gqlf(ds, theta0.with_v(v)) >= joint_gqlf(ds, theta0)
    vs = np.array(vs)
    se = vs.std(axis=0, ddof=1) / math.sqrt(len(vs))
    z = (vs.mean(axis=0) - theta0.v) / se
    assert np.all(np.abs(z) < 3), z


# ---------------------------------------------------------------------------
# Joint and stepwise fits
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def joint_fit(scenario_dataset):
    return fit_joint(scenario_dataset)


def test_default_start_is_admissible(scenario_dataset):
    start = default_start(scenario_dataset)
    start.check_admissible()
    np.testing.assert_allclose(start.beta, stage1_ols(scenario_dataset))
    assert start.lam == 1.0
    assert start.gamma[0] == pytest.approx(start.sigma_eps2)


def test_joint_fit_result(joint_fit, scenario_dataset):
    assert joint_fit.converged
    assert joint_fit.objective == pytest.approx(joint_gqlf(scenario_dataset, joint_fit.theta_hat), rel=1e-14)
    assert joint_fit.objective >= joint_gqlf(scenario_dataset, TRUE_THETA)
    assert joint_fit.std_errors.shape == (7,) and np.all(joint_fit.std_errors > 0)
    p, N = 7, scenario_dataset.n_individuals
    assert joint_fit.bic == pytest.approx(-2 * joint_fit.objective + p * math.log(N))
    assert np.isfinite(joint_fit.aic)
    d = joint_fit.to_dict()
    for key in ("theta_hat", "objective", "avar", "std_errors", "aic", "bic", "converged", "n_eval", "wall_time_s"):
        assert key in d


def test_refit_from_optimum_is_stable(joint_fit, scenario_dataset):
    cfg = FitConfig(start=joint_fit.theta_hat)
    again = fit_joint(scenario_dataset, cfg)
    N = scenario_dataset.n_individuals
    assert abs(again.objective - joint_fit.objective) / N < cfg.optim.f_tol


def test_noiseless_degenerate_check():
    theta0 = ThetaParams([2.0, -1.0, 0.5], [1e-3], 1.3, 1e-3, 0.25)
    sc = Scenario(n_individuals=150, theta_true=theta0, random_effect_law=RandomEffectLaw(kind="gaussian"))
    ds = simulate_dataset(RngStream(5), sc)
    fit = fit_joint(ds)
    se = fit.std_errors[:3]
    if not np.all(np.isfinite(se)):
        # the sandwich may be singular at the boundary; the OLS-style beta block is still available
        se = np.sqrt(np.diag(np.linalg.inv(sandwich_estimates(ds, theta0).gamma_n[:3, :3])) / ds.n_individuals)
    assert np.all(np.abs(fit.theta_hat.beta - theta0.beta) < 3 * se)


def test_stepwise_fit_and_sd_scale(scenario_dataset, joint_fit):
    sw = fit_stepwise(scenario_dataset)
    assert sw.beta1.shape == sw.beta_tilde.shape == (3,)
    assert all(t >= 0 for t in sw.stage_times) and len(sw.stage_times) == 3
    np.testing.assert_array_equal(sw.fit.theta_hat.beta, sw.beta_tilde)
    np.testing.assert_array_equal(sw.fit.theta_hat.v, sw.v_tilde)
    np.testing.assert_array_equal(sw.beta1, stage1_ols(scenario_dataset))
    assert sw.fit.method == "stepwise"
    # the joint optimum dominates any other point, including the stepwise one
    assert joint_fit.objective >= sw.fit.objective - 1e-8 * scenario_dataset.n_individuals
    rep = sd_scale_report(sw.fit)
    assert rep["sigma"]["estimate"] == pytest.approx(math.sqrt(sw.fit.theta_hat.sigma2))
    assert rep["sigma_eps"]["std_error"] == pytest.approx(
        sw.fit.std_errors[-1] / (2 * math.sqrt(sw.fit.theta_hat.sigma_eps2)))


def test_estimators_are_deterministic(scenario_dataset, joint_fit):
    again = fit_joint(scenario_dataset)
    np.testing.assert_array_equal(again.theta_hat.to_vector(), joint_fit.theta_hat.to_vector())
    a, b = fit_stepwise(scenario_dataset), fit_stepwise(scenario_dataset)
    np.testing.assert_array_equal(a.fit.theta_hat.to_vector(), b.fit.theta_hat.to_vector())


def test_singular_information_keeps_estimate_with_nan_errors():
    ds = make_dataset([(np.array([1.0]), np.ones((1, 1)), np.ones((1, 1)), np.array([0.3]))] * 2)
    fit = fit_joint(ds)
    assert np.all(np.isfinite(fit.theta_hat.to_vector()))
    assert fit.inference_error
    assert np.all(np.isnan(fit.std_errors)) and math.isnan(fit.aic) and math.isfinite(fit.bic)
    d = fit.to_dict()
    assert d["std_errors"] == [None] * 5 and d["aic"] is None


def test_bad_start_is_rejected(scenario_dataset):
    with pytest.raises(Exception):
        fit_joint(scenario_dataset, FitConfig(start=ThetaParams([0, 0, 0], [1.0], -1.0, 1.0, 1.0)))


def test_fit_config_from_dict():
    cfg = FitConfig.from_dict({"optim": {"x_tol": 1e-6, "restarts": 0}, "centered_sandwich": True})
    assert cfg.optim.x_tol == 1e-6 and cfg.optim.restarts == 0 and cfg.centered_sandwich
    assert FitConfig.from_dict({}).optim == OptimConfig()


# ---------------------------------------------------------------------------
# Expansion diagnostics
# ---------------------------------------------------------------------------


def test_third_derivative_tensor_is_symmetric_and_consistent(small_dataset):
    theta = ThetaParams([0.3, -0.2, 0.1], [1.1], 0.8, 0.5, 0.4)
    T = third_derivative_tensor(small_dataset, theta)
    np.testing.assert_allclose(T, T.transpose(1, 0, 2), atol=1e-12)
    np.testing.assert_allclose(T, T.transpose(2, 1, 0), atol=1e-12)
    # directional check: -dGamma/dh along u equals T[., ., u]
    vec = theta.to_vector()
    u = np.random.default_rng(0).normal(size=vec.size)
    h = 1e-5
    g = lambda s: observed_information(small_dataset, ThetaParams.from_vector(vec + s * u, 3))
    fd = -(g(h) - g(-h)) / (2 * h)
    np.testing.assert_allclose(np.einsum("ijk,k->ij", T, u), fd, rtol=1e-4, atol=1e-6 * np.abs(fd).max())
    # beta enters linearly, so the beta^3 block vanishes
    assert np.max(np.abs(T[:3, :3, :3])) < 1e-6


@pytest.mark.parametrize("kind", list(ExpansionKind))
def test_expansion_terms_identities(kind, scenario_dataset, joint_fit):
    diag = expansion_terms(scenario_dataset, TRUE_THETA, kind, joint_fit.theta_hat)
    N = scenario_dataset.n_individuals
    u = math.sqrt(N) * (joint_fit.theta_hat.to_vector() - TRUE_THETA.to_vector())
    for arr in (diag.g1, diag.g2, diag.residual, diag.residual1):
        assert arr.shape == (7,) and np.all(np.isfinite(arr))
    np.testing.assert_allclose(diag.residual1, u - diag.g1, atol=1e-12)
    np.testing.assert_allclose(diag.residual, u - diag.g1 - diag.g2 / math.sqrt(N), atol=1e-12)
    info = sandwich_estimates(scenario_dataset, TRUE_THETA)
    delta = quasi_score(scenario_dataset, TRUE_THETA).vector
    np.testing.assert_allclose(diag.g1, np.linalg.solve(info.gamma_n, delta), rtol=1e-10, atol=1e-12)


def test_expansion_without_estimate_has_no_residual(scenario_dataset):
    diag = expansion_terms(scenario_dataset, TRUE_THETA, "joint")
    assert np.all(np.isfinite(diag.g2))
    with pytest.raises(ValueError):
        expansion_terms(scenario_dataset, TRUE_THETA, "bogus")
