import math
from types import SimpleNamespace

import numpy as np
import pytest

from intou_gql import (
    Dataset,
    InferenceError,
    PsiParameterization,
    RandomEffectLaw,
    RngStream,
    Scenario,
    ThetaParams,
    gaussian_score_covariance,
    individual_loglik,
    information_criteria,
    joint_gqlf,
    make_dataset,
    marginal_covariance,
    observed_information,
    quasi_kl_diagnostics,
    quasi_score,
    sandwich_estimates,
    simulate_dataset,
    studentize,
)
from intou_gql.gqlf import FitResult, InfoMatrices, _individual_terms

from conftest import TRUE_THETA, random_blocks, random_theta

EPS3 = np.finfo(float).eps ** (1 / 3)


def mvn_logpdf_oracle(y, mu, sigma):
    """Explicit determinant and solve, no factorization shared with the package."""
    r = y - mu
    sign, logdet = np.linalg.slogdet(sigma)
    assert sign > 0
    return -0.5 * (y.size * math.log(2 * math.pi) + logdet + r @ np.linalg.solve(sigma, r))


def loglik_oracle(ds, theta):
    total = 0.0
    for ind in ds.individuals:
        sigma = marginal_covariance(ind.z_mat, ind.times, theta.v, theta.psi)
        total += mvn_logpdf_oracle(ind.y, ind.x_mat @ theta.beta, sigma)
    return total


def fd_gradient(f, vec):
    g = np.empty(vec.size)
    for k in range(vec.size):
        h = EPS3 * max(1.0, abs(vec[k]))
        up, dn = vec.copy(), vec.copy()
        up[k] += h
        dn[k] -= h
        g[k] = (f(up) - f(dn)) / (2 * h)
    return g


def gaussian_scenario(n):
    return Scenario(n_individuals=n, random_effect_law=RandomEffectLaw(kind="gaussian"))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def test_loglik_standard_normal_at_zero():
    # n=1, X=0 so mu=0; Sigma = Psi z^2 + H(t) + s_eps; pick the pieces to sum to 1
    t = np.array([1.0])
    lam, s2 = 1.0, 0.5
    h = s2 / (2 * lam**3) * (2 * lam * t[0] + 2 * math.exp(-lam * t[0]) - 2)
    theta = ThetaParams([0.0], [0.5 - h / 2], lam, s2, 0.5 - h / 2)
    ds = make_dataset([(t, np.zeros((1, 1)), np.ones((1, 1)), np.zeros(1))])
    assert joint_gqlf(ds, theta) == pytest.approx(-0.9189385332, abs=1e-9)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("psi", list(PsiParameterization))
def test_loglik_matches_oracle(seed, psi):
    rng = np.random.default_rng(seed)
    p_b = 1 if psi is PsiParameterization.SCALAR else 2
    ds = make_dataset(random_blocks(rng, 8, p_b=p_b))
    theta = random_theta(rng, psi=psi, p_b=p_b)
    assert joint_gqlf(ds, theta) == pytest.approx(loglik_oracle(ds, theta), abs=1e-10)


def test_loglik_additive_under_duplication(small_dataset):
    theta = random_theta(np.random.default_rng(5))
    doubled = small_dataset.concat(small_dataset)
    assert joint_gqlf(doubled, theta) == 2 * joint_gqlf(small_dataset, theta)
    terms = individual_loglik(doubled, theta)
    assert np.array_equal(terms[:10], terms[10:])


# ---------------------------------------------------------------------------
# Score and information
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_score_and_information_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    psi = list(PsiParameterization)[seed % 3]
    p_b = 1 if psi is PsiParameterization.SCALAR else 2
    ds = make_dataset(random_blocks(rng, 10, p_b=p_b))
    theta = random_theta(rng, psi=psi, p_b=p_b)
    vec = theta.to_vector()
    N = ds.n_individuals

    def H(v):
        return joint_gqlf(ds, ThetaParams.from_vector(v, theta.p_beta, psi))

    grad = fd_gradient(H, vec) / math.sqrt(N)
    score = quasi_score(ds, theta).vector
    np.testing.assert_allclose(score, grad, rtol=1e-6, atol=1e-6 * np.max(np.abs(grad)))

    def S(v):
        return quasi_score(ds, ThetaParams.from_vector(v, theta.p_beta, psi)).vector * math.sqrt(N)

    hess = np.column_stack([fd_gradient(lambda v, j=j: S(v)[j], vec) for j in range(vec.size)])
    info = observed_information(ds, theta)
    fd_info = -0.5 * (hess + hess.T) / N
    np.testing.assert_allclose(info, fd_info, rtol=1e-5, atol=1e-5 * np.max(np.abs(fd_info)))
    np.testing.assert_allclose(info, info.T, rtol=1e-14, atol=1e-15)


def test_beta_score_vanishes_at_exact_mean():
    rng = np.random.default_rng(3)
    theta = random_theta(rng)
    blocks = [(t, x, z, x @ theta.beta) for t, x, z, _ in random_blocks(rng, 6)]
    ds = make_dataset(blocks)
    assert np.all(quasi_score(ds, theta).beta_block == 0.0)


def test_information_beta_block_is_gls_gram(small_dataset):
    theta = random_theta(np.random.default_rng(9))
    gram = sum(
        ind.x_mat.T @ np.linalg.solve(marginal_covariance(ind.z_mat, ind.times, theta.v), ind.x_mat)
        for ind in small_dataset.individuals
    )
    np.testing.assert_allclose(observed_information(small_dataset, theta)[:3, :3], gram / 10, rtol=1e-12)


@pytest.fixture(scope="module")
def big_terms():
    # 10^4 independent individuals at the true parameter; the per-individual
    # contributions are the single-individual versions of Delta_N and Gamma_N.
    ds = simulate_dataset(RngStream(77), Scenario(n_individuals=10_000))
    return _individual_terms(ds, TRUE_THETA, info=True)


def test_score_has_mean_zero(big_terms):
    contrib = np.column_stack([big_terms.score_beta, 0.5 * (big_terms.quad - big_terms.trace)])
    mean = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / math.sqrt(contrib.shape[0])
    assert np.all(np.abs(mean) < 4 * se), (mean, se)


def test_information_cross_block_has_mean_zero(big_terms):
    c = big_terms.info12.reshape(big_terms.info12.shape[0], -1)
    mean = c.mean(axis=0)
    se = c.std(axis=0, ddof=1) / math.sqrt(c.shape[0])
    assert np.all(np.abs(mean) < 4 * se), (mean, se)


# ---------------------------------------------------------------------------
# Sandwich
# ---------------------------------------------------------------------------


def test_sandwich_block_structure(scenario_dataset):
    info = sandwich_estimates(scenario_dataset, TRUE_THETA)
    assert np.all(info.gamma_n[:3, 3:] == 0) and np.all(info.gamma_n[3:, :3] == 0)
    np.testing.assert_allclose(info.s_n, info.s_n.T, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(info.s_n[:3, :3], info.gamma_n[:3, :3], rtol=0, atol=0)
    # the uncentered S_22 need not be PSD in finite samples; the centered one is
    centered = sandwich_estimates(scenario_dataset, TRUE_THETA, centered=True)
    assert np.all(np.linalg.eigvalsh(centered.s_n) > -1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_gaussian_identity_two_code_paths(seed):
    rng = np.random.default_rng(200 + seed)
    psi = list(PsiParameterization)[seed % 3]
    p_b = 1 if psi is PsiParameterization.SCALAR else 2
    ds = make_dataset(random_blocks(rng, 6, p_b=p_b))
    theta = random_theta(rng, psi=psi, p_b=p_b)
    g22 = sandwich_estimates(ds, theta).gamma_n[theta.p_beta :, theta.p_beta :]
    np.testing.assert_allclose(gaussian_score_covariance(ds, theta), g22, rtol=1e-10, atol=1e-12)


def test_gaussian_data_score_variance_matches_information():
    ds = simulate_dataset(RngStream(31), gaussian_scenario(4000))
    t = _individual_terms(ds, TRUE_THETA, info=True)
    q, tr = t.quad, t.trace
    diff = 0.25 * (q[:, :, None] * q[:, None, :] - tr[:, :, None] * tr[:, None, :]) - 0.5 * t.trpp
    diff = diff.reshape(diff.shape[0], -1)
    mean = diff.mean(axis=0)
    se = diff.std(axis=0, ddof=1) / math.sqrt(diff.shape[0])
    assert np.all(np.abs(mean) < 4 * se), (mean / se)
    info = sandwich_estimates(ds, TRUE_THETA)
    penalty = np.trace(np.linalg.solve(info.gamma_n, info.s_n))
    assert abs(penalty - TRUE_THETA.p) < 0.1 * TRUE_THETA.p


def test_cross_score_variance_vanishes_for_symmetric_laws():
    # nested prefixes of one simulated panel per replication; S_12 is scaled by
    # the information diagonal so every entry is on a comparable footing
    norms = []
    for r in range(20):
        full = simulate_dataset(RngStream(500 + r), gaussian_scenario(1000))
        row = []
        for n in (250, 500, 1000):
            ds = Dataset(full.individuals[:n], full.p_beta, full.p_b, full.t_max)
            info = sandwich_estimates(ds, TRUE_THETA)
            d = np.sqrt(np.diag(info.gamma_n))
            row.append(np.linalg.norm(info.s_n[:3, 3:] / np.outer(d[:3], d[3:])))
        norms.append(row)
    medians = np.median(norms, axis=0)
    assert medians[0] > medians[1] > medians[2], medians


def test_singular_information_raises():
    # one individual observed once cannot identify three variance parameters
    ds = make_dataset([(np.array([1.0]), np.ones((1, 1)), np.ones((1, 1)), np.array([0.3]))])
    theta = ThetaParams([0.0], [1.0], 1.0, 1.0, 1.0)
    with pytest.raises(InferenceError, match="singular"):
        sandwich_estimates(ds, theta)


# ---------------------------------------------------------------------------
# Studentization and information criteria
# ---------------------------------------------------------------------------


def test_studentize_trivial_cases():
    u = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(studentize(u, np.eye(3)), u, rtol=1e-15)
    np.testing.assert_allclose(studentize(np.full(4, 2.0), 4 * np.eye(4)), np.ones(4), rtol=1e-15)
    with pytest.raises(InferenceError):
        studentize(u, np.diag([1.0, 0.0, 1.0]))


def test_studentize_whitens_sandwich_draws():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(3, 3))
    avar = a @ a.T + np.eye(3)
    info = InfoMatrices(np.eye(3), avar, 1)
    draws = rng.multivariate_normal(np.zeros(3), avar, size=2000)
    z = np.array([studentize(d, info) for d in draws])
    np.testing.assert_allclose(np.cov(z.T), np.eye(3), atol=0.1)


def _fit_stub(theta, objective):
    return FitResult(theta, objective, np.eye(theta.p), np.ones(theta.p), np.nan, np.nan, True, 0, 0.0, 1)


def test_information_criteria_arithmetic():
    theta7 = TRUE_THETA
    ds1000 = make_dataset([(np.array([1.0]), np.ones((1, 3)), np.ones((1, 1)), np.zeros(1))] * 1000)
    info = InfoMatrices(np.eye(7), np.eye(7), 3)
    aic, bic = information_criteria(ds1000, _fit_stub(theta7, 0.0), info)
    assert bic == pytest.approx(7 * math.log(1000), abs=1e-12)
    assert bic == pytest.approx(48.35429, abs=1e-5)
    assert aic == pytest.approx(14.0)

    # only p, N and H enter the arithmetic, so duck-typed stand-ins suffice
    fit3 = SimpleNamespace(theta_hat=SimpleNamespace(p=3), objective=-100.0)
    _, bic3 = information_criteria(SimpleNamespace(n_individuals=math.e), fit3, InfoMatrices(np.eye(3), np.eye(3), 1))
    assert bic3 == pytest.approx(203.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Quasi-Kullback-Leibler
# ---------------------------------------------------------------------------


def kl_oracle(ds, theta, ref):
    f1 = f2 = 0.0
    for ind in ds.individuals:
        s = marginal_covariance(ind.z_mat, ind.times, theta.v, theta.psi)
        s0 = marginal_covariance(ind.z_mat, ind.times, ref.v, ref.psi)
        f1 += np.linalg.slogdet(s0)[1] - np.linalg.slogdet(s)[1] - (np.trace(np.linalg.solve(s, s0)) - ind.n)
        d = ind.x_mat @ (theta.beta - ref.beta)
        f2 += d @ np.linalg.solve(s, d)
    return f1 / ds.n_individuals, f2 / ds.n_individuals


def test_quasi_kl_zero_at_reference(scenario_dataset):
    np.testing.assert_allclose(quasi_kl_diagnostics(scenario_dataset, TRUE_THETA, TRUE_THETA), 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_quasi_kl_signs_and_oracle(seed, small_dataset):
    rng = np.random.default_rng(300 + seed)
    theta, ref = random_theta(rng), random_theta(rng)
    y, f1, f2 = quasi_kl_diagnostics(small_dataset, theta, ref)
    o1, o2 = kl_oracle(small_dataset, theta, ref)
    assert f1 <= 0 and f2 >= 0
    assert f1 == pytest.approx(o1, abs=1e-10)
    assert f2 == pytest.approx(o2, abs=1e-10)
    expected_y = (joint_gqlf(small_dataset, theta) - joint_gqlf(small_dataset, ref)) / small_dataset.n_individuals
    assert y == pytest.approx(expected_y, abs=1e-12)


def test_quasi_kl_detects_covariance_change(scenario_dataset):
    # same covariance, different beta: F1 = 0; any covariance change: F1 < 0
    shifted = TRUE_THETA.with_beta(TRUE_THETA.beta + 0.1)
    assert quasi_kl_diagnostics(scenario_dataset, shifted, TRUE_THETA)[1] == pytest.approx(0.0, abs=1e-12)
    for v in ([3.0, 1.3, 0.16, 0.25], [3.01, 1.31, 0.16, 0.25], [3.01, 1.3, 0.17, 0.25], [3.01, 1.3, 0.16, 0.26]):
        assert quasi_kl_diagnostics(scenario_dataset, TRUE_THETA.with_v(v), TRUE_THETA)[1] < -1e-8
