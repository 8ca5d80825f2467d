"""Joint and three-stage Gaussian quasi-likelihood estimators.

The optimizer always minimizes ``-H_N / N`` so that tolerances do not scale
with the number of individuals.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DomainError, InferenceError, IntouError, NumericalError, RankDeficiencyError
from .gqlf import (
    FitResult,
    InfoMatrices,
    individual_loglik,
    information_criteria,
    joint_gqlf,
    observed_information,
    quasi_score,
    sandwich_estimates,
)
from .model_core import Dataset, PsiParameterization, ThetaParams, intou_covariance, psi_matrix
from .optimizer import BoundTransform, OptimConfig, from_unconstrained, nelder_mead, to_unconstrained
from .packed import group_sigma, spd_inverse


@dataclass
class FitConfig:
    optim: OptimConfig = field(default_factory=OptimConfig)
    psi: PsiParameterization = PsiParameterization.SCALAR
    start: ThetaParams | None = None
    centered_sandwich: bool = False
    keep_trace: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d or {})
        return cls(
            optim=OptimConfig.from_dict(d.get("optim", {})),
            psi=PsiParameterization(d.get("psi", "scalar")),
            start=ThetaParams.from_dict(d["start"]) if d.get("start") else None,
            centered_sandwich=bool(d.get("centered_sandwich", False)),
        )


class StageError(IntouError):
    """A stepwise stage failed; ``stage`` is 1, 2 or 3 and ``cause`` the original error."""

    def __init__(self, stage: int, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class StepwiseResult:
    beta1: np.ndarray
    v_tilde: np.ndarray
    beta_tilde: np.ndarray
    stage_times: tuple
    fit: FitResult


# ---------------------------------------------------------------------------
# Starting values
# ---------------------------------------------------------------------------


def default_start(dataset: Dataset, psi=PsiParameterization.SCALAR, beta=None) -> ThetaParams:
    """OLS for beta, residual variance split in thirds across b, W and eps, lambda = 1."""
    if beta is None:
        beta = stage1_ols(dataset)
    resid = dataset.packed.yflat - dataset.packed.xflat @ beta
    s2 = max(float(np.mean(resid**2)), 1e-8)
    z2 = float(np.mean(np.sum(dataset.packed.zflat**2, axis=1)))
    comp = s2 / 3.0
    psi_var = comp / z2 if z2 > 0 else comp
    p_b = dataset.p_b
    if psi is PsiParameterization.SCALAR:
        gamma = np.array([psi_var])
    elif psi is PsiParameterization.DIAGONAL_LOG:
        gamma = np.full(p_b, math.log(psi_var / p_b))
    else:
        gamma = np.zeros(p_b * (p_b + 1) // 2)
        pos = 0
        for row in range(p_b):
            gamma[pos + row] = 0.5 * math.log(psi_var / p_b)
            pos += row + 1
    hdiag = np.mean(np.diag(intou_covariance(dataset.packed.t_unique, 1.0, 1.0)))
    sigma2 = comp / hdiag
    return ThetaParams(beta, gamma, 1.0, sigma2, comp, psi)


def _clip_to_box(theta: ThetaParams, box) -> ThetaParams:
    lo, hi = box
    clip = lambda a: float(min(max(a, lo * 1.0001), hi / 1.0001))
    gamma = theta.gamma
    if theta.psi is PsiParameterization.SCALAR:
        gamma = np.array([clip(gamma[0])])
    return ThetaParams(theta.beta, gamma, clip(theta.lam), clip(theta.sigma2), clip(theta.sigma_eps2), theta.psi)


# ---------------------------------------------------------------------------
# Joint estimator
# ---------------------------------------------------------------------------


def _safe_mean_loglik(dataset, theta) -> float:
    try:
        return float(np.sum(individual_loglik(dataset, theta))) / dataset.n_individuals
    except (NumericalError, DomainError):
        return -np.inf


def _finish(dataset, theta_hat, objective, converged, n_eval, wall, method, centered, trace) -> FitResult:
    """Attach sandwich inference; a singular plug-in information leaves NaN standard errors and a message."""
    p = theta_hat.p
    nan_mat = np.full((p, p), np.nan)
    fit = FitResult(theta_hat, objective, nan_mat, np.full(p, np.nan), np.nan, np.nan, converged, n_eval, wall,
                    dataset.n_individuals, method, None, trace)
    fit.bic = float(-2.0 * objective + p * math.log(dataset.n_individuals))
    try:
        info = sandwich_estimates(dataset, theta_hat, centered=centered)
        avar = info.avar
        if not np.all(np.isfinite(avar)):
            raise InferenceError("sandwich covariance is not finite")
    except InferenceError as exc:
        fit.inference_error = str(exc)
        return fit
    fit.info, fit.avar = info, avar
    fit.std_errors = np.sqrt(np.clip(np.diag(avar), 0.0, None) / dataset.n_individuals)
    fit.aic, fit.bic = information_criteria(dataset, fit, info)
    return fit


def fit_joint(dataset: Dataset, config: FitConfig | None = None) -> FitResult:
    """Joint Gaussian quasi-maximum likelihood over the full parameter."""
    config = config or FitConfig()
    t0 = time.perf_counter()
    start = config.start or default_start(dataset, config.psi)
    start.check_admissible()
    start = _clip_to_box(start, config.optim.box)
    tr = BoundTransform.for_theta(start, config.optim.box)

    def objective(x):
        if not tr.in_box(x):
            return np.inf
        return -_safe_mean_loglik(dataset, from_unconstrained(x, tr))

    res = nelder_mead(objective, to_unconstrained(start, tr), config.optim)
    theta_hat = from_unconstrained(res.x, tr)
    wall = time.perf_counter() - t0
    return _finish(dataset, theta_hat, -res.fun * dataset.n_individuals, res.converged, res.n_eval, wall,
                   "joint", config.centered_sandwich, res.trace if config.keep_trace else [])


# ---------------------------------------------------------------------------
# Stepwise estimator
# ---------------------------------------------------------------------------


def _gram_solve(gram, rhs, what):
    try:
        cf = linalg.cho_factor(gram, lower=True)
        # a pivot lost to round-off still factors; compare it with the column scale
        if np.all(np.diag(cf[0]) ** 2 > 1e-12 * np.diag(gram)):
            return linalg.cho_solve(cf, rhs)
    except linalg.LinAlgError:
        pass
    # locate the first column that is (numerically) spanned by earlier ones
    scale = np.sqrt(np.maximum(np.diag(gram), 1e-300))
    g = gram / np.outer(scale, scale)
    for k in range(1, g.shape[0] + 1):
        if np.linalg.eigvalsh(g[:k, :k])[0] <= 1e-12 * k:
            raise RankDeficiencyError(f"{what} Gram matrix is singular; column x_{k} is collinear with earlier columns", column=k)
    raise RankDeficiencyError(f"{what} Gram matrix is not positive definite")


def stage1_ols(dataset: Dataset) -> np.ndarray:
    """Pooled least squares ``(sum X'X)^-1 sum X'Y``."""
    X, y = dataset.packed.xflat, dataset.packed.yflat
    return _gram_solve(X.T @ X, X.T @ y, "least-squares")


def stage2_covariance(dataset: Dataset, beta1, config: FitConfig | None = None):
    """Maximize ``v -> H_N(beta1, v)``; returns ``(v_tilde, NMResult)``."""
    config = config or FitConfig()
    beta1 = np.asarray(beta1, dtype=float)
    start = config.start.with_beta(beta1) if config.start is not None else default_start(dataset, config.psi, beta1)
    start.check_admissible()
    start = _clip_to_box(start, config.optim.box)
    tr = BoundTransform.for_theta(start, config.optim.box).v_part
    pb = start.p_beta

    def theta_of(xv):
        return ThetaParams.from_vector(np.concatenate([beta1, tr.inverse(xv)]), pb, start.psi)

    def objective(xv):
        if not tr.in_box(xv):
            return np.inf
        return -_safe_mean_loglik(dataset, theta_of(xv))

    res = nelder_mead(objective, tr.forward(start.v), config.optim)
    return tr.inverse(res.x), res


def stage3_gls(dataset: Dataset, v_tilde, psi=PsiParameterization.SCALAR) -> np.ndarray:
    """Generalized least squares ``(sum X' S^-1 X)^-1 sum X' S^-1 Y`` at ``v_tilde``."""
    v = np.asarray(v_tilde, dtype=float)
    theta = ThetaParams.from_vector(np.concatenate([np.zeros(dataset.p_beta), v]), dataset.p_beta, psi)
    theta.check_admissible()
    psi_m = psi_matrix(theta.gamma, psi)
    gram = np.zeros((dataset.p_beta, dataset.p_beta))
    rhs = np.zeros(dataset.p_beta)
    for grp in dataset.packed.groups:
        sigma = group_sigma(grp, psi_m, theta.lam, theta.sigma2, theta.sigma_eps2)
        prec, _ = spd_inverse(sigma, grp.index)
        px = prec @ grp.x
        gram += np.einsum("kni,knj->ij", grp.x, px)
        rhs += np.einsum("kni,kn->i", px, grp.y)
    return _gram_solve(gram, rhs, "weighted least-squares")


def fit_stepwise(dataset: Dataset, config: FitConfig | None = None) -> StepwiseResult:
    """Stage 1 OLS, Stage 2 covariance fit at the OLS beta, Stage 3 GLS refit."""
    config = config or FitConfig()
    times = []
    t0 = time.perf_counter()
    try:
        beta1 = stage1_ols(dataset)
    except IntouError as exc:
        raise StageError(1, exc) from exc
    times.append(time.perf_counter() - t0)
    t1 = time.perf_counter()
    try:
        v_tilde, res = stage2_covariance(dataset, beta1, config)
    except IntouError as exc:
        raise StageError(2, exc) from exc
    times.append(time.perf_counter() - t1)
    t2 = time.perf_counter()
    try:
        beta_tilde = stage3_gls(dataset, v_tilde, config.psi)
    except IntouError as exc:
        raise StageError(3, exc) from exc
    times.append(time.perf_counter() - t2)
    wall = time.perf_counter() - t0
    theta = ThetaParams.from_vector(np.concatenate([beta_tilde, v_tilde]), dataset.p_beta, config.psi)
    fit = _finish(dataset, theta, joint_gqlf(dataset, theta), res.converged, res.n_eval, wall,
                  "stepwise", config.centered_sandwich, res.trace if config.keep_trace else [])
    return StepwiseResult(beta1, v_tilde, beta_tilde, tuple(times), fit)


# ---------------------------------------------------------------------------
# Reporting on the standard-deviation scale
# ---------------------------------------------------------------------------


def sd_scale_report(fit: FitResult) -> dict:
    """``sigma`` and ``sigma_eps`` with delta-method standard errors."""
    th = fit.theta_hat
    p = th.p
    out = {}
    for name, var, pos in (("sigma", th.sigma2, p - 2), ("sigma_eps", th.sigma_eps2, p - 1)):
        sd = math.sqrt(var)
        out[name] = {"estimate": sd, "std_error": float(fit.std_errors[pos]) / (2.0 * sd)}
    return out


# ---------------------------------------------------------------------------
# Stochastic-expansion diagnostics
# ---------------------------------------------------------------------------


class ExpansionKind(str, enum.Enum):
    JOINT = "joint"
    STEPWISE = "stepwise"


@dataclass
class ExpansionDiag:
    g1: np.ndarray
    g2: np.ndarray
    residual: np.ndarray
    residual1: np.ndarray | None = None  # sqrt(N)(theta_hat - theta0) - g1


def third_derivative_tensor(dataset: Dataset, theta: ThetaParams) -> np.ndarray:
    """``N^-1 d^3 H_N`` by central differences of the analytic observed information."""
    vec = theta.to_vector()
    p = vec.size
    out = np.empty((p, p, p))
    eps3 = np.finfo(float).eps ** (1.0 / 3.0)
    for k in range(p):
        h = eps3 * max(1.0, abs(vec[k]))
        up, dn = vec.copy(), vec.copy()
        up[k] += h
        dn[k] -= h
        g_up = observed_information(dataset, ThetaParams.from_vector(up, theta.p_beta, theta.psi))
        g_dn = observed_information(dataset, ThetaParams.from_vector(dn, theta.p_beta, theta.psi))
        out[:, :, k] = -(g_up - g_dn) / (2.0 * h)
    # symmetrize over all index permutations
    out = (out + out.transpose(0, 2, 1) + out.transpose(1, 0, 2) + out.transpose(1, 2, 0)
           + out.transpose(2, 0, 1) + out.transpose(2, 1, 0)) / 6.0
    if not np.all(np.isfinite(out)):
        raise NumericalError("third-derivative tensor has non-finite entries")
    return out


def _t2(T, a, b):
    return np.einsum("ijk,j,k->i", T, a, b)


def expansion_terms(dataset: Dataset, theta0: ThetaParams, kind, theta_hat=None, parts=None) -> ExpansionDiag:
    """First- and second-order terms of the stochastic expansion of ``sqrt(N)(theta_hat - theta0)``.

    The population matrices are replaced by plug-ins at ``theta0``: the
    block-diagonal information ``A = diag(A11, A22)`` for ``Gamma_0`` and
    ``N^-1 sum X'X`` for the Stage 1 information. ``parts`` may pass
    precomputed ``(delta, gamma_n, T)`` to share work between kinds.

    Joint::

        G1 = A^-1 Delta
        G2 = A^-1 { sqrt(N)(A - Gamma_N) G1 + 1/2 T[G1, G1] }

    Stepwise, with ``w1 = Gamma_(1)^-1 Delta_(1)`` the Stage 1 term,
    ``wb = A11^-1 Delta_beta`` and ``wv = A22^-1 Delta_v``::

        G2_v = A22^-1 { sqrt(N)(A22 - Gamma_N22) wv - sqrt(N) Gamma_N21 w1
                        + 1/2 T_vbb[w1, w1] + T_vvb[wv, w1] + 1/2 T_vvv[wv, wv] }
        G2_b = A11^-1 { sqrt(N)(A11 - Gamma_N11) wb - sqrt(N) Gamma_N12 wv
                        + T_bbv[wb, wv] + 1/2 T_bbb[wb, wb] + 1/2 T_bvv[wv, wv] }

    ``T = N^-1 d^3 H_N(theta0)``.
    """
    kind = ExpansionKind(kind)
    N = dataset.n_individuals
    rn = math.sqrt(N)
    pb = theta0.p_beta
    A = sandwich_estimates(dataset, theta0).gamma_n
    if parts is None:
        parts = (quasi_score(dataset, theta0).vector, observed_information(dataset, theta0),
                 third_derivative_tensor(dataset, theta0))
    delta, gam, T = parts
    g1 = np.linalg.solve(A, delta)
    b, v = slice(0, pb), slice(pb, None)
    if kind is ExpansionKind.JOINT:
        g2 = np.linalg.solve(A, rn * (A - gam) @ g1 + 0.5 * _t2(T, g1, g1))
    else:
        X, y = dataset.packed.xflat, dataset.packed.yflat
        gram1 = X.T @ X / N
        delta1 = X.T @ (y - X @ theta0.beta) / rn
        w1 = np.linalg.solve(gram1, delta1)
        wb, wv = g1[b], g1[v]
        Tv, Tb = T[v], T[b]
        inner_v = (rn * (A[v, v] - gam[v, v]) @ wv - rn * gam[v, b] @ w1
                   + 0.5 * np.einsum("ijk,j,k->i", Tv[:, b, b], w1, w1)
                   + np.einsum("ijk,j,k->i", Tv[:, v, b], wv, w1)
                   + 0.5 * np.einsum("ijk,j,k->i", Tv[:, v, v], wv, wv))
        inner_b = (rn * (A[b, b] - gam[b, b]) @ wb - rn * gam[b, v] @ wv
                   + np.einsum("ijk,j,k->i", Tb[:, b, v], wb, wv)
                   + 0.5 * np.einsum("ijk,j,k->i", Tb[:, b, b], wb, wb)
                   + 0.5 * np.einsum("ijk,j,k->i", Tb[:, v, v], wv, wv))
        g2 = np.concatenate([np.linalg.solve(A[b, b], inner_b), np.linalg.solve(A[v, v], inner_v)])
    if theta_hat is None:
        return ExpansionDiag(g1, g2, np.full_like(g1, np.nan))
    u = rn * (theta_hat.to_vector() - theta0.to_vector())
    r1 = u - g1
    return ExpansionDiag(g1, g2, r1 - g2 / rn, r1)
