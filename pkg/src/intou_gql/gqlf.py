"""Gaussian quasi-likelihood and the inference objects built on it.

All sums over individuals run over per-individual arrays laid out in dataset
order, so results do not depend on how the work was grouped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InferenceError
from .model_core import (
    Dataset,
    ThetaParams,
    intou_covariance_derivs,
    marginal_covariance,
    psi_derivs,
    psi_matrix,
)
from .packed import LOG_2PI, group_sigma_derivs, spd_inverse


@dataclass
class ScoreVector:
    beta_block: np.ndarray
    v_block: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta_block, self.v_block])


@dataclass
class InfoMatrices:
    """Plug-in information ``gamma_n`` (block diagonal) and score variance ``s_n``."""

    gamma_n: np.ndarray
    s_n: np.ndarray
    p_beta: int

    @property
    def avar(self) -> np.ndarray:
        """Sandwich ``Gamma^-1 S Gamma^-1``, the asymptotic covariance of ``sqrt(N)(theta_hat - theta)``."""
        ginv = np.linalg.inv(self.gamma_n)
        out = ginv @ self.s_n @ ginv
        return 0.5 * (out + out.T)


@dataclass
class FitResult:
    theta_hat: ThetaParams
    objective: float
    avar: np.ndarray
    std_errors: np.ndarray
    aic: float
    bic: float
    converged: bool
    n_eval: int
    wall_time: float
    n_individuals: int
    method: str = "joint"
    info: InfoMatrices | None = None
    trace: list = field(default_factory=list, repr=False)
    inference_error: str = ""

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "parameter_names": self.theta_hat.names(),
            "theta_hat": self.theta_hat.to_dict(),
            "objective": self.objective,
            "avar": [[_finite_or_none(a) for a in row] for row in np.asarray(self.avar)],
            "std_errors": [_finite_or_none(a) for a in np.asarray(self.std_errors)],
            "aic": _finite_or_none(self.aic),
            "bic": _finite_or_none(self.bic),
            "converged": bool(self.converged),
            "n_eval": int(self.n_eval),
            "wall_time_s": self.wall_time,
            "n_individuals": self.n_individuals,
            "inference_error": self.inference_error,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _finite_or_none(x):
    x = float(x)
    return x if math.isfinite(x) else None


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def individual_loglik(dataset: Dataset, theta: ThetaParams) -> np.ndarray:
    """Per-individual ``log phi(Y_i; mu_i, Sigma_i)`` via the compiled kernel."""
    theta.check_admissible()
    psi = psi_matrix(theta.gamma, theta.psi)
    return dataset.packed.loglik_terms(theta.beta, psi, theta.lam, theta.sigma2, theta.sigma_eps2)


def joint_gqlf(dataset: Dataset, theta: ThetaParams) -> float:
    """Joint Gaussian quasi-log-likelihood ``H_N(theta)``."""
    return float(np.sum(individual_loglik(dataset, theta)))


# ---------------------------------------------------------------------------
# Per-individual building blocks (batched by group)
# ---------------------------------------------------------------------------


@dataclass
class _Terms:
    loglik: np.ndarray  # (N,)
    score_beta: np.ndarray  # (N, p_beta)   X^T P r
    quad: np.ndarray  # (N, p_v)       r^T A_j r
    trace: np.ndarray  # (N, p_v)       tr(P D_j)
    xpx: np.ndarray | None = None  # (N, p_beta, p_beta)
    info12: np.ndarray | None = None  # (N, p_beta, p_v)
    info22: np.ndarray | None = None  # (N, p_v, p_v)
    trpp: np.ndarray | None = None  # (N, p_v, p_v)  tr(P D_j P D_k)


def _individual_terms(dataset: Dataset, theta: ThetaParams, info: bool = False) -> _Terms:
    theta.check_admissible()
    N = dataset.n_individuals
    pb, pv = theta.p_beta, theta.p_v
    t = _Terms(np.empty(N), np.empty((N, pb)), np.empty((N, pv)), np.empty((N, pv)))
    if info:
        t.xpx = np.empty((N, pb, pb))
        t.info12 = np.empty((N, pb, pv))
        t.info22 = np.empty((N, pv, pv))
        t.trpp = np.empty((N, pv, pv))
    for grp in dataset.packed.groups:
        idx = grp.index
        sigma, d1, d2 = group_sigma_derivs(grp, theta, second=info)
        prec, logdet = spd_inverse(sigma, idx)
        r = grp.y - grp.x @ theta.beta
        pr = np.einsum("kij,kj->ki", prec, r)
        t.loglik[idx] = -0.5 * (grp.n * LOG_2PI + logdet + np.einsum("ki,ki->k", r, pr))
        t.score_beta[idx] = np.einsum("kni,kn->ki", grp.x, pr)
        dpr = [np.einsum("kij,kj->ki", D, pr) for D in d1]
        pd = [prec @ D for D in d1]
        for j in range(pv):
            t.quad[idx, j] = np.einsum("ki,ki->k", pr, dpr[j])
            t.trace[idx, j] = np.einsum("kii->k", pd[j])
        if not info:
            continue
        px = prec @ grp.x
        t.xpx[idx] = np.einsum("kni,knj->kij", grp.x, px)
        pdpr = [np.einsum("kij,kj->ki", prec, w) for w in dpr]
        for j in range(pv):
            t.info12[idx, :, j] = np.einsum("kni,kn->ki", grp.x, pdpr[j])
        for j in range(pv):
            for k in range(j, pv):
                trpp = np.einsum("kij,kji->k", pd[j], pd[k])
                val = np.einsum("ki,ki->k", dpr[j], pdpr[k]) - 0.5 * trpp
                D2 = d2.get((j, k))
                if D2 is not None:
                    val += -0.5 * np.einsum("ki,kij,kj->k", pr, D2, pr) + 0.5 * np.einsum("kij,kji->k", prec, D2)
                t.info22[idx, j, k] = t.info22[idx, k, j] = val
                t.trpp[idx, j, k] = t.trpp[idx, k, j] = trpp
    return t


# ---------------------------------------------------------------------------
# Score and information
# ---------------------------------------------------------------------------


def quasi_score(dataset: Dataset, theta: ThetaParams) -> ScoreVector:
    """``Delta_N(theta) = N^{-1/2} d/dtheta H_N(theta)``, analytically."""
    t = _individual_terms(dataset, theta)
    rn = math.sqrt(dataset.n_individuals)
    return ScoreVector(t.score_beta.sum(axis=0) / rn, 0.5 * (t.quad - t.trace).sum(axis=0) / rn)


def observed_information(dataset: Dataset, theta: ThetaParams) -> np.ndarray:
    """``Gamma_N(theta) = -N^{-1} d^2/dtheta^2 H_N(theta)``, analytically."""
    t = _individual_terms(dataset, theta, info=True)
    N = dataset.n_individuals
    pb = theta.p_beta
    out = np.empty((theta.p, theta.p))
    out[:pb, :pb] = t.xpx.sum(axis=0) / N
    out[:pb, pb:] = t.info12.sum(axis=0) / N
    out[pb:, :pb] = out[:pb, pb:].T
    out[pb:, pb:] = t.info22.sum(axis=0) / N
    return out


def sandwich_estimates(dataset: Dataset, theta_hat: ThetaParams, centered: bool = False) -> InfoMatrices:
    """Plug-in ``(Gamma_hat, S_hat)`` at a fitted parameter.

    ``S_hat_12`` uses ``(X_i^T Sigma_i^-1 r_i) (r_i^T A_ij r_i)`` and
    ``S_hat_11`` uses ``X_i^T Sigma_i^-1 X_i``; see README for the reading of
    these blocks. With ``centered=True`` the v-block products use
    ``r^T A r - tr(Sigma^-1 dSigma)`` in both factors, which is always PSD.
    """
    t = _individual_terms(dataset, theta_hat, info=True)
    N = dataset.n_individuals
    pb, p = theta_hat.p_beta, theta_hat.p
    gamma_n = np.zeros((p, p))
    gamma_n[:pb, :pb] = t.xpx.sum(axis=0) / N
    gamma_n[pb:, pb:] = 0.5 * t.trpp.sum(axis=0) / N
    s_n = np.empty((p, p))
    s_n[:pb, :pb] = gamma_n[:pb, :pb]
    if centered:
        dev = t.quad - t.trace
        s_n[:pb, pb:] = np.einsum("ni,nj->ij", t.score_beta, dev) / (2 * N)
        s_n[pb:, pb:] = np.einsum("ni,nj->ij", dev, dev) / (4 * N)
    else:
        s_n[:pb, pb:] = np.einsum("ni,nj->ij", t.score_beta, t.quad) / (2 * N)
        s_n[pb:, pb:] = (
            np.einsum("ni,nj->ij", t.quad, t.quad) - np.einsum("ni,nj->ij", t.trace, t.trace)
        ) / (4 * N)
    s_n[pb:, :pb] = s_n[:pb, pb:].T
    for block in (gamma_n[:pb, :pb], gamma_n[pb:, pb:]):
        w = np.linalg.eigvalsh(block)
        if not (w[0] > 1e-12 * max(w[-1], 1e-300)):
            raise InferenceError(
                "plug-in information is singular; use more individuals or reparameterize Psi"
            )
    return InfoMatrices(gamma_n, s_n, pb)


def gaussian_score_covariance(dataset: Dataset, theta: ThetaParams) -> np.ndarray:
    """Gaussian-model value of ``Cov[Delta_N,v]``, computed individual by individual.

    Uses Isserlis' theorem, ``E[(r'Ar)(r'Br)] = tr(A S)tr(B S) + 2 tr(A S B S)``,
    with the trace product evaluated through ``vec(A)' (S kron S) vec(B)``.
    This path shares no code with :func:`sandwich_estimates`.
    """
    gamma = theta.gamma
    pv = theta.p_v
    total = np.zeros((pv, pv))
    for ind in dataset.individuals:
        sigma = marginal_covariance(ind.z_mat, ind.times, theta.v, theta.psi)
        _, dh_l, dh_s, _, _ = intou_covariance_derivs(ind.times, theta.lam, theta.sigma2)
        dpsi, _ = psi_derivs(gamma, theta.psi)
        derivs = [ind.z_mat @ dp @ ind.z_mat.T for dp in dpsi] + [dh_l, dh_s, np.eye(ind.n)]
        sinv = np.linalg.inv(sigma)
        amats = [sinv @ D @ sinv for D in derivs]
        kron = np.kron(sigma, sigma)
        vecs = [A.reshape(-1) for A in amats]
        tr = np.array([np.sum(A * sigma) for A in amats])
        e_qq = np.outer(tr, tr) + 2.0 * np.array([[va @ kron @ vb for vb in vecs] for va in vecs])
        total += 0.25 * (e_qq - np.outer(tr, tr))
    return total / dataset.n_individuals


# ---------------------------------------------------------------------------
# Studentization and information criteria
# ---------------------------------------------------------------------------


def inverse_sqrt(mat: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root through an eigendecomposition."""
    w, V = np.linalg.eigh(0.5 * (mat + mat.T))
    if not np.all(np.isfinite(w)) or w[0] <= 0:
        raise InferenceError(f"asymptotic covariance is not positive definite (min eigenvalue {w[0]:.3g})")
    return (V / np.sqrt(w)) @ V.T


def studentize(u_scaled, info) -> np.ndarray:
    """Map ``sqrt(N)(theta_hat - theta_ref)`` to an approximately standard normal vector.

    ``info`` may be an :class:`InfoMatrices` or the sandwich matrix itself.
    """
    avar = info.avar if isinstance(info, InfoMatrices) else np.asarray(info, dtype=float)
    return inverse_sqrt(avar) @ np.asarray(u_scaled, dtype=float)


def information_criteria(dataset: Dataset, fit: FitResult, info: InfoMatrices) -> tuple[float, float]:
    """``AIC = -2 H + 2 tr(Gamma^-1 S)``, ``BIC = -2 H + p log N``."""
    p = fit.theta_hat.p
    penalty = np.trace(np.linalg.solve(info.gamma_n, info.s_n))
    aic = -2.0 * fit.objective + 2.0 * penalty
    bic = -2.0 * fit.objective + p * math.log(dataset.n_individuals)
    return float(aic), float(bic)


# ---------------------------------------------------------------------------
# Quasi-Kullback-Leibler diagnostics
# ---------------------------------------------------------------------------


def quasi_kl_diagnostics(dataset: Dataset, theta: ThetaParams, theta_ref: ThetaParams):
    """Return ``(Y_N, F_N1, F_N2)`` with ``theta_ref`` in the role of the truth.

    ``F_N1 <= 0`` and ``F_N2 >= 0`` always hold.
    """
    N = dataset.n_individuals
    y_n = (joint_gqlf(dataset, theta) - joint_gqlf(dataset, theta_ref)) / N
    f1 = np.empty(N)
    f2 = np.empty(N)
    for grp in dataset.packed.groups:
        s, _, _ = group_sigma_derivs(grp, theta, second=False)
        s_ref, _, _ = group_sigma_derivs(grp, theta_ref, second=False)
        prec, logdet = spd_inverse(s, grp.index)
        _, logdet_ref = spd_inverse(s_ref, grp.index)
        dmu = grp.x @ (theta.beta - theta_ref.beta)
        f1[grp.index] = logdet_ref - logdet - (np.einsum("kij,kji->k", prec, s_ref) - grp.n)
        f2[grp.index] = np.einsum("ki,kij,kj->k", dmu, prec, dmu)
    return float(y_n), float(f1.sum() / N), float(f2.sum() / N)
