"""Vectorized per-individual evaluation of the Gaussian quasi-likelihood.

Two layouts are built once per dataset:

* a ragged flat layout (offsets into concatenated observations) consumed by a
  compiled kernel that evaluates only the log-likelihood; this is the
  optimizer's hot path;
* individuals grouped by ``n_i`` into dense stacks, consumed by batched numpy
  code for score, information and sandwich blocks.

Exponentials of ``-lambda * t`` are evaluated once per distinct time value
and distinct lag, then gathered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import NumericalError

LOG_2PI = math.log(2.0 * math.pi)


@numba.njit(cache=True)
def _loglik_kernel(offsets, tflat, t_idx, pair_off, d_idx, em_t, em_d, zflat, psi, resid, lam2, c, se2, out, work):
    n_ind = offsets.shape[0] - 1
    p_b = psi.shape[0]
    for i in range(n_ind):
        a = offsets[i]
        n = offsets[i + 1] - a
        p = pair_off[i]
        S = work
        for j in range(n):
            ej = em_t[t_idx[a + j]]
            for k in range(j + 1):
                g = lam2 * tflat[a + k] + ej + em_t[t_idx[a + k]] - em_d[d_idx[p]]
                p += 1
                re = 0.0
                for u in range(p_b):
                    zu = zflat[a + j, u]
                    for w in range(p_b):
                        re += zu * psi[u, w] * zflat[a + k, w]
                S[j, k] = c * g + re
            S[j, j] += se2
        logdet = 0.0
        for j in range(n):
            s = S[j, j]
            for m in range(j):
                s -= S[j, m] * S[j, m]
            if not s > 0.0:
                return i
            d = math.sqrt(s)
            S[j, j] = d
            logdet += math.log(d)
            for k in range(j + 1, n):
                s = S[k, j]
                for m in range(j):
                    s -= S[k, m] * S[j, m]
                S[k, j] = s / d
        quad = 0.0
        z = work[n]
        for j in range(n):
            s = resid[a + j]
            for m in range(j):
                s -= S[j, m] * z[m]
            z[j] = s / S[j, j]
            quad += z[j] * z[j]
        out[i] = -n * 0.9189385332046727 - logdet - 0.5 * quad
    return -1


@dataclass
class Group:
    """Individuals sharing the same number of observations."""

    index: np.ndarray  # positions in the dataset
    times: np.ndarray  # (k, n)
    x: np.ndarray  # (k, n, p_beta)
    z: np.ndarray  # (k, n, p_b)
    y: np.ndarray  # (k, n)
    tmin: np.ndarray  # (k, n, n)
    tabs: np.ndarray  # (k, n, n)

    @property
    def n(self) -> int:
        return self.times.shape[1]


class PackedData:
    def __init__(self, groups, offsets, tflat, t_idx, t_unique, pair_off, d_idx, d_unique, xflat, zflat, yflat):
        self.groups = groups
        self.offsets = offsets
        self.tflat = tflat
        self.t_idx = t_idx
        self.t_unique = t_unique
        self.pair_off = pair_off
        self.d_idx = d_idx
        self.d_unique = d_unique
        self.xflat = xflat
        self.zflat = zflat
        self.yflat = yflat
        self.n_individuals = offsets.size - 1
        self.max_n = int(np.max(np.diff(offsets)))

    @classmethod
    def from_dataset(cls, dataset) -> "PackedData":
        inds = dataset.individuals
        sizes = np.array([ind.n for ind in inds], dtype=np.int64)
        offsets = np.zeros(len(inds) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum(sizes)
        tflat = np.concatenate([ind.times for ind in inds])
        xflat = np.vstack([ind.x_mat for ind in inds])
        zflat = np.ascontiguousarray(np.vstack([ind.z_mat for ind in inds]))
        yflat = np.concatenate([ind.y for ind in inds])
        t_unique, t_idx = np.unique(tflat, return_inverse=True)
        lags = []
        for ind in inds:
            t = ind.times
            rows, cols = np.tril_indices(t.size)
            lags.append(t[rows] - t[cols])
        d_unique, d_idx = np.unique(np.concatenate(lags), return_inverse=True)
        pair_off = np.zeros(len(inds) + 1, dtype=np.int64)
        pair_off[1:] = np.cumsum(sizes * (sizes + 1) // 2)

        groups = []
        for n in np.unique(sizes):
            idx = np.flatnonzero(sizes == n)
            T = np.stack([inds[i].times for i in idx])
            groups.append(
                Group(
                    index=idx,
                    times=T,
                    x=np.stack([inds[i].x_mat for i in idx]),
                    z=np.stack([inds[i].z_mat for i in idx]),
                    y=np.stack([inds[i].y for i in idx]),
                    tmin=np.minimum(T[:, :, None], T[:, None, :]),
                    tabs=np.abs(T[:, :, None] - T[:, None, :]),
                )
            )
        return cls(
            groups,
            offsets,
            tflat,
            t_idx.astype(np.int64),
            t_unique,
            pair_off,
            d_idx.astype(np.int64),
            d_unique,
            xflat,
            zflat,
            yflat,
        )

    # -- fast path -------------------------------------------------------

    def loglik_terms(self, beta, psi, lam, sigma2, sigma_eps2) -> np.ndarray:
        """Per-individual Gaussian log-densities, in dataset order."""
        resid = self.yflat - self.xflat @ beta
        em_t = np.expm1(-lam * self.t_unique)
        em_d = np.expm1(-lam * self.d_unique)
        out = np.empty(self.n_individuals)
        work = np.empty((self.max_n + 1, self.max_n))
        bad = _loglik_kernel(
            self.offsets,
            self.tflat,
            self.t_idx,
            self.pair_off,
            self.d_idx,
            em_t,
            em_d,
            self.zflat,
            np.ascontiguousarray(psi, dtype=float),
            resid,
            2.0 * lam,
            sigma2 / (2.0 * lam**3),
            sigma_eps2,
            out,
            work,
        )
        if bad >= 0:
            raise NumericalError("covariance matrix is not positive definite", individual=int(bad))
        return out


# ---------------------------------------------------------------------------
# Batched covariance blocks and their v-derivatives for one group
# ---------------------------------------------------------------------------


def group_sigma(group: Group, psi, lam, sigma2, sigma_eps2) -> np.ndarray:
    em = np.expm1(-lam * group.times)
    g = 2.0 * lam * group.tmin + (em[:, :, None] + em[:, None, :]) - np.expm1(-lam * group.tabs)
    re = np.einsum("kia,ab,kjb->kij", group.z, psi, group.z)
    return sigma2 / (2.0 * lam**3) * g + re + sigma_eps2 * np.eye(group.n)


def group_sigma_derivs(group: Group, theta, second: bool = True):
    """Sigma, first v-derivatives and (optionally) second v-derivatives.

    Second derivatives are returned as a dict keyed by ``(j, k)`` with
    ``j <= k``; absent keys are identically zero.
    """
    from .model_core import psi_derivs, psi_matrix

    lam, sigma2 = theta.lam, theta.sigma2
    T, tmin, tabs = group.times, group.tmin, group.tabs
    ea = np.exp(-lam * T)
    ed = np.exp(-lam * tabs)
    em = np.expm1(-lam * T)
    g = 2.0 * lam * tmin + (em[:, :, None] + em[:, None, :]) - np.expm1(-lam * tabs)
    g1 = 2.0 * tmin - ((T * ea)[:, :, None] + (T * ea)[:, None, :]) + tabs * ed
    c0 = 1.0 / (2.0 * lam**3)
    c1 = -3.0 / (2.0 * lam**4)
    h_s = c0 * g
    h_ls = c1 * g + c0 * g1
    psi = psi_matrix(theta.gamma, theta.psi)
    dpsi, d2psi = psi_derivs(theta.gamma, theta.psi)
    Z = group.z
    eye = np.broadcast_to(np.eye(group.n), (T.shape[0], group.n, group.n))
    sigma = sigma2 * h_s + np.einsum("kia,ab,kjb->kij", Z, psi, Z) + theta.sigma_eps2 * eye
    m = theta.p_gamma
    d1 = [np.einsum("kia,ab,kjb->kij", Z, dpsi[a], Z) for a in range(m)]
    d1 += [sigma2 * h_ls, h_s, eye]
    if not second:
        return sigma, d1, {}
    g2 = (T**2 * ea)[:, :, None] + (T**2 * ea)[:, None, :] - tabs**2 * ed
    c2 = 6.0 / lam**5
    d2 = {}
    for a in range(m):
        for b in range(a, m):
            if np.any(d2psi[a, b]):
                d2[(a, b)] = np.einsum("kia,ab,kjb->kij", Z, d2psi[a, b], Z)
    d2[(m, m)] = sigma2 * (c2 * g + 2.0 * c1 * g1 + c0 * g2)
    d2[(m, m + 1)] = h_ls
    return sigma, d1, d2


def spd_inverse(sigma: np.ndarray, index: np.ndarray):
    """Inverse and log-determinant of a stack of SPD matrices."""
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        for pos in range(sigma.shape[0]):
            try:
                np.linalg.cholesky(sigma[pos])
            except np.linalg.LinAlgError:
                raise NumericalError("covariance matrix is not positive definite", individual=int(index[pos]))
        raise
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    eye = np.broadcast_to(np.eye(sigma.shape[1]), sigma.shape)
    linv = np.linalg.solve(chol, eye)
    prec = np.einsum("kji,kjl->kil", linv, linv)
    return prec, logdet
