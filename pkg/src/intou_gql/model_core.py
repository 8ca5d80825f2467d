"""Domain types and deterministic mean/covariance builders.

The marginal model for one individual is

    Y_i ~ (X_i beta, Z_i Psi(gamma) Z_i^T + H_i(lambda, sigma2) + sigma_eps2 I)

where ``H_i`` is the covariance of an integrated Ornstein-Uhlenbeck path
observed at the individual's sampling times.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, InputError

DEFAULT_BOX = (1e-4, 1e4)


class PsiParameterization(str, enum.Enum):
    """How the random-effect covariance is built from ``gamma``.

    SCALAR
        ``p_b = 1`` and ``Psi = [[gamma_1]]`` with ``gamma_1 >= 0``.
    DIAGONAL_LOG
        ``Psi = diag(exp(gamma))``.
    LOWER_LOG_CHOL
        ``Psi = L L^T`` where ``gamma`` holds the lower triangle of ``L``
        row by row and diagonal entries of ``L`` are stored as logs.
    """

    SCALAR = "scalar"
    DIAGONAL_LOG = "diagonal_log"
    LOWER_LOG_CHOL = "lower_log_chol"

    def p_b(self, p_gamma: int) -> int:
        if self is PsiParameterization.SCALAR:
            if p_gamma != 1:
                raise InputError(f"scalar Psi needs exactly one gamma, got {p_gamma}")
            return 1
        if self is PsiParameterization.DIAGONAL_LOG:
            return p_gamma
        q = int(round((np.sqrt(8 * p_gamma + 1) - 1) / 2))
        if q * (q + 1) // 2 != p_gamma:
            raise InputError(f"{p_gamma} is not a triangular number of Cholesky entries")
        return q

    def p_gamma(self, p_b: int) -> int:
        if self is PsiParameterization.SCALAR:
            if p_b != 1:
                raise InputError("scalar Psi requires p_b == 1")
            return 1
        if self is PsiParameterization.DIAGONAL_LOG:
            return p_b
        return p_b * (p_b + 1) // 2


@dataclass(frozen=True)
class ThetaParams:
    """Full parameter ``(beta, gamma, lambda, sigma2, sigma_eps2)``.

    The flat vector layout used everywhere (score, information, optimizer)
    is ``[beta..., gamma..., lam, sigma2, sigma_eps2]``.
    """

    beta: np.ndarray
    gamma: np.ndarray
    lam: float
    sigma2: float
    sigma_eps2: float
    psi: PsiParameterization = PsiParameterization.SCALAR

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        object.__setattr__(self, "lam", float(self.lam))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "sigma_eps2", float(self.sigma_eps2))
        object.__setattr__(self, "psi", PsiParameterization(self.psi))
        self.psi.p_b(self.gamma.size)

    @property
    def p_beta(self) -> int:
        return self.beta.size

    @property
    def p_gamma(self) -> int:
        return self.gamma.size

    @property
    def p_v(self) -> int:
        return self.gamma.size + 3

    @property
    def p(self) -> int:
        return self.p_beta + self.p_v

    @property
    def p_b(self) -> int:
        return self.psi.p_b(self.p_gamma)

    @property
    def v(self) -> np.ndarray:
        return np.concatenate([self.gamma, [self.lam, self.sigma2, self.sigma_eps2]])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta, self.v])

    @classmethod
    def from_vector(cls, vec, p_beta: int, psi=PsiParameterization.SCALAR) -> "ThetaParams":
        vec = np.asarray(vec, dtype=float)
        return cls(
            beta=vec[:p_beta],
            gamma=vec[p_beta:-3],
            lam=vec[-3],
            sigma2=vec[-2],
            sigma_eps2=vec[-1],
            psi=psi,
        )

    def with_beta(self, beta) -> "ThetaParams":
        return ThetaParams(beta, self.gamma, self.lam, self.sigma2, self.sigma_eps2, self.psi)

    def with_v(self, v) -> "ThetaParams":
        v = np.asarray(v, dtype=float)
        return ThetaParams(self.beta, v[:-3], v[-3], v[-2], v[-1], self.psi)

    def names(self) -> list[str]:
        beta_names = [f"beta{k + 1}" for k in range(self.p_beta)]
        gamma_names = ["gamma"] if self.p_gamma == 1 else [f"gamma{k + 1}" for k in range(self.p_gamma)]
        return beta_names + gamma_names + ["lambda", "sigma2", "sigma_eps2"]

    def check_admissible(self):
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.gamma))):
            raise DomainError("theta has non-finite entries")
        for name, val in (("lambda", self.lam), ("sigma2", self.sigma2), ("sigma_eps2", self.sigma_eps2)):
            if not (np.isfinite(val) and val > 0):
                raise DomainError(f"{name} must be positive and finite, got {val}")
        if self.psi is PsiParameterization.SCALAR and self.gamma[0] < 0:
            raise DomainError(f"scalar Psi needs gamma >= 0, got {self.gamma[0]}")

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
            "lambda": self.lam,
            "sigma2": self.sigma2,
            "sigma_eps2": self.sigma_eps2,
            "psi": self.psi.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThetaParams":
        return cls(d["beta"], d["gamma"], d["lambda"], d["sigma2"], d["sigma_eps2"], d.get("psi", "scalar"))


@dataclass(frozen=True)
class IndividualData:
    """One subject's block: sampling times, design matrices and response."""

    times: np.ndarray
    x_mat: np.ndarray
    z_mat: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        x = np.atleast_2d(np.asarray(self.x_mat, dtype=float))
        z = np.asarray(self.z_mat, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        n = t.size
        if n < 1:
            raise InputError("an individual needs at least one observation")
        if x.shape[0] != n or z.shape[0] != n or y.shape[0] != n:
            raise InputError(
                f"row counts disagree: times {n}, X {x.shape[0]}, Z {z.shape[0]}, y {y.shape[0]}"
            )
        check_times(t)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "x_mat", x)
        object.__setattr__(self, "z_mat", z)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class Dataset:
    individuals: tuple
    p_beta: int
    p_b: int
    t_max: float = field(default=np.inf)

    def __post_init__(self):
        inds = tuple(self.individuals)
        if len(inds) < 1:
            raise InputError("dataset needs at least one individual")
        for i, ind in enumerate(inds):
            if ind.x_mat.shape[1] != self.p_beta or ind.z_mat.shape[1] != self.p_b:
                raise InputError(f"individual {i} has inconsistent design dimensions")
            if ind.times[-1] > self.t_max:
                raise InputError(f"individual {i} observed after t_max={self.t_max}")
        object.__setattr__(self, "individuals", inds)

    @property
    def n_individuals(self) -> int:
        return len(self.individuals)

    @property
    def max_n(self) -> int:
        return max(ind.n for ind in self.individuals)

    @property
    def n_obs(self) -> int:
        return sum(ind.n for ind in self.individuals)

    def __len__(self):
        return len(self.individuals)

    @cached_property
    def packed(self):
        from .packed import PackedData

        return PackedData.from_dataset(self)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(self.individuals + other.individuals, self.p_beta, self.p_b, max(self.t_max, other.t_max))


def check_times(times: np.ndarray):
    if not np.all(np.isfinite(times)):
        raise InputError("times must be finite")
    if times[0] < 0:
        raise InputError("times must be positive")
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise InputError("times must be strictly increasing")


def _check_ou(lam: float, sigma2: float):
    if not (lam > 0 and np.isfinite(lam)):
        raise DomainError(f"lambda must be positive, got {lam}")
    if not (sigma2 > 0 and np.isfinite(sigma2)):
        raise DomainError(f"sigma2 must be positive, got {sigma2}")


def _ou_pieces(times):
    t = np.asarray(times, dtype=float)
    tmin = np.minimum.outer(t, t)
    tabs = np.abs(np.subtract.outer(t, t))
    return t, tmin, tabs


def _g_terms(times, lam):
    """Bracketed factor of H and its first two lambda-derivatives."""
    t, tmin, tabs = _ou_pieces(times)
    ea = np.exp(-lam * t)
    ed = np.exp(-lam * tabs)
    # e^{-la}+e^{-lb}-1-e^{-ld} written with expm1 to keep small-lambda digits
    em = np.expm1(-lam * t)
    # the pair sum is formed first so that g is exactly symmetric
    g = 2.0 * lam * tmin + (em[:, None] + em[None, :]) - np.expm1(-lam * tabs)
    g1 = 2.0 * tmin - ((t * ea)[:, None] + (t * ea)[None, :]) + tabs * ed
    g2 = (t**2 * ea)[:, None] + (t**2 * ea)[None, :] - tabs**2 * ed
    return g, g1, g2


def intou_covariance(times, lam: float, sigma2: float) -> np.ndarray:
    """Covariance matrix of an integrated stationary OU path at ``times``.

    ``H_jk = sigma2 / (2 lam^3) * (2 lam min(t_j, t_k) + e^{-lam t_j}
    + e^{-lam t_k} - 1 - e^{-lam |t_j - t_k|})``.
    """
    _check_ou(lam, sigma2)
    t = np.atleast_1d(np.asarray(times, dtype=float))
    check_times(t)
    g, _, _ = _g_terms(t, lam)
    return sigma2 / (2.0 * lam**3) * g


def intou_covariance_derivs(times, lam: float, sigma2: float):
    """Return ``(H, dH/dlam, dH/dsigma2, d2H/dlam2, d2H/dlam dsigma2)``."""
    _check_ou(lam, sigma2)
    g, g1, g2 = _g_terms(np.atleast_1d(times), lam)
    c0 = 1.0 / (2.0 * lam**3)
    c1 = -3.0 / (2.0 * lam**4)
    c2 = 6.0 / lam**5
    h_s = c0 * g
    h_l_s = c1 * g + c0 * g1
    h_ll = sigma2 * (c2 * g + 2.0 * c1 * g1 + c0 * g2)
    return sigma2 * h_s, sigma2 * h_l_s, h_s, h_ll, h_l_s


def _check_gamma(gamma, param: PsiParameterization) -> int:
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    p_b = param.p_b(gamma.size)
    if param is PsiParameterization.SCALAR and gamma[0] < 0:
        raise DomainError(f"scalar Psi needs gamma >= 0, got {gamma[0]}")
    return p_b


def _chol_factor(gamma, p_b):
    L = np.zeros((p_b, p_b))
    rows, cols = np.tril_indices(p_b)
    L[rows, cols] = gamma
    di = np.arange(p_b)
    L[di, di] = np.exp(L[di, di])
    return L, rows, cols


def psi_matrix(gamma, param=PsiParameterization.SCALAR) -> np.ndarray:
    param = PsiParameterization(param)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    p_b = _check_gamma(gamma, param)
    if param is PsiParameterization.SCALAR:
        return np.array([[gamma[0]]])
    if param is PsiParameterization.DIAGONAL_LOG:
        return np.diag(np.exp(gamma))
    L, _, _ = _chol_factor(gamma, p_b)
    return L @ L.T


def psi_derivs(gamma, param=PsiParameterization.SCALAR):
    """First and second derivatives of ``Psi`` with respect to ``gamma``.

    Returns arrays of shape ``(p_gamma, p_b, p_b)`` and
    ``(p_gamma, p_gamma, p_b, p_b)``.
    """
    param = PsiParameterization(param)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    p_b = _check_gamma(gamma, param)
    m = gamma.size
    d1 = np.zeros((m, p_b, p_b))
    d2 = np.zeros((m, m, p_b, p_b))
    if param is PsiParameterization.SCALAR:
        d1[0, 0, 0] = 1.0
        return d1, d2
    if param is PsiParameterization.DIAGONAL_LOG:
        for k in range(m):
            d1[k, k, k] = d2[k, k, k, k] = np.exp(gamma[k])
        return d1, d2
    L, rows, cols = _chol_factor(gamma, p_b)
    dL = np.zeros((m, p_b, p_b))
    for a, (r, c) in enumerate(zip(rows, cols)):
        dL[a, r, c] = L[r, c] if r == c else 1.0
    for a in range(m):
        d1[a] = dL[a] @ L.T + L @ dL[a].T
        for b in range(m):
            d2[a, b] = dL[a] @ dL[b].T + dL[b] @ dL[a].T
        r, c = rows[a], cols[a]
        if r == c:
            # second derivative of exp on the diagonal entry
            d2[a, a] += dL[a] @ L.T + L @ dL[a].T
    return d1, d2


def mean_vector(x_mat, beta) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x_mat, dtype=float))
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if x.shape[1] != beta.size:
        raise InputError(f"X has {x.shape[1]} columns but beta has length {beta.size}")
    return x @ beta


def marginal_covariance(z_mat, times, v, param=PsiParameterization.SCALAR) -> np.ndarray:
    """``Z Psi(gamma) Z^T + H(lambda, sigma2) + sigma_eps2 I`` for ``v = (gamma, lambda, sigma2, sigma_eps2)``."""
    v = np.asarray(v, dtype=float)
    gamma, lam, sigma2, sigma_eps2 = v[:-3], v[-3], v[-2], v[-1]
    if not (sigma_eps2 > 0):
        raise DomainError(f"sigma_eps2 must be positive, got {sigma_eps2}")
    z = np.asarray(z_mat, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    times = np.atleast_1d(np.asarray(times, dtype=float))
    psi = psi_matrix(gamma, param)
    if z.shape != (times.size, psi.shape[0]):
        raise InputError(f"Z has shape {z.shape}, expected {(times.size, psi.shape[0])}")
    return z @ psi @ z.T + intou_covariance(times, lam, sigma2) + sigma_eps2 * np.eye(times.size)


# ---------------------------------------------------------------------------
# Dataset file format: one CSV plus a JSON sidecar
# ---------------------------------------------------------------------------


def write_dataset(dataset: Dataset, csv_path, meta_path, psi=PsiParameterization.SCALAR, extra_meta=None):
    csv_path, meta_path = Path(csv_path), Path(meta_path)
    header = ["individual_id", "time", "y"]
    header += [f"x_{k + 1}" for k in range(dataset.p_beta)]
    header += [f"z_{k + 1}" for k in range(dataset.p_b)]
    blocks = []
    for i, ind in enumerate(dataset.individuals):
        ids = np.full((ind.n, 1), float(i))
        blocks.append(np.hstack([ids, ind.times[:, None], ind.y[:, None], ind.x_mat, ind.z_mat]))
    table = np.vstack(blocks)
    with open(csv_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(str(int(row[0])) + "," + ",".join(repr(float(v)) for v in row[1:]) + "\n")
    meta = {"p_beta": dataset.p_beta, "p_b": dataset.p_b, "psi": PsiParameterization(psi).value}
    if extra_meta:
        meta.update(extra_meta)
    meta_path.write_text(json.dumps(meta, indent=2))


def read_dataset(csv_path, meta_path) -> tuple[Dataset, PsiParameterization]:
    """Load a dataset CSV and its sidecar; returns the dataset and the declared Psi form."""
    try:
        meta = json.loads(Path(meta_path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"sidecar {meta_path} is not valid JSON: {exc}") from exc
    try:
        p_beta, p_b = int(meta["p_beta"]), int(meta["p_b"])
        psi = PsiParameterization(meta.get("psi", "scalar"))
    except (KeyError, ValueError) as exc:
        raise InputError(f"bad sidecar {meta_path}: {exc}") from exc
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
    expected = ["individual_id", "time", "y"] + [f"x_{k + 1}" for k in range(p_beta)]
    expected += [f"z_{k + 1}" for k in range(p_b)]
    if header != expected:
        raise InputError(f"CSV header {header} does not match sidecar, expected {expected}")
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    ids = table[:, 0]
    change = np.flatnonzero(np.diff(ids) != 0) + 1
    starts = np.concatenate([[0], change])
    stops = np.concatenate([change, [len(ids)]])
    if len(np.unique(ids)) != len(starts):
        raise InputError("rows of each individual must be contiguous")
    individuals = []
    for a, b in zip(starts, stops):
        block = table[a:b]
        individuals.append(
            IndividualData(block[:, 1], block[:, 3 : 3 + p_beta], block[:, 3 + p_beta :], block[:, 2])
        )
    return Dataset(tuple(individuals), p_beta, p_b, float(meta.get("t_max", np.inf))), psi


def make_dataset(blocks: Sequence[tuple], t_max: float = np.inf) -> Dataset:
    """Build a dataset from ``(times, X, Z, y)`` tuples."""
    individuals = tuple(IndividualData(*b) for b in blocks)
    return Dataset(individuals, individuals[0].x_mat.shape[1], individuals[0].z_mat.shape[1], t_max)
