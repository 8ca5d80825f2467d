"""Nelder-Mead simplex minimizer and the parameter-space reparameterization."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .model_core import DEFAULT_BOX, PsiParameterization, ThetaParams


@dataclass
class OptimConfig:
    x_tol: float = 1e-8
    f_tol: float = 1e-10
    max_iter: int = 20000
    max_eval: int = 40000
    init_step: float | np.ndarray = 0.1
    restarts: int = 1
    box: tuple = DEFAULT_BOX

    def __post_init__(self):
        if not (self.x_tol > 0 and self.f_tol > 0):
            raise ConfigError("tolerances must be positive")
        if self.max_iter < 1 or self.max_eval < 1:
            raise ConfigError("max_iter and max_eval must be >= 1")
        if self.restarts < 0:
            raise ConfigError("restarts must be >= 0")
        lo, hi = self.box
        if not (0 < lo < hi):
            raise ConfigError(f"box must satisfy 0 < lo < hi, got {self.box}")

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        d = dict(d)
        if "box" in d:
            d["box"] = tuple(d["box"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


class CoordKind(str, enum.Enum):
    IDENTITY = "identity"
    LOG = "log"
    PASS_THROUGH = "pass_through"


@dataclass
class BoundTransform:
    """Per-coordinate map from the natural parameter vector to R^p."""

    kinds: tuple
    p_beta: int
    psi: PsiParameterization = PsiParameterization.SCALAR
    box: tuple = DEFAULT_BOX

    @classmethod
    def for_theta(cls, theta: ThetaParams, box=DEFAULT_BOX) -> "BoundTransform":
        gamma_kind = CoordKind.LOG if theta.psi is PsiParameterization.SCALAR else CoordKind.PASS_THROUGH
        kinds = (CoordKind.IDENTITY,) * theta.p_beta + (gamma_kind,) * theta.p_gamma + (CoordKind.LOG,) * 3
        return cls(kinds, theta.p_beta, theta.psi, tuple(box))

    @property
    def v_part(self) -> "BoundTransform":
        return BoundTransform(self.kinds[self.p_beta :], 0, self.psi, self.box)

    @property
    def _log_mask(self):
        return np.array([k == CoordKind.LOG for k in self.kinds])

    def forward(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        if not np.all(np.isfinite(vec)):
            raise InputError("parameter vector has non-finite entries")
        out = vec.copy()
        mask = self._log_mask
        if np.any(vec[mask] <= 0):
            raise InputError("log-transformed coordinates must be positive")
        out[mask] = np.log(vec[mask])
        return out

    def inverse(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise InputError("unconstrained vector has non-finite entries")
        out = x.copy()
        mask = self._log_mask
        out[mask] = np.exp(x[mask])
        return out

    def in_box(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        mask = self._log_mask
        lo, hi = np.log(self.box[0]), np.log(self.box[1])
        return bool(np.all(np.isfinite(x)) and np.all((x[mask] >= lo) & (x[mask] <= hi)))


def to_unconstrained(theta: ThetaParams, transform: BoundTransform) -> np.ndarray:
    return transform.forward(theta.to_vector())


def from_unconstrained(x, transform: BoundTransform) -> ThetaParams:
    return ThetaParams.from_vector(transform.inverse(x), transform.p_beta, transform.psi)


@dataclass
class NMResult:
    x: np.ndarray
    fun: float
    trace: list = field(repr=False)
    n_eval: int = 0
    n_iter: int = 0
    converged: bool = False
    reason: str = ""

    def __iter__(self):
        return iter((self.x, self.fun, self.trace))

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "f_best", "simplex_diameter"])
            w.writerows(self.trace)


def _diameter(sim):
    return float(np.max(np.abs(sim[1:] - sim[0]))) if len(sim) > 1 else 0.0


def _nm_run(fun, x0, step, config, budget, it0, trace):
    n = x0.size
    sim = np.empty((n + 1, n))
    sim[0] = x0
    for k in range(n):
        sim[k + 1] = x0
        sim[k + 1, k] += step[k]
    fsim = np.array([fun(s) for s in sim])
    n_eval = n + 1
    it = 0
    reason = "budget"
    converged = False
    while True:
        order = np.argsort(fsim, kind="stable")
        sim, fsim = sim[order], fsim[order]
        diam = _diameter(sim)
        trace.append((it0 + it, float(fsim[0]), diam))
        if diam < config.x_tol:
            converged, reason = True, "x_tol"
            break
        if np.isfinite(fsim[-1]) and fsim[-1] - fsim[0] < config.f_tol:
            converged, reason = True, "f_tol"
            break
        if it >= config.max_iter or n_eval >= budget:
            break
        it += 1
        centroid = sim[:-1].mean(axis=0)
        xr = centroid + (centroid - sim[-1])
        fr = fun(xr)
        n_eval += 1
        if fr < fsim[0]:
            xe = centroid + 2.0 * (centroid - sim[-1])
            fe = fun(xe)
            n_eval += 1
            if fe < fr:
                sim[-1], fsim[-1] = xe, fe
            else:
                sim[-1], fsim[-1] = xr, fr
            continue
        if fr < fsim[-2]:
            sim[-1], fsim[-1] = xr, fr
            continue
        if fr < fsim[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = fun(xc)
            n_eval += 1
            if fc <= fr:
                sim[-1], fsim[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (sim[-1] - centroid)
            fc = fun(xc)
            n_eval += 1
            if fc < fsim[-1]:
                sim[-1], fsim[-1] = xc, fc
                continue
        for k in range(1, n + 1):
            sim[k] = sim[0] + 0.5 * (sim[k] - sim[0])
            fsim[k] = fun(sim[k])
        n_eval += n
    return sim[0].copy(), float(fsim[0]), n_eval, it, converged, reason


def nelder_mead(objective, x0, config: OptimConfig | None = None) -> NMResult:
    """Minimize ``objective`` with the Nelder-Mead simplex method.

    Reflection 1, expansion 2, contraction 0.5, shrink 0.5. Stops when the
    simplex diameter (max-norm distance to the best vertex) falls below
    ``x_tol``, the spread of simplex values falls below ``f_tol``, or the
    budget is spent. Each restart rebuilds a fresh simplex at the incumbent
    and stops early once a restart improves by less than ``f_tol``.
    Non-finite objective values are treated as +inf.
    """
    config = config or OptimConfig()
    x0 = np.asarray(x0, dtype=float).copy()

    def fun(x):
        val = objective(x)
        return float(val) if np.isfinite(val) else np.inf

    f0 = objective(x0)
    if not np.isfinite(f0):
        raise InputError("objective is not finite at the starting point")
    step = np.broadcast_to(np.asarray(config.init_step, dtype=float), x0.shape).copy()
    trace: list = []
    x, f = x0, float(f0)
    total_eval, total_iter = 1, 0
    converged, reason = False, "budget"
    for attempt in range(config.restarts + 1):
        budget = config.max_eval - total_eval
        if budget <= x0.size + 1:
            converged = False
            reason = "budget"
            break
        x_new, f_new, n_eval, n_iter, converged, reason = _nm_run(fun, x, step, config, budget, total_iter, trace)
        total_eval += n_eval
        total_iter += n_iter
        improvement = f - f_new
        if f_new <= f:
            x, f = x_new, f_new
        if attempt > 0 and improvement < config.f_tol:
            break
    return NMResult(x, f, trace, total_eval, total_iter, converged, reason)
