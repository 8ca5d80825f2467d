"""Data generation for the unbalanced intOU mixed-effects design.

Every individual draws from its own counter-based substreams (Philox keyed by
``(seed, individual, component)``), so a dataset is a pure function of the
scenario and does not depend on scheduling or on the order individuals are
produced in.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ConfigError, DomainError, NumericalError
from .model_core import (
    Dataset,
    IndividualData,
    ThetaParams,
    check_times,
    intou_covariance,
    psi_matrix,
)


class Component(enum.IntEnum):
    DESIGN = 0
    RANDOM_EFFECT = 1
    SYSTEM_NOISE = 2
    MEASUREMENT = 3


class RngStream:
    """Seedable family of independent counter-based generators.

    ``substream(*key)`` always returns a generator in the same state for the
    same ``(seed, key)``.
    """

    def __init__(self, seed: int, key: tuple = ()):
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)

    def substream(self, *key) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key + tuple(int(k) for k in key))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *key) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))


# ---------------------------------------------------------------------------
# Scenario description
# ---------------------------------------------------------------------------


REFERENCE_THETA = ThetaParams([2.0, -1.0, 0.5], [3.01], 1.3, 0.4**2, 0.5**2)
REFERENCE_VG = (3.0, -3.0, 0.1, 3.0)


@dataclass
class DesignSpec:
    n_i_range: tuple = (15, 20)
    time_pool: tuple = tuple(range(1, 21))
    group_prob: float = 0.5

    def validate(self):
        lo, hi = self.n_i_range
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad n_i_range {self.n_i_range}")
        # floor(Uniform(lo, hi)) never reaches hi unless lo == hi
        top = hi if lo == hi else int(np.ceil(hi)) - 1
        if top > len(self.time_pool):
            raise ConfigError(f"n_i up to {top} exceeds the time pool of size {len(self.time_pool)}")
        if len(set(self.time_pool)) != len(self.time_pool) or min(self.time_pool) <= 0:
            raise ConfigError("time pool must hold distinct positive times")
        if not 0 <= self.group_prob <= 1:
            raise ConfigError("group_prob must lie in [0, 1]")


@dataclass
class RandomEffectLaw:
    """``kind`` is ``"gaussian"`` (covariance Psi(gamma) from theta) or ``"variance_gamma"``."""

    kind: str = "variance_gamma"
    vg: tuple = REFERENCE_VG

    def validate(self, theta: ThetaParams):
        if self.kind == "gaussian":
            return
        if self.kind != "variance_gamma":
            raise ConfigError(f"unknown random-effect law {self.kind!r}")
        if theta.p_b != 1:
            raise ConfigError("variance-gamma random effects need p_b == 1")
        a1, _, a3, _ = self.vg
        if not (a1 > 0 and a3 > 0):
            raise ConfigError("variance-gamma needs a1 > 0 and a3 > 0")


@dataclass
class Driver:
    """``gaussian_exact`` | ``compound_poisson_normal`` | ``gaussian_euler``."""

    kind: str = "gaussian_exact"
    rate: float = 200.0
    dt: float = 1e-3

    def validate(self):
        if self.kind not in ("gaussian_exact", "compound_poisson_normal", "gaussian_euler"):
            raise ConfigError(f"unknown driver {self.kind!r}")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.rate > 0:
            raise ConfigError("rate must be positive")


@dataclass
class Scenario:
    n_individuals: int = 1000
    theta_true: ThetaParams = field(default_factory=lambda: REFERENCE_THETA)
    design: DesignSpec = field(default_factory=DesignSpec)
    random_effect_law: RandomEffectLaw = field(default_factory=RandomEffectLaw)
    driver: Driver = field(default_factory=Driver)
    seed: int = 0

    def validate(self):
        if self.n_individuals < 1:
            raise ConfigError("n_individuals must be >= 1")
        if self.theta_true.p_beta != 3:
            raise ConfigError("the design has columns (1, t, g); theta_true needs three betas")
        if self.theta_true.p_b != 1:
            raise ConfigError("the design has a single random intercept (p_b == 1)")
        try:
            self.theta_true.check_admissible()
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
        self.design.validate()
        self.random_effect_law.validate(self.theta_true)
        self.driver.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "n_individuals": self.n_individuals,
            "theta_true": self.theta_true.to_dict(),
            "design": {
                "n_i_range": list(self.design.n_i_range),
                "time_pool": list(self.design.time_pool),
                "group_prob": self.design.group_prob,
            },
            "random_effect_law": {"kind": self.random_effect_law.kind, "vg": list(self.random_effect_law.vg)},
            "driver": {"kind": self.driver.kind, "rate": self.driver.rate, "dt": self.driver.dt},
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {"n_individuals", "theta_true", "design", "random_effect_law", "driver", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            design = d.get("design", {})
            rel = d.get("random_effect_law", {})
            drv = d.get("driver", {})
            sc = cls(
                n_individuals=int(d.get("n_individuals", 1000)),
                theta_true=ThetaParams.from_dict(d["theta_true"]) if "theta_true" in d else REFERENCE_THETA,
                design=DesignSpec(
                    n_i_range=tuple(design.get("n_i_range", (15, 20))),
                    time_pool=tuple(design.get("time_pool", range(1, 21))),
                    group_prob=float(design.get("group_prob", 0.5)),
                ),
                random_effect_law=RandomEffectLaw(rel.get("kind", "variance_gamma"), tuple(rel.get("vg", REFERENCE_VG))),
                driver=Driver(drv.get("kind", "gaussian_exact"), float(drv.get("rate", 200.0)), float(drv.get("dt", 1e-3))),
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario: {exc}") from exc
        return sc.validate()


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def generate_individual_design(gen: np.random.Generator, design: DesignSpec):
    lo, hi = design.n_i_range
    n = int(np.floor(gen.uniform(lo, hi))) if lo < hi else int(lo)
    pool = np.asarray(design.time_pool, dtype=float)
    if n > pool.size:
        raise ConfigError(f"n_i={n} exceeds the time pool")
    times = np.sort(gen.choice(pool, size=n, replace=False))
    g = float(gen.random() < design.group_prob)
    if np.any(np.diff(times) <= 0):
        raise AssertionError("generated times are not strictly increasing")
    x = np.column_stack([np.ones(n), times, np.full(n, g)])
    z = np.ones((n, 1))
    return times, x, z


def generate_design(rng: RngStream, scenario: Scenario):
    """Per individual ``(times, X, Z)``: ``n_i = floor(U(15, 20))`` distinct times from the pool, ``X = (1, t, g)``, ``Z = 1``."""
    scenario.design.validate()
    return [
        generate_individual_design(rng.substream(i, Component.DESIGN), scenario.design)
        for i in range(scenario.n_individuals)
    ]


def sample_intou_gaussian(gen: np.random.Generator, times, lam: float, sigma2: float, size=None) -> np.ndarray:
    """Exact draw(s) from ``N(0, H(times, lam, sigma2))``."""
    H = intou_covariance(times, lam, sigma2)
    n = H.shape[0]
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        ridge = 1e-12 * max(float(np.max(np.diag(H))), 1.0)
        try:
            L = np.linalg.cholesky(H + ridge * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("intOU covariance could not be factorized") from exc
    shape = (n,) if size is None else (int(size), n)
    z = gen.standard_normal(shape)
    return z @ L.T


@dataclass
class LevyPath:
    grid: np.ndarray  # (m,)
    zeta: np.ndarray | None  # (n_paths, m), or None when the path is not kept
    w: np.ndarray  # (n_paths, n_times)
    zeta_end: np.ndarray  # (n_paths,) value at the last grid point


def _merged_grid(times, dt):
    t_end = float(times[-1])
    m = int(np.ceil(t_end / dt))
    grid = np.union1d(np.linspace(0.0, m * dt, m + 1), np.asarray(times, dtype=float))
    return grid[grid <= max(t_end, 0.0) + 1e-15]


def sample_ou_levy_path(
    gen: np.random.Generator, times, lam: float, sigma: float, driver: Driver, n_paths: int = 1, keep_path: bool = True
) -> LevyPath:
    """Simulate ``d zeta = -lam zeta dt + sigma dL`` and integrate to ``W`` at ``times``.

    ``L`` is normalized so ``Var L(t) = t``. The start ``zeta(0)`` is Gaussian
    with the stationary variance ``sigma^2 / (2 lam)``. ``gaussian_euler``
    (and ``gaussian_exact`` in path mode) uses Euler steps of size ``dt``;
    ``compound_poisson_normal`` uses the exact OU recursion through jump
    epochs of a Poisson(rate) process with ``N(0, 1/rate)`` marks. ``W`` is
    the trapezoidal integral of ``zeta`` on a grid that contains every
    observation time. Set ``keep_path=False`` to avoid storing the grid
    values when simulating many paths.
    """
    driver.validate()
    if not (lam > 0 and sigma > 0):
        raise DomainError("lam and sigma must be positive")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    check_times(times)
    grid = _merged_grid(times, driver.dt)
    steps = np.diff(grid)
    obs = set(np.searchsorted(grid, times).tolist())
    pos_of = {g: k for k, g in enumerate(np.searchsorted(grid, times).tolist())}
    w = np.zeros((n_paths, times.size))
    zeta_path = np.empty((n_paths, grid.size)) if keep_path else None
    cur = gen.standard_normal(n_paths) * sigma / np.sqrt(2.0 * lam)
    if keep_path:
        zeta_path[:, 0] = cur
    integral = np.zeros(n_paths)
    if 0 in obs:
        w[:, pos_of[0]] = 0.0
    for k, h in enumerate(steps):
        if driver.kind == "compound_poisson_normal":
            counts = gen.poisson(driver.rate * h, size=n_paths)
            total = int(counts.sum())
            inc = np.zeros(n_paths)
            if total:
                owner = np.repeat(np.arange(n_paths), counts)
                # time from each jump to the end of the step
                tau = gen.uniform(0.0, h, size=total)
                marks = gen.standard_normal(total) / np.sqrt(driver.rate)
                np.add.at(inc, owner, np.exp(-lam * tau) * marks)
            nxt = np.exp(-lam * h) * cur + sigma * inc
        else:
            nxt = cur - lam * cur * h + sigma * np.sqrt(h) * gen.standard_normal(n_paths)
        integral += 0.5 * (cur + nxt) * h
        cur = nxt
        if keep_path:
            zeta_path[:, k + 1] = cur
        if k + 1 in obs:
            w[:, pos_of[k + 1]] = integral
    return LevyPath(grid, zeta_path, w, cur.copy())


def sample_vg(gen: np.random.Generator, a1: float, a2: float, a3: float, a4: float, size=None):
    """Variance-gamma draw ``a2 + a4 V + a3 sqrt(V) Z`` with ``V ~ Gamma(a1, rate=a1)``.

    ``a3`` is the normal scale, so the law has mean ``a2 + a4`` and variance
    ``a3**2 + a4**2 / a1``; at ``(3, -3, 0.1, 3)`` these are 0 and 3.01.
    """
    if not (a1 > 0 and a3 > 0):
        raise DomainError("variance-gamma needs a1 > 0 and a3 > 0")
    v = gen.gamma(a1, 1.0 / a1, size=size)
    z = gen.standard_normal(size=size)
    return a2 + a4 * v + a3 * np.sqrt(v) * z


def vg_density(x, a1: float, a2: float, a3: float, a4: float) -> np.ndarray:
    """Closed-form density of :func:`sample_vg` (modified Bessel K form).

    Evaluated on the log scale with the exponentially scaled Bessel function.
    """
    x = np.asarray(x, dtype=float)
    s2 = a3**2
    kappa = 2.0 * a1 + a4**2 / s2
    nu = a1 - 0.5
    dx = x - a2
    arg = np.sqrt(dx**2 / s2 * kappa)
    log_pre = (
        np.log(2.0) + a1 * np.log(a1) + (0.5 - a1) * np.log(kappa) - 0.5 * np.log(2.0 * np.pi * s2) - special.gammaln(a1)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        log_bessel = np.log(special.kve(nu, arg)) - arg + nu * np.log(arg)
    if nu > 0:
        # K_nu(s) s^nu -> Gamma(nu) 2^(nu-1) as s -> 0
        limit = special.gammaln(nu) + (nu - 1.0) * np.log(2.0)
        log_bessel = np.where(arg < 1e-8, limit, log_bessel)
    return np.exp(log_pre + log_bessel + dx * a4 / s2)


# ---------------------------------------------------------------------------
# Whole datasets
# ---------------------------------------------------------------------------


def simulate_individual(rng: RngStream, i: int, scenario: Scenario) -> IndividualData:
    theta = scenario.theta_true
    times, x, z = generate_individual_design(rng.substream(i, Component.DESIGN), scenario.design)
    n = times.size
    law = scenario.random_effect_law
    g_re = rng.substream(i, Component.RANDOM_EFFECT)
    if law.kind == "variance_gamma":
        b = np.atleast_1d(sample_vg(g_re, *law.vg))
    else:
        psi = psi_matrix(theta.gamma, theta.psi)
        b = g_re.multivariate_normal(np.zeros(psi.shape[0]), psi, method="eigh")
    g_w = rng.substream(i, Component.SYSTEM_NOISE)
    drv = scenario.driver
    if drv.kind == "gaussian_exact":
        w = sample_intou_gaussian(g_w, times, theta.lam, theta.sigma2)
    else:
        w = sample_ou_levy_path(g_w, times, theta.lam, np.sqrt(theta.sigma2), drv).w[0]
    eps = rng.substream(i, Component.MEASUREMENT).standard_normal(n) * np.sqrt(theta.sigma_eps2)
    y = x @ theta.beta + z @ b + w + eps
    return IndividualData(times, x, z, y)


def simulate_dataset(rng: RngStream, scenario: Scenario) -> Dataset:
    """``Y = X beta + Z b + W + eps`` with independent components per individual."""
    scenario.validate()
    inds = tuple(simulate_individual(rng, i, scenario) for i in range(scenario.n_individuals))
    return Dataset(inds, 3, 1, float(max(scenario.design.time_pool)))
