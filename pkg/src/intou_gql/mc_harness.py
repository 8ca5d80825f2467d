"""Monte Carlo replication runner, aggregation and table rendering.

Replication ``r`` simulates its dataset from ``RngStream(base_seed + r)``
with one substream per (individual, component). Datasets for different N
therefore share their first individuals. Records are sorted by
``(N, rep, estimator)`` before anything is written, so output files do not
depend on the number of workers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError, IntouError
from .estimators import (
    ExpansionKind,
    FitConfig,
    expansion_terms,
    fit_joint,
    fit_stepwise,
    third_derivative_tensor,
)
from .gqlf import inverse_sqrt, observed_information, quasi_score
from .simulate import RngStream, Scenario, simulate_dataset

WORKERS_ENV = "INTOU_GQL_WORKERS"
ESTIMATORS = ("joint", "stepwise")
TIMING_COLUMNS = ("wall_time_s", "stage1_s", "stage2_s", "stage3_s")
Z975 = float(stats.norm.ppf(0.975))


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        val = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if val < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return val


@dataclass
class McConfig:
    scenario: Scenario = field(default_factory=Scenario)
    n_reps: int = 200
    n_values: tuple = (500, 1000)
    estimators: tuple = ESTIMATORS
    base_seed: int = 0
    workers: int = 1
    output_dir: str = "results"
    fit: FitConfig = field(default_factory=FitConfig)
    n_reps_by_n: dict = field(default_factory=dict)
    expansions: bool = False
    expansion_reps: int | None = None

    def __post_init__(self):
        if self.n_reps < 1:
            raise ConfigError("n_reps must be >= 1")
        if not self.n_values or any(int(n) < 1 for n in self.n_values):
            raise ConfigError("n_values must be a non-empty list of positive sizes")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            raise ConfigError(f"estimators must be a non-empty subset of {ESTIMATORS}, got {list(self.estimators)}")
        if self.base_seed < 0:
            raise ConfigError("base_seed must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for n, r in self.n_reps_by_n.items():
            if int(r) < 1:
                raise ConfigError(f"n_reps_by_n[{n}] must be >= 1")
        self.n_values = tuple(int(n) for n in self.n_values)
        self.estimators = tuple(e for e in ESTIMATORS if e in self.estimators)
        self.n_reps_by_n = {int(k): int(v) for k, v in self.n_reps_by_n.items()}

    def reps_for(self, n: int) -> int:
        return self.n_reps_by_n.get(n, self.n_reps)

    def tasks(self):
        return [(n, r) for n in self.n_values for r in range(self.reps_for(n))]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "n_reps": self.n_reps,
            "n_reps_by_n": {str(k): v for k, v in sorted(self.n_reps_by_n.items())},
            "n_values": list(self.n_values),
            "estimators": list(self.estimators),
            "base_seed": self.base_seed,
            "fit": {
                "optim": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self.fit.optim).items()},
                "psi": self.fit.psi.value,
                "centered_sandwich": self.fit.centered_sandwich,
            },
            "expansions": self.expansions,
            "expansion_reps": self.expansion_reps,
        }

    def fingerprint(self) -> str:
        """Hash of everything that determines the study's numbers (not workers or paths)."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=float).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "McConfig":
        known = {
            "scenario", "n_reps", "n_values", "estimators", "base_seed", "workers",
            "output_dir", "fit", "n_reps_by_n", "expansions", "expansion_reps",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown mc config keys: {sorted(unknown)}")
        try:
            return cls(
                scenario=Scenario.from_dict(d.get("scenario", {})),
                n_reps=int(d.get("n_reps", 200)),
                n_values=tuple(d.get("n_values", (500, 1000))),
                estimators=tuple(d.get("estimators", ESTIMATORS)),
                base_seed=int(d.get("base_seed", 0)),
                workers=int(d["workers"]) if "workers" in d else default_workers(),
                output_dir=str(d.get("output_dir", "results")),
                fit=FitConfig.from_dict(d.get("fit", {})),
                n_reps_by_n=dict(d.get("n_reps_by_n", {})),
                expansions=bool(d.get("expansions", False)),
                expansion_reps=None if d.get("expansion_reps") is None else int(d["expansion_reps"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad mc config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "McConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("mc config must be a JSON object")
        return cls.from_dict(raw)


@dataclass
class McRecord:
    rep: int
    n: int
    estimator: str
    converged: bool
    theta_hat: np.ndarray
    bias: np.ndarray
    std_errors: np.ndarray
    studentized: np.ndarray
    wall_time: float
    stage_times: tuple = (math.nan, math.nan, math.nan)
    n_eval: int = 0
    objective: float = math.nan
    exp_res1: float = math.nan
    exp_res2: float = math.nan
    error: str = ""

    @property
    def wald(self) -> np.ndarray:
        return self.bias / self.std_errors

    def row(self, names) -> dict:
        out = {
            "rep": self.rep,
            "n": self.n,
            "estimator": self.estimator,
            "converged": int(self.converged),
            "n_eval": self.n_eval,
            "objective": self.objective,
            "wall_time_s": self.wall_time,
            "stage1_s": self.stage_times[0],
            "stage2_s": self.stage_times[1],
            "stage3_s": self.stage_times[2],
        }
        for prefix, arr in (
            ("hat", self.theta_hat),
            ("bias", self.bias),
            ("se", self.std_errors),
            ("stud", self.studentized),
        ):
            for k, name in enumerate(names):
                out[f"{prefix}_{name}"] = float(arr[k])
        out["exp_res1_norm"] = self.exp_res1
        out["exp_res2_norm"] = self.exp_res2
        out["error"] = self.error
        return out

    @classmethod
    def from_row(cls, row: dict, names) -> "McRecord":
        get = lambda prefix: np.array([float(row[f"{prefix}_{n}"]) for n in names])
        return cls(
            rep=int(row["rep"]),
            n=int(row["n"]),
            estimator=row["estimator"],
            converged=bool(int(row["converged"])),
            theta_hat=get("hat"),
            bias=get("bias"),
            std_errors=get("se"),
            studentized=get("stud"),
            wall_time=float(row["wall_time_s"]),
            stage_times=tuple(float(row[c]) for c in TIMING_COLUMNS[1:]),
            n_eval=int(row["n_eval"]),
            objective=float(row["objective"]),
            exp_res1=float(row["exp_res1_norm"]),
            exp_res2=float(row["exp_res2_norm"]),
            error=row.get("error", "") or "",
        )


# ---------------------------------------------------------------------------
# One replication
# ---------------------------------------------------------------------------


def _failed(rep, n, est, p, exc) -> McRecord:
    nan = np.full(p, np.nan)
    return McRecord(rep, n, est, False, nan, nan, nan, nan, math.nan, error=f"{type(exc).__name__}: {exc}")


def run_replication(rep_id: int, config: McConfig, n: int | None = None) -> list[McRecord]:
    """Simulate one dataset and fit every requested estimator on it."""
    n = int(n if n is not None else config.n_values[0])
    sc = config.scenario
    scenario = Scenario(n, sc.theta_true, sc.design, sc.random_effect_law, sc.driver, config.base_seed + rep_id)
    dataset = simulate_dataset(RngStream(config.base_seed + rep_id), scenario)
    theta0 = sc.theta_true
    vec0 = theta0.to_vector()
    p = theta0.p
    rn = math.sqrt(n)
    do_exp = config.expansions and (config.expansion_reps is None or rep_id < config.expansion_reps)
    parts = None
    if do_exp:
        parts = (quasi_score(dataset, theta0).vector, observed_information(dataset, theta0),
                 third_derivative_tensor(dataset, theta0))
    records = []
    for est in config.estimators:
        try:
            if est == "joint":
                fit = fit_joint(dataset, config.fit)
                stage_times = (math.nan, math.nan, math.nan)
            else:
                sw = fit_stepwise(dataset, config.fit)
                fit, stage_times = sw.fit, sw.stage_times
            bias = fit.theta_hat.to_vector() - vec0
            stud = np.full(p, np.nan)
            if not fit.inference_error:
                try:
                    stud = inverse_sqrt(fit.avar) @ (rn * bias)
                except IntouError:
                    pass
            rec = McRecord(rep_id, n, est, bool(fit.converged), fit.theta_hat.to_vector(), bias, fit.std_errors,
                           stud, fit.wall_time, stage_times, fit.n_eval, fit.objective)
            if do_exp:
                diag = expansion_terms(dataset, theta0, ExpansionKind(est), fit.theta_hat, parts=parts)
                rec.exp_res1 = float(np.linalg.norm(diag.residual1))
                rec.exp_res2 = float(np.linalg.norm(diag.residual))
        except IntouError as exc:
            rec = _failed(rep_id, n, est, p, exc)
        records.append(rec)
    return records


def _worker_init():
    from threadpoolctl import threadpool_limits

    # keep linear algebra single-threaded so results do not depend on the pool size
    global _LIMITS
    _LIMITS = threadpool_limits(limits=1)


def _run_task(args):
    n, rep, config = args
    try:
        return run_replication(rep, config, n)
    except Exception as exc:  # never lose a replication silently
        p = config.scenario.theta_true.p
        return [_failed(rep, n, e, p, RuntimeError(f"{exc}\n{traceback.format_exc()}")) for e in config.estimators]


# ---------------------------------------------------------------------------
# Study
# ---------------------------------------------------------------------------


def _names(config: McConfig):
    return config.scenario.theta_true.names()


def _checkpoint_path(out: Path) -> Path:
    return out / "checkpoint.jsonl"


def _load_checkpoint(out: Path, config: McConfig) -> dict:
    path = _checkpoint_path(out)
    done = {}
    if not path.exists():
        return done
    names = _names(config)
    fp = config.fingerprint()
    with open(path) as fh:
        for line in fh:
            try:
                item = json.loads(line)
            except json.JSONDecodeError:
                continue  # truncated final line after an interruption
            if item.get("fingerprint") != fp:
                continue
            recs = [McRecord.from_row(r, names) for r in item["rows"]]
            done[(item["n"], item["rep"])] = recs
    return done


@dataclass
class McReport:
    config: McConfig
    records: list
    aggregate: list
    timing: list
    paths: dict


def run_study(config: McConfig, resume: bool = True, progress=None) -> McReport:
    """Run every (N, rep) task and write the per-rep, aggregate, timing and Q-Q files.

    With ``resume`` the study picks up finished replications from the
    checkpoint in ``output_dir`` (only those produced by an identical
    configuration).
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = _names(config)
    done = _load_checkpoint(out, config) if resume else {}
    if not resume and _checkpoint_path(out).exists():
        _checkpoint_path(out).unlink()
    todo = [(n, r, config) for (n, r) in config.tasks() if (n, r) not in done]
    fp = config.fingerprint()
    if todo:
        with open(_checkpoint_path(out), "a") as ck, ProcessPoolExecutor(
            max_workers=config.workers, initializer=_worker_init
        ) as pool:
            for k, recs in enumerate(pool.map(_run_task, todo, chunksize=1)):
                n, r = todo[k][0], todo[k][1]
                done[(n, r)] = recs
                ck.write(json.dumps({"fingerprint": fp, "n": n, "rep": r, "rows": [x.row(names) for x in recs]}) + "\n")
                ck.flush()
                if progress is not None:
                    progress(len(done), len(config.tasks()))
    records = [rec for key in sorted(done) if key in set(config.tasks()) for rec in done[key]]
    records.sort(key=lambda x: (x.n, x.rep, ESTIMATORS.index(x.estimator)))
    return write_outputs(config, records)


def write_outputs(config: McConfig, records) -> McReport:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = _names(config)
    theta0 = config.scenario.theta_true
    paths = {k: out / f"{k}.csv" for k in ("reps", "aggregate", "timing", "qq", "hist")}
    rows = [r.row(names) for r in records]
    header = list(McRecord(0, 0, "joint", False, *([np.zeros(len(names))] * 4), 0.0).row(names))
    _write_csv(paths["reps"], header, rows)
    agg = aggregate(records, names, theta0)
    _write_csv(paths["aggregate"], AGG_COLUMNS, agg)
    tim = timing_table(records)
    _write_csv(paths["timing"], TIMING_TABLE_COLUMNS, tim)
    qq, hist = qq_and_hist(records, names)
    _write_csv(paths["qq"], ["n", "estimator", "parameter", "rank", "studentized", "normal_quantile"], qq)
    _write_csv(paths["hist"], ["n", "estimator", "parameter", "bin_lo", "bin_hi", "count", "normal_expected"], hist)
    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    return McReport(config, records, agg, tim, paths)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


AGG_COLUMNS = [
    "n", "estimator", "parameter", "true_value", "n_reps", "n_used", "n_nonconverged", "n_failed",
    "mean_bias", "sd", "n_with_se", "coverage", "ks_stat", "ks_pvalue",
]
TIMING_TABLE_COLUMNS = ["n", "estimator", "n_fits", "min", "q1", "mean", "sd", "median", "q3", "max"]


def _groups(records):
    keys = sorted({(r.n, r.estimator) for r in records}, key=lambda k: (k[0], ESTIMATORS.index(k[1])))
    return [(k, [r for r in records if (r.n, r.estimator) == k]) for k in keys]


def aggregate(records, names, theta0) -> list[dict]:
    """Per (N, estimator, parameter): bias mean/SD over converged reps, Wald coverage, KS of studentized values.

    Coverage and KS use the converged replications whose sandwich was
    available (``n_with_se``); a singular plug-in information leaves a
    replication's estimate in the bias columns but not in the coverage.

    SD-scale rows ``sigma`` and ``sigma_eps`` are appended, with
    delta-method standard errors for their coverage.
    """
    vec0 = theta0.to_vector()
    rows = []
    for (n, est), recs in _groups(records):
        ok = [r for r in recs if r.converged and np.all(np.isfinite(r.theta_hat))]
        n_failed = sum(1 for r in recs if r.error)
        n_noncv = sum(1 for r in recs if not r.converged and not r.error)
        hat = np.array([r.theta_hat for r in ok]).reshape(len(ok), len(names))
        se = np.array([r.std_errors for r in ok]).reshape(len(ok), len(names))
        stud = np.array([r.studentized for r in ok]).reshape(len(ok), len(names))
        cols = [(name, vec0[k], hat[:, k], se[:, k], stud[:, k]) for k, name in enumerate(names)]
        for name, var_pos in (("sigma", len(names) - 2), ("sigma_eps", len(names) - 1)):
            sd_hat = np.sqrt(hat[:, var_pos])
            cols.append((name, math.sqrt(vec0[var_pos]), sd_hat, se[:, var_pos] / (2.0 * sd_hat), None))
        for name, true, h, s, z in cols:
            bias = h - true
            m = len(bias)
            has_se = np.isfinite(s)
            cover = float(np.mean(np.abs(bias[has_se]) <= Z975 * s[has_se])) if has_se.any() else math.nan
            if z is not None and np.sum(np.isfinite(z)) >= 2:
                ks = stats.kstest(z[np.isfinite(z)], "norm")
                ks_stat, ks_p = float(ks.statistic), float(ks.pvalue)
            else:
                ks_stat = ks_p = math.nan
            rows.append({
                "n": n, "estimator": est, "parameter": name, "true_value": float(true),
                "n_reps": len(recs), "n_used": m, "n_nonconverged": n_noncv, "n_failed": n_failed,
                "mean_bias": float(np.mean(bias)) if m else math.nan,
                "sd": float(np.std(bias, ddof=1)) if m > 1 else math.nan,
                "n_with_se": int(has_se.sum()), "coverage": cover, "ks_stat": ks_stat, "ks_pvalue": ks_p,
            })
    return rows


def timing_table(records) -> list[dict]:
    rows = []
    for (n, est), recs in _groups(records):
        t = np.array([r.wall_time for r in recs if np.isfinite(r.wall_time)])
        if t.size == 0:
            continue
        rows.append({
            "n": n, "estimator": est, "n_fits": int(t.size), "min": float(t.min()),
            "q1": float(np.quantile(t, 0.25)), "mean": float(t.mean()),
            "sd": float(t.std(ddof=1)) if t.size > 1 else math.nan,
            "median": float(np.median(t)), "q3": float(np.quantile(t, 0.75)), "max": float(t.max()),
        })
    return rows


def qq_and_hist(records, names, bins=np.linspace(-4.0, 4.0, 33)):
    qq, hist = [], []
    for (n, est), recs in _groups(records):
        ok = [r for r in recs if r.converged]
        for k, name in enumerate(names):
            z = np.sort(np.array([r.studentized[k] for r in ok]))
            z = z[np.isfinite(z)]
            m = z.size
            if m == 0:
                continue
            probs = (np.arange(1, m + 1) - 0.5) / m
            for rank, (zi, qi) in enumerate(zip(z, stats.norm.ppf(probs)), start=1):
                qq.append({"n": n, "estimator": est, "parameter": name, "rank": rank,
                           "studentized": float(zi), "normal_quantile": float(qi)})
            counts, _ = np.histogram(z, bins=bins)
            expected = m * np.diff(stats.norm.cdf(bins))
            for lo, hi, c, e in zip(bins[:-1], bins[1:], counts, expected):
                hist.append({"n": n, "estimator": est, "parameter": name, "bin_lo": float(lo),
                             "bin_hi": float(hi), "count": int(c), "normal_expected": float(e)})
    return qq, hist


def read_records(path, names=None) -> list[McRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if names is None:
        names = [c[len("hat_"):] for c in (rows[0].keys() if rows else []) if c.startswith("hat_")]
    return [McRecord.from_row(r, names) for r in rows]


# ---------------------------------------------------------------------------
# Text tables
# ---------------------------------------------------------------------------


def _fmt(x, nd=3):
    return "nan" if x is None or not np.isfinite(x) else f"{x:.{nd}f}"


def render_tables(in_dir, out_dir) -> dict:
    """Aligned text versions of the timing and bias/SD tables."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    try:
        with open(in_dir / "aggregate.csv", newline="") as fh:
            agg = list(csv.DictReader(fh))
        with open(in_dir / "timing.csv", newline="") as fh:
            tim = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"missing study output in {in_dir}: {exc}") from exc
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = ["Computation time (seconds)", ""]
    head = ["N", "estimator", "Min", "Q1", "Mean", "SD", "Median", "Q3", "Max"]
    body = [[r["n"], r["estimator"]] + [_fmt(float(r[c])) for c in ("min", "q1", "mean", "sd", "median", "q3", "max")]
            for r in tim]
    lines += _align([head] + body)
    t1 = "\n".join(lines) + "\n"

    params = []
    for r in agg:
        if r["parameter"] not in params:
            params.append(r["parameter"])
    shown = [p for p in params if p not in ("sigma2", "sigma_eps2")]
    lines = ["Mean bias (SD) over converged replications", ""]
    head = ["N", "estimator"] + shown + ["coverage(min)", "excluded"]
    body = []
    for n, est in dict.fromkeys((r["n"], r["estimator"]) for r in agg):
        sub = {r["parameter"]: r for r in agg if (r["n"], r["estimator"]) == (n, est)}
        cells = [f"{_fmt(float(sub[p]['mean_bias']))} ({_fmt(float(sub[p]['sd']))})" for p in shown]
        cov = min(float(sub[p]["coverage"]) for p in shown)
        first = sub[shown[0]]
        excl = int(first["n_reps"]) - int(first["n_used"])
        body.append([n, est] + cells + [_fmt(cov), str(excl)])
    lines += _align([head] + body)
    t2 = "\n".join(lines) + "\n"
    (out_dir / "table_timing.txt").write_text(t1)
    (out_dir / "table_bias.txt").write_text(t2)
    return {"timing": t1, "bias": t2}


def _align(rows):
    widths = [max(len(str(r[c])) for r in rows) for c in range(len(rows[0]))]
    return ["  ".join(str(v).rjust(w) for v, w in zip(r, widths)) for r in rows]
