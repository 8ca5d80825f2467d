"""Command-line entry point: ``intou-gql {simulate,fit,mc,report}``.

Exit codes: 0 success, 2 configuration or input error (including bad flags),
3 numerical or inference failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, InferenceError, InputError, NumericalError, RankDeficiencyError, DomainError
from .estimators import FitConfig, StageError, fit_joint, fit_stepwise, sd_scale_report
from .mc_harness import WORKERS_ENV, McConfig, Z975, default_workers, render_tables, run_study
from .model_core import read_dataset, write_dataset
from .simulate import RngStream, Scenario, simulate_dataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _load_json(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


def _cmd_simulate(args):
    scenario = Scenario.from_dict(_load_json(args.config)) if args.config else Scenario().validate()
    if args.seed is not None:
        scenario.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = simulate_dataset(RngStream(scenario.seed), scenario)
    csv_path, meta_path = out / "data.csv", out / "data.json"
    write_dataset(ds, csv_path, meta_path, scenario.theta_true.psi, {"scenario": scenario.to_dict()})
    print(f"wrote {ds.n_individuals} individuals ({ds.n_obs} rows) to {csv_path}", file=sys.stderr)


def _cmd_fit(args):
    ds, psi = read_dataset(args.data, args.meta)
    cfg = FitConfig.from_dict(_load_json(args.config)) if args.config else FitConfig()
    cfg.psi = psi
    if args.method == "joint":
        fit = fit_joint(ds, cfg)
        extra = {}
    else:
        sw = fit_stepwise(ds, cfg)
        fit = sw.fit
        extra = {"stage_times_s": list(sw.stage_times), "beta_stage1": sw.beta1.tolist()}
    report = fit.to_dict()
    est = fit.theta_hat.to_vector()
    report["intervals_95"] = {
        name: [float(e - Z975 * s), float(e + Z975 * s)]
        for name, e, s in zip(fit.theta_hat.names(), est, fit.std_errors)
    }
    report["sd_scale"] = sd_scale_report(fit)
    report.update(extra)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    if fit.inference_error or not np.all(np.isfinite(fit.std_errors)):
        # the estimate is still written; the exit code signals missing inference
        raise InferenceError(fit.inference_error or "standard errors are not finite")


def _cmd_mc(args):
    raw = _load_json(args.config)
    cfg = McConfig.from_dict(raw)
    if args.out:
        cfg.output_dir = args.out
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg.workers = args.workers
    total = len(cfg.tasks())

    def progress(done, total=total):
        if not args.quiet:
            print(f"\r{done}/{total} replications", end="", file=sys.stderr, flush=True)

    rep = run_study(cfg, resume=not args.fresh, progress=progress)
    if not args.quiet:
        print(file=sys.stderr)
    failed = sum(1 for r in rep.records if r.error)
    noncv = sum(1 for r in rep.records if not r.converged and not r.error)
    print(f"{len(rep.records)} fits, {noncv} not converged, {failed} failed; outputs in {cfg.output_dir}", file=sys.stderr)


def _cmd_report(args):
    tables = render_tables(args.in_dir, args.out)
    print(tables["timing"])
    print(tables["bias"])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="intou-gql", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a dataset (CSV + JSON sidecar)")
    s.add_argument("--config", help="scenario JSON; defaults reproduce the reference design")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.set_defaults(func=_cmd_simulate)

    f = sub.add_parser("fit", help="fit a dataset and emit the result as JSON")
    f.add_argument("--data", required=True)
    f.add_argument("--meta", required=True)
    f.add_argument("--method", choices=("joint", "stepwise"), default="joint")
    f.add_argument("--config", help="fit configuration JSON (optimizer settings, start values)")
    f.add_argument("--out", help="output JSON path (default: stdout)")
    f.set_defaults(func=_cmd_fit)

    m = sub.add_parser("mc", help="run a Monte Carlo study")
    m.add_argument("--config", required=True)
    m.add_argument("--out", help="output directory (overrides the config)")
    m.add_argument("--workers", type=int, help=f"worker processes (default: ${WORKERS_ENV} or 1)")
    m.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    m.add_argument("--quiet", action="store_true")
    m.set_defaults(func=_cmd_mc)

    r = sub.add_parser("report", help="render study CSVs as text tables")
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_report)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        args.func(args)
    except (ConfigError, InputError, DomainError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc.cause, (ConfigError, InputError)) else EXIT_NUMERIC
    except (NumericalError, InferenceError, RankDeficiencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
