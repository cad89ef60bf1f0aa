"""Command-line front end.

Subcommands::

    fvlab simulate   --config cfg.json --out DIR [--threads N]
    fvlab oracle     --config cfg.json --out DIR
    fvlab validate   --config cfg.json --out DIR [--threads N]
    fvlab sweep-theta --config cfg.json --out DIR

The configuration is a single JSON document::

    {
      "N": 10000, "theta": 0.5,          // or an explicit "K"
      "T": 3.0, "seed": 20240801,        // seed is mandatory
      "model": {"type": "pure_death", "rate": 1.0},
      "test_functions": ["alive"],
      "replicas": 400,
      "oracle": {"curve_points": 201},
      "sweep": {"start": 0.1, "stop": 0.9, "step": 0.1}
    }

Outputs are JSON (structured reports) and CSV (tabular data), with no
timestamps, so identical config + seed reproduce byte-identical files.
``--threads`` parallelizes across replicas (worker processes); records are
independent of the worker count.

Exit codes: 0 success, 1 invalid configuration, 2 engine error, 3 model has
no exact oracle, 4 validation criteria failed (the summary is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .engine import ConfigError, FVConfig, NonTerminationError, run_fv
from .models import load_model
from .oracle import (BoundaryWarning, compute_oracle_report, cost_model, h_theta,
                     quantile_times, relative_variance_bounds, sigma2_sync,
                     survival_curve, survival_probability)
from .stats import clt_report, cost_report, evaluate_criteria, run_replicas

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ENGINE = 2
EXIT_NO_ORACLE = 3
EXIT_VALIDATION = 4


def _sanitize(obj):
    """Replace NaN/inf by None recursively so JSON output is strict."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_sanitize(payload), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _load_spec(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _build_config(spec):
    if "model" not in spec:
        raise ConfigError("config must include a 'model' entry")
    model = load_model(spec["model"])
    names = list(spec.get("test_functions", ["alive"]))
    if "alive" not in names:
        names.insert(0, "alive")
    config = FVConfig.from_dict({**spec, "test_functions": names}, model=model)
    return config, model


def _resolved_theta(config):
    if config.theta is not None:
        return config.theta
    return 1.0 - config.batch_k() / config.n_particles


def _records_csv(path, records):
    max_branches = max((len(r.branch_times) for r in records), default=0)
    names = list(records[0].gamma_hat) if records else []
    header = (["replica", "p_hat", "resample_count", "cost_segments", "alive_fraction"]
              + [f"gamma::{n}" for n in names]
              + [f"eta_norm::{n}" for n in names]
              + [f"tau_{j}" for j in range(1, max_branches + 1)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, rec in enumerate(records):
            row = [i, repr(rec.p_hat), rec.resample_count, rec.cost_segments,
                   repr(rec.alive_fraction_at_T)]
            row += [repr(rec.gamma_hat[n]) for n in names]
            row += ["" if math.isnan(rec.eta_norm_hat[n]) else repr(rec.eta_norm_hat[n])
                    for n in names]
            taus = list(rec.branch_times)
            row += [repr(t) for t in taus] + [""] * (max_branches - len(taus))
            writer.writerow(row)


def cmd_simulate(args):
    spec = _load_spec(args.config)
    config, _ = _build_config(spec)
    n_replicas = int(spec.get("replicas", 100))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if n_replicas == 1:
            records = [run_fv(config)]
        else:
            records = run_replicas(config, n_replicas, n_jobs=args.threads)
    except NonTerminationError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except RuntimeError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    _write_json(out / "records.json", {"config": spec,
                                       "records": [r.to_dict() for r in records]})
    _records_csv(out / "records.csv", records)
    counts = sorted({r.resample_count for r in records})
    mean_p = float(np.mean([r.p_hat for r in records]))
    print(f"replicas={len(records)} mean_p_hat={mean_p:.6g} "
          f"resample_counts={counts}")
    return EXIT_OK


def cmd_oracle(args):
    spec = _load_spec(args.config)
    config, model = _build_config(spec)
    if not getattr(model, "has_oracle", False):
        print("model has no exact oracle (only finite-state CTMC models do); "
              "oracle reports are unavailable for discretized diffusions",
              file=sys.stderr)
        return EXIT_NO_ORACLE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = spec.get("oracle", {})
    report = compute_oracle_report(
        model, _resolved_theta(config), config.horizon,
        test_functions=config.test_functions,
        n_particles=config.n_particles,
        h_grid=opts.get("h_grid"),
    )
    _write_json(out / "oracle_report.json", report.to_dict())
    ts, ps = survival_curve(model, config.horizon, int(opts.get("curve_points", 201)))
    with open(out / "survival_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "p_t"])
        for t, p in zip(ts, ps):
            writer.writerow([repr(float(t)), repr(float(p))])
    print(f"p_T={report.p_T:.6g} j_max={report.grid.j_max} "
          f"t_levels={[round(float(t), 6) for t in report.grid.t_levels]}")
    return EXIT_OK


def cmd_validate(args):
    spec = _load_spec(args.config)
    config, model = _build_config(spec)
    if not getattr(model, "has_oracle", False):
        print("validation needs an exact oracle; model has none", file=sys.stderr)
        return EXIT_NO_ORACLE
    n_replicas = int(spec.get("replicas", 100))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    theta = _resolved_theta(config)
    report = compute_oracle_report(
        model, theta, config.horizon,
        test_functions=config.test_functions, n_particles=config.n_particles)
    try:
        records = run_replicas(config, n_replicas, n_jobs=args.threads)
    except RuntimeError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        summary = clt_report(records, report, config)
    cost = cost_report(records, report, config)
    sup_norms = {tf: model.test_function(tf).sup_norm for tf in config.test_functions}
    checks = evaluate_criteria(summary, cost, report, config, sup_norms=sup_norms)
    _write_json(out / "validation.json", {
        "config": spec,
        "summary": summary.to_dict(),
        "cost": cost.to_dict(),
        "checks": [c.to_dict() for c in checks],
        "oracle": report.to_dict(),
    })
    failed = [c for c in checks if c.passed is False]
    skipped = [c for c in checks if c.passed is None]
    for c in checks:
        verdict = "PASS" if c.passed else ("SKIP" if c.passed is None else "FAIL")
        print(f"{verdict} {c.name}: value={c.value:.6g} window={c.window}")
    if skipped:
        print(f"warning: {len(skipped)} criteria skipped "
              f"(insufficient replicas or undefined target)", file=sys.stderr)
    return EXIT_VALIDATION if failed else EXIT_OK


def _sweep_grid(spec):
    sweep = spec.get("sweep", {})
    if "grid" in sweep:
        return [float(t) for t in sweep["grid"]]
    start = float(sweep.get("start", 0.1))
    stop = float(sweep.get("stop", 0.9))
    step = float(sweep.get("step", 0.1))
    n_steps = int(round((stop - start) / step))
    return [start + i * step for i in range(n_steps + 1)]


def cmd_sweep_theta(args):
    spec = _load_spec(args.config)
    config, model = _build_config(spec)
    if not getattr(model, "has_oracle", False):
        print("theta sweeps need an exact oracle; model has none", file=sys.stderr)
        return EXIT_NO_ORACLE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p_T = survival_probability(model, config.horizon)
    n = config.n_particles
    rows = []
    for theta in _sweep_grid(spec):
        if not 0.0 < theta < 1.0:
            raise ConfigError(f"sweep theta {theta} outside (0,1)")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", BoundaryWarning)
            grid = quantile_times(model, theta, config.horizon)
            s2 = sigma2_sync(model, model.test_function("alive"), theta,
                             config.horizon, grid=grid)
            lower, upper = relative_variance_bounds(p_T, theta)
            c_sync, c_classical = cost_model(p_T, theta, n)
        flags = sorted(set(grid.flags) | {"warned" for w in caught
                                          if issubclass(w.category, BoundaryWarning)})
        rows.append([repr(theta), grid.j_max, repr(grid.r), repr(h_theta(p_T, theta)),
                     repr(lower), repr(upper), repr(s2), repr(c_sync),
                     repr(c_classical), ";".join(flags)])
    with open(out / "theta_sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["theta", "j_max", "r", "h", "rel_var_lower", "rel_var_upper",
                         "sigma2_sync_alive", "cost_sync", "cost_classical", "flags"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows (p_T={p_T:.6g})")
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="fvlab",
        description="Synchronized Fleming-Viot simulation and verification lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("simulate", cmd_simulate), ("oracle", cmd_oracle),
                     ("validate", cmd_validate), ("sweep-theta", cmd_sweep_theta)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the JSON config")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--threads", type=int, default=1,
                        help="parallel replica workers (validate/simulate)")
        sp.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, KeyError, TypeError, ValueError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
