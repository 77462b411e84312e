"""``unroll-lgm`` command line.

::

    unroll-lgm run <config>
    unroll-lgm compare <config> --estimators exact,output,network
    unroll-lgm diagnose <config>

Common flags: ``--seed``, ``--threads``, ``--deterministic/--no-deterministic``
and ``--out``.  Every command writes ``result.json`` and
``resolved-config.json``; ``run`` adds ``metrics.csv``, ``compare`` adds
``comparison.csv`` and ``diagnose`` adds one JSON and one CSV per probe.  On
failure ``result.json`` carries an ``error`` section and the exit status is
nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import pathlib
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .diagnostics import write_report
from .experiments import (
    ConfigError,
    ExperimentError,
    config_hash,
    load_config,
    resolve_config,
    run_diagnostics,
    run_experiment,
    with_estimator,
)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else str(v)
    if isinstance(value, (np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_json(path, doc):
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def _write_csv(path, rows, provenance):
    columns = list(provenance)
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({**provenance, **_jsonable(row)})


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="experiment config (TOML, or JSON by extension)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads when not deterministic")
    common.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="single-threaded numerics for bitwise reproducible results (default on)",
    )
    common.add_argument("--out", default=None, help="output directory (default runs/<config name>)")

    parser = argparse.ArgumentParser(prog="unroll-lgm", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run one experiment")
    cmp = sub.add_parser("compare", parents=[common], help="run one experiment per estimator")
    cmp.add_argument(
        "--estimators", default="exact,output,network", help="comma-separated estimator list"
    )
    sub.add_parser("diagnose", parents=[common], help="run the gradient error probes")
    return parser


def _out_dir(args):
    if args.out:
        return pathlib.Path(args.out)
    return pathlib.Path("runs") / pathlib.Path(args.config).stem


def _fail(out, provenance, exc, kind, log=None):
    doc = dict(provenance)
    doc["status"] = "error"
    doc["error"] = {"type": kind, "message": str(exc)}
    doc["error"].update(getattr(exc, "context", {}) or {})
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "result.json", doc)
        if log:
            _write_csv(out / "metrics.csv", log, provenance)
    except OSError as os_exc:
        print(f"unroll-lgm: cannot write to {out}: {os_exc.strerror}", file=sys.stderr)
    print(f"unroll-lgm: {kind}: {exc}", file=sys.stderr)


def _cmd_run(cfg, out, provenance):
    log, metrics, _ = run_experiment(cfg)
    _write_csv(out / "metrics.csv", log, provenance)
    doc = dict(provenance, kind=cfg.kind, estimator=cfg.train.estimator, status="ok", metrics=metrics)
    _write_json(out / "result.json", doc)


_PRIMARY_METRIC = {
    "ar-recover": "phi_nrmse_percent",
    "cs-reconstruct": "reconstruction_nrmse_percent",
    "cf-train": "test_rmse",
}


def _cmd_compare(cfg, out, provenance, estimators):
    names = [e.strip() for e in estimators.split(",") if e.strip()]
    if not names:
        raise ConfigError("--estimators is empty")
    configs = [with_estimator(cfg, e) for e in names]
    rows, results = [], {}
    for name, sub_cfg in zip(names, configs):
        sub = out / name
        sub.mkdir(parents=True, exist_ok=True)
        sub_prov = dict(provenance, config_hash=config_hash(sub_cfg))
        log, metrics, seconds = run_experiment(sub_cfg)
        _write_csv(sub / "metrics.csv", log, sub_prov)
        _write_json(sub / "result.json", dict(sub_prov, kind=cfg.kind, estimator=name, status="ok", metrics=metrics))
        metric = _PRIMARY_METRIC[cfg.kind]
        rows.append(
            {
                "estimator": name,
                "metric": metric,
                "value": metrics.get(metric, float("nan")),
                "seconds": seconds,
                "total_matvecs": metrics["total_matvecs"],
            }
        )
        results[name] = metrics
    _write_csv(out / "comparison.csv", rows, provenance)
    _write_json(out / "result.json", dict(provenance, kind=cfg.kind, status="ok", estimators=results))
    for row in rows:
        print(f"{row['estimator']:>12}  {row['metric']}={row['value']:.4g}  "
              f"seconds={row['seconds']:.1f}  matvecs={row['total_matvecs']}")


def _cmd_diagnose(cfg, out, provenance):
    reports, summary = run_diagnostics(cfg)
    for name, report in reports.items():
        write_report(report, out, name, extra=provenance)
    _write_json(out / "result.json", dict(provenance, kind="diagnose", status="ok", metrics=summary))


def main(argv=None):
    args = _parser().parse_args(argv)
    out = _out_dir(args)
    provenance = {"seed": args.seed, "config_hash": None}
    try:
        cfg = resolve_config(load_config(args.config), seed=args.seed)
        if args.command == "diagnose" and cfg.kind != "diagnose":
            cfg = cfg.model_copy(update={"kind": "diagnose"})
        if args.command != "diagnose" and cfg.kind == "diagnose":
            raise ConfigError("config field 'kind': use the diagnose command for diagnose configs")
    except ConfigError as exc:
        _fail(out, provenance, exc, "ConfigError")
        return EXIT_CONFIG
    provenance = {"seed": cfg.seed, "config_hash": config_hash(cfg)}
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "resolved-config.json", dict(provenance, config=cfg.model_dump()))
    except OSError as exc:
        print(f"unroll-lgm: cannot write to {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_FAILURE
    limit = 1 if args.deterministic else args.threads
    try:
        with threadpool_limits(limits=limit):
            if args.command == "run":
                _cmd_run(cfg, out, provenance)
            elif args.command == "compare":
                _cmd_compare(cfg, out, provenance, args.estimators)
            else:
                _cmd_diagnose(cfg, out, provenance)
    except ConfigError as exc:
        _fail(out, provenance, exc, "ConfigError")
        return EXIT_CONFIG
    except ExperimentError as exc:
        _fail(out, provenance, exc, "NumericalError", exc.log)
        return EXIT_FAILURE
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        _fail(out, provenance, exc, type(exc).__name__)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
