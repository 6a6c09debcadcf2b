"""``cateq`` command line: synth, sample, evaluate, bench, verify.

Each subcommand takes an optional ``--config`` TOML file whose keys are the
subcommand's long option names (dashes or underscores). A flag given on the
command line overrides the same key from the file; unknown keys are
rejected. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical or calibration error.
"""

from __future__ import annotations

import argparse
import importlib.util
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import _seeding, bench, learners, qstat, sampling, synthetic
from .data import SchemaConfig, import_predictions, load_csv, load_dataset, save_dataset, split
from .errors import CateqError, ConfigError, DataError, NumericalError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "synth": {
        "transform": "interaction",
        "tau": 0.0,
        "n": 10000,
        "seed": 0,
        "noise_sd": 1.0,
        "assignment": "logistic",
        "e1": 0.5,
        "covariates": None,
        "schema": None,
        "out_dir": ".",
        "name": "synthetic",
    },
    "sample": {
        "data": None,
        "schema": None,
        "master_seed": 0,
        "sizes": [1000, 2000, 4000, 8000],
        "treat_fracs": [0.1, 0.5, 0.9],
        "layers": [1, 2, 3],
        "replicates": 100,
        "eval_fraction": 0.5,
        "out_dir": "cells",
        "dry_run": False,
    },
    "evaluate": {
        "data": None,
        "predictions": None,
        "baseline": None,
        "cv": "none",
        "theta": None,
        "nuisance_data": None,
        "nuisance_fraction": 0.2,
        "true_propensity": False,
        "seed": 0,
        "out": None,
    },
    "bench": {
        "data": None,
        "schema": None,
        "master_seed": 0,
        "sizes": [1000, 2000, 4000, 8000],
        "treat_fracs": [0.1, 0.5, 0.9],
        "layers": [1, 2, 3],
        "replicates": 100,
        "eval_fraction": 0.5,
        "roster": list(bench.NATIVE_ROSTER),
        "cv": "dr",
        "nuisance_fraction": 0.2,
        "jobs": None,
        "out": "report.json",
        "csv": None,
    },
    "verify": {
        "transform": "interaction",
        "tau": 0.5,
        "est_size": 4000,
        "eval_sizes": [1000, 2000, 4000, 8000, 16000, 32000, 64000],
        "replicates": 50,
        "roster": list(bench.NATIVE_ROSTER),
        "cvs": ["none", "dr"],
        "eval_assignment": "logistic",
        "seed": 0,
        "jobs": None,
        "out": "verify.json",
        "csv": None,
    },
}


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _names(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _add(p, flag, **kw):
    p.add_argument(flag, default=argparse.SUPPRESS, **kw)


def _grid_flags(p):
    _add(p, "--master-seed", type=int)
    _add(p, "--sizes", type=_ints, help="comma-separated estimation-set sizes")
    _add(p, "--treat-fracs", type=_floats, help="comma-separated treated fractions")
    _add(p, "--layers", type=_ints, help="comma-separated biasing-network depths (1-3)")
    _add(p, "--replicates", type=int)
    _add(p, "--eval-fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cateq", description="Evaluate CATE estimators on RCT data with the Q statistic.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a semi-synthetic dataset with oracle effects")
    _add(p, "--config", help="TOML file of option values")
    _add(p, "--transform", choices=[t.value for t in synthetic.Transform])
    _add(p, "--tau", type=float, help="additive average effect shift")
    _add(p, "--n", type=int, help="rows to simulate (ignored with --covariates)")
    _add(p, "--seed", type=int)
    _add(p, "--noise-sd", type=float)
    _add(p, "--assignment", choices=["logistic", "rct"])
    _add(p, "--e1", type=float, help="treatment probability for --assignment rct")
    _add(p, "--covariates", help="CSV of real covariates (needs --schema)")
    _add(p, "--schema", help="TOML schema for --covariates")
    _add(p, "--out-dir")
    _add(p, "--name")

    p = sub.add_parser("sample", help="draw selection-biased estimation sets for each grid cell")
    _add(p, "--config")
    _add(p, "--data", help="RCT dataset: staged CSV, or raw CSV with --schema")
    _add(p, "--schema")
    _grid_flags(p)
    _add(p, "--out-dir")
    _add(p, "--dry-run", action="store_true", help="print the cell count and exit")

    p = sub.add_parser("evaluate", help="compute Q-hat for one prediction file")
    _add(p, "--config")
    _add(p, "--data", help="staged evaluation dataset CSV")
    _add(p, "--predictions", help="row_index,tau_hat CSV aligned to --data")
    _add(p, "--baseline", help="constant-effect predictions for heterogeneity screening")
    _add(p, "--cv", help="none | li | dr | r | custom:<file.py>")
    _add(p, "--theta", help="fixed multiplier or 'optimal'")
    _add(p, "--nuisance-data", help="separate dataset to fit outcome plug-ins on")
    _add(p, "--nuisance-fraction", type=float, help="held-out slice of --data for plug-ins")
    _add(p, "--true-propensity", action="store_true", help="use per-row propensities from the sidecar")
    _add(p, "--seed", type=int)
    _add(p, "--out", help="output JSON path (stdout when absent)")

    p = sub.add_parser("bench", help="run the benchmark grid")
    _add(p, "--config")
    _add(p, "--data")
    _add(p, "--schema")
    _grid_flags(p)
    _add(p, "--roster", type=_names, help="comma-separated: s,s_ext,t,r,dr,const,zero,import:<csv>")
    _add(p, "--cv", help="none | li | dr | r | custom:<file.py>")
    _add(p, "--nuisance-fraction", type=float)
    _add(p, "--jobs", type=int)
    _add(p, "--out")
    _add(p, "--csv")

    p = sub.add_parser("verify", help="ranking agreement of Q-hat with oracle PEHE")
    _add(p, "--config")
    _add(p, "--transform", choices=[t.value for t in synthetic.Transform])
    _add(p, "--tau", type=float)
    _add(p, "--est-size", type=int)
    _add(p, "--eval-sizes", type=_ints)
    _add(p, "--replicates", type=int)
    _add(p, "--roster", type=_names)
    _add(p, "--cvs", type=_names)
    _add(p, "--eval-assignment", choices=["logistic", "rct"])
    _add(p, "--seed", type=int)
    _add(p, "--jobs", type=int)
    _add(p, "--out")
    _add(p, "--csv")
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    config = getattr(args, "config", None)
    if config is not None:
        path = Path(config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        file_opts = {k.replace("-", "_"): v for k, v in raw.items()}
        unknown = sorted(set(file_opts) - set(opts))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown} for '{command}'")
        opts.update(file_opts)
    opts.update(flags)
    return opts


def _require(opts, *keys):
    for k in keys:
        if opts.get(k) is None:
            raise ConfigError(f"missing required option --{k.replace('_', '-')}")
        if k in ("data", "predictions", "schema", "covariates", "baseline", "nuisance_data"):
            if not Path(opts[k]).exists():
                raise ConfigError(f"--{k.replace('_', '-')}: no such file {opts[k]}")


def _load_rct(opts):
    _require(opts, "data")
    if opts.get("schema"):
        _require(opts, "schema")
        return load_csv(opts["data"], SchemaConfig.from_file(opts["schema"]))
    return load_dataset(opts["data"])


def _grid(opts) -> bench.GridConfig:
    return bench.GridConfig(
        master_seed=int(opts["master_seed"]),
        sizes=tuple(opts["sizes"]),
        treat_fracs=tuple(opts["treat_fracs"]),
        layers=tuple(opts["layers"]),
        replicates=int(opts["replicates"]),
        eval_fraction=float(opts["eval_fraction"]),
    )


def _write_json(obj, path):
    text = json.dumps(obj, indent=1, allow_nan=False) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def _load_custom(spec: str, theta):
    path = Path(spec.split(":", 1)[1])
    if not path.exists():
        raise ConfigError(f"custom control variate file not found: {path}")
    module_spec = importlib.util.spec_from_file_location(f"cateq_custom_{path.stem}", path)
    module = importlib.util.module_from_spec(module_spec)
    module_spec.loader.exec_module(module)
    fn = getattr(module, "control_variate", None)
    if not callable(fn):
        raise ConfigError(f"{path} must define control_variate(x, t, y, tau_hat, e)")
    return qstat.ControlVariate(qstat.CVKind.CUSTOM, theta, fn)


def _control_variate(spec, theta=None) -> qstat.ControlVariate:
    if theta is not None and theta != qstat.OPTIMAL:
        theta = float(theta)
    if isinstance(spec, str) and spec.startswith("custom:"):
        return _load_custom(spec, theta)
    return qstat.ControlVariate(qstat.CVKind.parse(spec), theta)


# ------------------------------------------------------------------------- commands


def cmd_synth(opts) -> int:
    cfg = synthetic.SyntheticConfig(
        opts["transform"], tau_shift=float(opts["tau"]), noise_sd=float(opts["noise_sd"]), seed=int(opts["seed"])
    )
    if opts.get("covariates"):
        _require(opts, "covariates", "schema")
        schema = SchemaConfig.from_file(opts["schema"])
        x = load_csv(opts["covariates"], schema).x
    else:
        if int(opts["n"]) < 2:
            raise ConfigError("--n must be at least 2")
        x = synthetic.hillstrom_like_features(int(opts["n"]), _seeding.derive_seed(cfg.seed, "covariates"))
    ds, truth = synthetic.make_dataset(x, cfg, assignment=opts["assignment"], e1=float(opts["e1"]), name=opts["name"])
    out = Path(opts["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    data_path = save_dataset(ds, out / f"{opts['name']}.csv", extra={"transform": cfg.transform.value, "tau": cfg.tau_shift})
    synthetic.write_oracle(truth, out / f"{opts['name']}.oracle.csv")
    print(f"wrote {data_path} and {out / (opts['name'] + '.oracle.csv')} ({len(ds)} rows, treated {ds.t.mean():.3f})")
    return EXIT_OK


def cmd_sample(opts) -> int:
    grid = _grid(opts)
    cells = grid.cells()
    if opts["dry_run"]:
        print(f"{len(cells)} cells")
        return EXIT_OK
    pool = _load_rct(opts)
    out = Path(opts["out_dir"])
    for cell in cells:
        train, eval_part = split(pool, grid.eval_fraction, _seeding.derive_seed(cell.seed, "split"))
        bias = sampling.BiasingConfig(
            layers=cell.layers,
            target_est_size=cell.size,
            target_treat_frac=cell.treat_frac,
            seed=_seeding.derive_seed(cell.seed, "biasing"),
        )
        try:
            g = sampling.make_biasing_fn(bias, train)
        except NumericalError as exc:
            raise type(exc)(f"cell {cell.cell_id}: {exc}") from None
        est = sampling.observational_sample(train, g, _seeding.derive_seed(cell.seed, "keep"))
        meta = {"cell_id": cell.cell_id, "seed": cell.seed}
        save_dataset(est, out / cell.cell_id / "est.csv", extra=meta)
        save_dataset(eval_part, out / cell.cell_id / "eval.csv", extra=meta)
    print(f"wrote {len(cells)} cells under {out}")
    return EXIT_OK


def cmd_evaluate(opts) -> int:
    _require(opts, "data", "predictions")
    data = load_dataset(opts["data"])
    tau = import_predictions(opts["predictions"], data).tau_hat
    base_tau = import_predictions(opts["baseline"], data).tau_hat if opts.get("baseline") else None
    cv = _control_variate(opts["cv"], opts.get("theta"))
    needs = cv.kind in (qstat.CVKind.DOUBLY_ROBUST, qstat.CVKind.R_STYLE)
    rows = np.arange(len(data))
    nuisances = None
    pilot_rows = None
    if needs or cv.kind is qstat.CVKind.CUSTOM:
        if opts.get("nuisance_data"):
            _require(opts, "nuisance_data")
            fit_on = load_dataset(opts["nuisance_data"])
        else:
            q_part, fit_on = split(data, float(opts["nuisance_fraction"]), _seeding.derive_seed(int(opts["seed"]), "nuisance-slice"))
            rows = np.searchsorted(data.row_ids, q_part.row_ids)
            pilot_rows = np.searchsorted(data.row_ids, fit_on.row_ids)
        if needs:
            models = learners.fit_outcome_models(fit_on, seed=int(opts["seed"]), fit_e=False)
            nuisances = models.predict(data.x[rows])
    evaluated = data.take(rows)
    propensity = evaluated.propensity if opts["true_propensity"] else None
    if opts["true_propensity"] and propensity is None:
        raise DataError(f"{opts['data']} has no recorded true propensities")
    if cv.kind is qstat.CVKind.CUSTOM:
        pilot = data.take(pilot_rows) if pilot_rows is not None else fit_on
        pilot_tau = tau[pilot_rows] if pilot_rows is not None else np.ones(len(pilot))
        qstat.gate_control_variate(cv, pilot, pilot_tau, pilot.propensity if opts["true_propensity"] else None)
    with warnings.catch_warnings():
        warnings.simplefilter("default", RuntimeWarning)
        result = qstat.qhat(tau[rows], evaluated, propensity, cv, nuisances)
        baseline = qstat.qhat(base_tau[rows], evaluated, propensity, cv, nuisances) if base_tau is not None else None
    result = qstat.screen(result, baseline)
    _write_json(result.to_dict(), opts.get("out"))
    return EXIT_OK


def cmd_bench(opts) -> int:
    pool = _load_rct(opts)
    roster = []
    for entry in opts["roster"]:
        if str(entry).startswith("import:"):
            path = Path(entry.split(":", 1)[1])
            if not path.exists():
                raise ConfigError(f"imported predictions not found: {path}")
            roster.append(import_predictions(path, pool))
        else:
            roster.append(entry)
    q_config = bench.QConfig(cv=_control_variate(opts["cv"]), nuisance_fraction=float(opts["nuisance_fraction"]))
    jobs = opts["jobs"] if opts["jobs"] is not None else (os.cpu_count() or 1)
    report = bench.run_benchmark(pool, _grid(opts), roster, q_config, jobs=jobs)
    bench.emit_report(report, "json", opts["out"])
    if opts.get("csv"):
        bench.emit_report(report, "csv", opts["csv"])
    header = f"{'model':<16}{'wins':>6}{'win share':>11}{'degenerate':>12}{'degen rate':>12}{'avg rank':>10}"
    print(header)
    for a in report.aggregates:
        rank = "-" if a.avg_rank is None else f"{a.avg_rank:.2f}"
        print(f"{a.model:<16}{a.wins:>6}{a.win_share:>11.1%}{a.degenerate_count:>12}{a.degenerate_rate:>12.1%}{rank:>10}")
    return EXIT_OK


def cmd_verify(opts) -> int:
    cfg = bench.VerifyConfig(
        transform=opts["transform"],
        tau_shift=float(opts["tau"]),
        est_size=int(opts["est_size"]),
        eval_sizes=tuple(opts["eval_sizes"]),
        replicates=int(opts["replicates"]),
        roster=tuple(opts["roster"]),
        cvs=tuple(opts["cvs"]),
        eval_assignment=opts["eval_assignment"],
        seed=int(opts["seed"]),
    )
    jobs = opts["jobs"] if opts["jobs"] is not None else (os.cpu_count() or 1)
    report = bench.run_verification(cfg, jobs=jobs)
    _write_json(report.to_dict(), opts["out"])
    if opts.get("csv"):
        Path(opts["csv"]).write_text(report.table_csv(), encoding="utf-8")
    print(f"{'cv':<22}{'eval size':>10}{'MRR':>8}{'prec@1':>8}{'spearman':>10}")
    for row in report.table:
        print(f"{row['cv']:<22}{row['eval_size']:>10}{row['mrr']:>8.3f}{row['precision_at_1']:>8.3f}{row['rank_correlation']:>10.3f}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve_options(args.command, args)
        return COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"cateq {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"cateq {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"cateq {args.command}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CateqError as exc:  # pragma: no cover - every concrete error is one of the above
        print(f"cateq {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cateq {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
