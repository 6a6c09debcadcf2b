"""Benchmark orchestration and the oracle ranking-agreement protocol.

:func:`run_benchmark` repeats, for every grid cell: split the RCT into a
training part and an evaluation part, draw a selection-biased estimation
set from the training part, fit every model in the roster on it, and score
each model by Q-hat on the (unbiased) evaluation part. Aggregates follow
the usual leaderboard columns: wins, win share, degenerate count and rate,
average rank.

:func:`run_verification` is the semi-synthetic check that Q-hat rankings
recover oracle PEHE rankings as the evaluation set grows.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import io
import json
import math
import os
import warnings
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import _seeding, learners, qstat, sampling, synthetic
from .data import Dataset, PredictionTable, Provenance, split
from .errors import CateqError, ConfigError, DataError

__all__ = [
    "SCHEMA_VERSION",
    "NATIVE_ROSTER",
    "GridConfig",
    "QConfig",
    "CellResult",
    "ModelAggregate",
    "BenchmarkReport",
    "run_benchmark",
    "run_cell",
    "summarize",
    "emit_report",
    "load_report",
    "VerifyConfig",
    "VerificationReport",
    "run_verification",
]

SCHEMA_VERSION = 1
NATIVE_ROSTER = ("s", "s_ext", "t", "r", "dr", "const", "zero")
RANK_CONVENTION = (
    "models ranked within each cell by q_hat ascending, ties by model id; "
    "failed fits rank last; degenerate models are ranked too"
)
SIG_DIGITS = 6


def _round(v):
    if v is None:
        return None
    v = float(v)
    if not math.isfinite(v):
        return None
    return float(f"{v:.{SIG_DIGITS}g}")


def _check_keys(cls, cfg: Mapping):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")


# -------------------------------------------------------------------------- configs


@dataclasses.dataclass(frozen=True)
class GridConfig:
    master_seed: int = 0
    sizes: tuple = (1000, 2000, 4000, 8000)
    treat_fracs: tuple = (0.1, 0.5, 0.9)
    layers: tuple = (1, 2, 3)
    replicates: int = 100
    eval_fraction: float = 0.5

    def __post_init__(self):
        for name in ("sizes", "treat_fracs", "layers"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in (0, 1)")

    @classmethod
    def from_mapping(cls, cfg: Mapping) -> "GridConfig":
        _check_keys(cls, cfg)
        return cls(**cfg)

    def cells(self) -> list[sampling.GridCell]:
        return sampling.build_grid(self.sizes, self.treat_fracs, self.layers, self.replicates, self.master_seed)


@dataclasses.dataclass(frozen=True)
class QConfig:
    """Evaluation criterion: control variate and where its nuisances come from.

    For the doubly robust and R-style variates, ``nuisance_fraction`` of
    each evaluation set is held out to fit the outcome plug-ins and is
    excluded from the Q-hat sum.
    """

    cv: object = "dr"
    nuisance_fraction: float = 0.2
    cross_fit_folds: int = 2

    def __post_init__(self):
        object.__setattr__(self, "cv", qstat.ControlVariate.parse(self.cv))
        if not 0 < self.nuisance_fraction < 1:
            raise ConfigError("nuisance_fraction must lie in (0, 1)")

    @property
    def needs_nuisances(self) -> bool:
        return self.cv.kind in (qstat.CVKind.DOUBLY_ROBUST, qstat.CVKind.R_STYLE)


# -------------------------------------------------------------------------- results


@dataclasses.dataclass(frozen=True)
class CellResult:
    dataset_id: str
    cell_id: str
    size: int
    treat_frac: float
    layers: int
    replicate: int
    model: str
    status: str  # "ok" or "failed"
    q_hat: float | None = None
    se: float | None = None
    ci_lo: float | None = None
    ci_hi: float | None = None
    n: int = 0
    cv: str = ""
    theta: float | None = None
    screening: str = qstat.Screening.UNSCREENED.value
    est_size: int = 0
    error: str = ""

    @property
    def degenerate(self) -> bool:
        return self.status != "ok" or self.screening == qstat.Screening.DEGENERATE.value

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("treat_frac", "q_hat", "se", "ci_lo", "ci_hi", "theta"):
            d[k] = _round(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CellResult":
        return cls(**d)


@dataclasses.dataclass(frozen=True)
class ModelAggregate:
    model: str
    wins: int
    win_share: float
    degenerate_count: int
    degenerate_rate: float
    failed_count: int
    avg_rank: float | None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("win_share", "degenerate_rate", "avg_rank"):
            d[k] = _round(d[k])
        return d


@dataclasses.dataclass(frozen=True)
class BenchmarkReport:
    roster: tuple
    config: dict
    results: tuple
    aggregates: tuple
    cells: tuple  # per-cell {cell_id, best, qualifying}
    metadata: dict = dataclasses.field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "roster": list(self.roster),
            "config": self.config,
            "metadata": self.metadata,
            "aggregates": [a.to_dict() for a in self.aggregates],
            "cells": [dict(c) for c in self.cells],
            "results": [r.to_dict() for r in self.results],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchmarkReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported report schema_version {d.get('schema_version')!r}")
        return cls(
            roster=tuple(d["roster"]),
            config=d["config"],
            results=tuple(CellResult.from_dict(r) for r in d["results"]),
            aggregates=tuple(ModelAggregate(**a) for a in d["aggregates"]),
            cells=tuple(d["cells"]),
            metadata=d.get("metadata", {}),
            schema_version=d["schema_version"],
        )

    def aggregate(self, model: str) -> ModelAggregate:
        for a in self.aggregates:
            if a.model == model:
                return a
        raise KeyError(model)


# ----------------------------------------------------------------------- the roster


@dataclasses.dataclass(frozen=True)
class _Model:
    id: str
    strategy: learners.Strategy
    predictions: np.ndarray | None = None  # imported, indexed by root row id


def _parse_roster(roster: Sequence, n_root: int) -> list[_Model]:
    if not roster:
        raise ConfigError("model roster is empty")
    out = []
    for entry in roster:
        if isinstance(entry, PredictionTable):
            if len(entry) != n_root:
                raise DataError(f"imported predictions {entry.model_id!r} do not cover the dataset")
            out.append(_Model(f"import:{entry.model_id}", learners.Strategy.IMPORTED, entry.tau_hat))
            continue
        strategy = learners.Strategy.parse(entry)
        if strategy is learners.Strategy.IMPORTED:
            raise ConfigError("imported models must be passed as prediction tables")
        out.append(_Model(strategy.short, strategy))
    ids = [m.id for m in out]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate model ids in roster: {ids}")
    return out


# ------------------------------------------------------------------------ one cell


def _eval_parts(eval_part: Dataset, q_config: QConfig, seed: int):
    """Split off the nuisance slice (when needed) and predict plug-ins on the rest."""
    if not q_config.needs_nuisances:
        return eval_part, None
    q_part, nuis_part = split(eval_part, q_config.nuisance_fraction, _seeding.derive_seed(seed, "nuisance-slice"))
    models = learners.fit_outcome_models(nuis_part, seed=_seeding.derive_seed(seed, "eval-nuisance"))
    return q_part, models.predict(q_part.x)


def _fit_predict(model: _Model, est: Dataset, q_part: Dataset, est_nuisances, seed: int) -> np.ndarray:
    if model.strategy is learners.Strategy.IMPORTED:
        return model.predictions[q_part.row_ids]
    estimator = learners.fit_cate(model.strategy, est, est_nuisances(), seed=seed)
    return estimator.predict(q_part.x)


def run_cell(
    dataset: Dataset,
    cell: sampling.GridCell,
    roster: Sequence,
    q_config: QConfig,
    eval_fraction: float = 0.5,
) -> list[CellResult]:
    """All models of one grid cell; failures are recorded, never raised."""
    models = _parse_roster(roster, len(dataset))
    base = dict(
        dataset_id=dataset.fingerprint,
        cell_id=cell.cell_id,
        size=cell.size,
        treat_frac=cell.treat_frac,
        layers=cell.layers,
        replicate=cell.replicate,
        cv=q_config.cv.kind.value,
    )

    def failed(model_id, exc, est_size=0):
        return CellResult(model=model_id, status="failed", error=f"{type(exc).__name__}: {exc}", est_size=est_size, **base)

    try:
        train, eval_part = split(dataset, eval_fraction, _seeding.derive_seed(cell.seed, "split"))
        bias = sampling.BiasingConfig(
            layers=cell.layers,
            target_est_size=cell.size,
            target_treat_frac=cell.treat_frac,
            seed=_seeding.derive_seed(cell.seed, "biasing"),
        )
        g = sampling.make_biasing_fn(bias, train)
        est = sampling.observational_sample(train, g, _seeding.derive_seed(cell.seed, "keep"))
        q_part, eval_nuis = _eval_parts(eval_part, q_config, cell.seed)
    except (CateqError, np.linalg.LinAlgError) as exc:
        return [failed(m.id, exc) for m in models]

    cache = {}

    def est_nuisances():
        if "n" not in cache:
            cache["n"] = learners.fit_nuisances(
                est, folds=q_config.cross_fit_folds, seed=_seeding.derive_seed(cell.seed, "est-nuisance")
            )
        return cache["n"]

    fit_seed = _seeding.derive_seed(cell.seed, "fit")
    scored = {}
    for m in models:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                tau = _fit_predict(m, est, q_part, est_nuisances, fit_seed)
                scored[m.id] = qstat.qhat(tau, q_part, cv=q_config.cv, nuisances=eval_nuis)
        except (CateqError, np.linalg.LinAlgError) as exc:
            scored[m.id] = exc

    baseline = scored.get("const")
    if baseline is None:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                tau = _fit_predict(_Model("const", learners.Strategy.CONST), est, q_part, est_nuisances, fit_seed)
                baseline = qstat.qhat(tau, q_part, cv=q_config.cv, nuisances=eval_nuis)
        except (CateqError, np.linalg.LinAlgError):
            baseline = None
    if not isinstance(baseline, qstat.QResult):
        baseline = None

    out = []
    for m in models:
        res = scored[m.id]
        if not isinstance(res, qstat.QResult):
            out.append(failed(m.id, res, len(est)))
            continue
        res = qstat.screen(res, baseline)
        out.append(
            CellResult(
                model=m.id,
                status="ok",
                q_hat=res.q_hat,
                se=res.se,
                ci_lo=res.ci_lo,
                ci_hi=res.ci_hi,
                n=res.n,
                theta=res.theta,
                screening=res.screening.value,
                est_size=len(est),
                **base,
            )
        )
    return out


# ---------------------------------------------------------------------- aggregation


def _rank_cell(rows: Sequence[CellResult]) -> list[CellResult]:
    return sorted(rows, key=lambda r: (r.status != "ok", r.q_hat if r.status == "ok" else 0.0, r.model))


def summarize(results: Sequence[CellResult], roster: Sequence[str] | None = None):
    """Per-model aggregates and per-cell winners.

    A cell qualifies for win share and average rank when at least one model
    is not degenerate. Degenerate counts (failures included) run over all
    cells. Returns ``(aggregates, cells)``.
    """
    by_cell: dict[str, list[CellResult]] = {}
    for r in results:
        by_cell.setdefault(r.cell_id, []).append(r)
    models = list(roster) if roster is not None else sorted({r.model for r in results})
    wins = dict.fromkeys(models, 0)
    ranks = {m: [] for m in models}
    degenerate = dict.fromkeys(models, 0)
    failed = dict.fromkeys(models, 0)
    cells = []
    n_qualifying = 0
    for cell_id, rows in by_cell.items():
        ranked = _rank_cell(rows)
        qualifying = any(not r.degenerate for r in rows)
        for r in rows:
            degenerate[r.model] += r.degenerate
            failed[r.model] += r.status != "ok"
        best = ranked[0].model if ranked[0].status == "ok" else None
        cells.append({"cell_id": cell_id, "best": best, "qualifying": qualifying})
        if qualifying:
            n_qualifying += 1
            wins[ranked[0].model] += 1
            for i, r in enumerate(ranked):
                ranks[r.model].append(i + 1)
    n_cells = len(by_cell)
    aggregates = tuple(
        ModelAggregate(
            model=m,
            wins=wins[m],
            win_share=wins[m] / n_qualifying if n_qualifying else 0.0,
            degenerate_count=degenerate[m],
            degenerate_rate=degenerate[m] / n_cells if n_cells else 0.0,
            failed_count=failed[m],
            avg_rank=float(np.mean(ranks[m])) if ranks[m] else None,
        )
        for m in models
    )
    return aggregates, tuple(cells)


def _cell_task(args):
    dataset, cell, roster, q_config, eval_fraction = args
    return run_cell(dataset, cell, roster, q_config, eval_fraction)


def _gate_custom(dataset: Dataset, q_config: QConfig, seed: int):
    if q_config.cv.kind is not qstat.CVKind.CUSTOM:
        return
    n_pilot = max(2, len(dataset) // 5)
    idx = np.sort(_seeding.rng(seed, "pilot").permutation(len(dataset))[:n_pilot])
    pilot = dataset.take(idx)
    # a covariate-dependent probe so variates proportional to tau_hat are exercised
    probe = 1.0 + pilot.x.mean(axis=1)
    qstat.gate_control_variate(q_config.cv, pilot, probe)


def run_benchmark(
    dataset: Dataset,
    grid: GridConfig,
    roster: Sequence,
    q_config: QConfig | None = None,
    jobs: int | None = 1,
) -> BenchmarkReport:
    """Run the full grid; results are identical for any ``jobs``."""
    if dataset.provenance is not Provenance.RCT:
        raise DataError("benchmarks start from an RCT dataset")
    q_config = q_config or QConfig()
    models = _parse_roster(roster, len(dataset))
    _gate_custom(dataset, q_config, grid.master_seed)
    cells = grid.cells()
    tasks = [(dataset, c, tuple(roster), q_config, grid.eval_fraction) for c in cells]
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1 or len(tasks) <= 1:
        per_cell = [_cell_task(t) for t in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            per_cell = list(pool.map(_cell_task, tasks))
    results = tuple(r for rows in per_cell for r in rows)
    ids = [m.id for m in models]
    aggregates, cell_rows = summarize(results, ids)
    config = {
        "grid": dataclasses.asdict(grid),
        "q": {
            "cv": q_config.cv.kind.value,
            "theta": q_config.cv.theta,
            "nuisance_fraction": q_config.nuisance_fraction,
            "cross_fit_folds": q_config.cross_fit_folds,
        },
        "dataset": {"name": dataset.name, "fingerprint": dataset.fingerprint, "n": len(dataset), "e1": _round(dataset.e1)},
    }
    config["grid"] = {k: list(v) if isinstance(v, tuple) else v for k, v in config["grid"].items()}
    return BenchmarkReport(
        roster=tuple(ids),
        config=config,
        results=results,
        aggregates=aggregates,
        cells=cell_rows,
        metadata={"rank_convention": RANK_CONVENTION},
    )


# -------------------------------------------------------------------------- reports

CSV_FIELDS = [f.name for f in dataclasses.fields(CellResult)]


def _csv_text(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row[k] is None else row[k]) for k in fields})
    return buf.getvalue()


def report_json(report: BenchmarkReport) -> str:
    return json.dumps(report.to_dict(), indent=1, allow_nan=False) + "\n"


def emit_report(report: BenchmarkReport, fmt: str, path) -> Path:
    """Write ``report`` as JSON (everything) or CSV (one row per cell and model)."""
    path = Path(path)
    if fmt == "json":
        text = report_json(report)
    elif fmt == "csv":
        text = _csv_text([r.to_dict() for r in report.results], CSV_FIELDS)
    else:
        raise ConfigError(f"report format must be json or csv, got {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def load_report(path) -> BenchmarkReport:
    with open(path, encoding="utf-8") as fh:
        return BenchmarkReport.from_dict(json.load(fh))


# --------------------------------------------------------------------- verification


@dataclasses.dataclass(frozen=True)
class VerifyConfig:
    """Semi-synthetic ranking-agreement protocol.

    Every replicate draws fresh covariates, a fresh outcome surface and
    fresh treatments, fits the roster on an estimation set of ``est_size``
    rows with covariate-dependent treatment, and scores the models on
    nested evaluation sets of growing size. The oracle ranking is PEHE on
    the largest evaluation set.
    """

    transform: str = "interaction"
    tau_shift: float = 0.5
    est_size: int = 4000
    eval_sizes: tuple = (1000, 2000, 4000, 8000, 16000, 32000, 64000)
    replicates: int = 50
    roster: tuple = NATIVE_ROSTER
    cvs: tuple = ("none", "dr")
    eval_assignment: str = "logistic"
    e1: float = 0.5
    nuisance_size: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "eval_sizes", tuple(sorted(int(s) for s in self.eval_sizes)))
        object.__setattr__(self, "roster", tuple(self.roster))
        object.__setattr__(self, "cvs", tuple(self.cvs))
        synthetic.Transform.parse(self.transform)
        if len(self.roster) < 2:
            raise ConfigError("ranking agreement needs a roster of at least 2 models")
        if not self.eval_sizes or self.eval_sizes[0] < 2:
            raise ConfigError("eval sizes must be at least 2")
        if self.replicates < 1:
            raise ConfigError("need at least one replicate")
        if self.eval_assignment not in ("rct", "logistic"):
            raise ConfigError("eval_assignment must be 'rct' or 'logistic'")
        for cv in self.cvs:
            qstat.CVKind.parse(cv)

    @classmethod
    def from_mapping(cls, cfg: Mapping) -> "VerifyConfig":
        _check_keys(cls, cfg)
        return cls(**cfg)


@dataclasses.dataclass(frozen=True)
class VerificationReport:
    config: dict
    rows: tuple  # per (replicate, cv, eval_size)
    table: tuple  # averaged per (cv, eval_size)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        rnd = lambda row: {k: (_round(v) if isinstance(v, float) else v) for k, v in row.items()}
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "table": [rnd(r) for r in self.table],
            "rows": [rnd(r) for r in self.rows],
        }

    def table_csv(self) -> str:
        fields = ["cv", "eval_size", "mrr", "precision_at_1", "rank_correlation", "replicates"]
        return _csv_text([self.to_dict()["table"][i] for i in range(len(self.table))], fields)

    def series(self, cv: str, metric: str) -> list[float]:
        cv = qstat.CVKind.parse(cv).value
        return [r[metric] for r in self.table if r["cv"] == cv]


def _verify_replicate(args):
    cfg, rep = args
    seed = _seeding.derive_seed(cfg.seed, "verify", rep)
    n_eval = cfg.eval_sizes[-1]
    n_total = cfg.est_size + cfg.nuisance_size + n_eval
    x = synthetic.hillstrom_like_features(n_total, _seeding.derive_seed(seed, "covariates"))
    scfg = synthetic.SyntheticConfig(cfg.transform, tau_shift=cfg.tau_shift, seed=_seeding.derive_seed(seed, "outcomes"))
    surface = synthetic.fit_surface(x, scfg)
    y0, y1, truth = synthetic.gen_outcomes(x, scfg, surface)
    t_logit, p_logit = synthetic.gen_treatment(x, _seeding.derive_seed(seed, "assign"), config=scfg)

    perm = _seeding.rng(seed, "partition").permutation(n_total)
    est_idx = perm[: cfg.est_size]
    nuis_idx = perm[cfg.est_size : cfg.est_size + cfg.nuisance_size]
    eval_idx = perm[cfg.est_size + cfg.nuisance_size :]

    est = Dataset(
        x=x[est_idx],
        t=t_logit[est_idx],
        y=np.where(t_logit[est_idx] == 1, y1[est_idx], y0[est_idx]),
        e1=float(np.clip(t_logit[est_idx].mean(), 1e-3, 1 - 1e-3)),
        provenance=Provenance.SYNTHETIC,
        propensity=p_logit[est_idx],
        name="verify/est",
    )
    if cfg.eval_assignment == "rct":
        t_rct = (_seeding.rng(seed, "rct-assign").random(n_total) < cfg.e1).astype(np.int8)
        t_ev, p_ev = t_rct, np.full(n_total, cfg.e1)
    else:
        t_ev, p_ev = t_logit, p_logit
    y_ev = np.where(t_ev == 1, y1, y0)

    def part(idx, name):
        return Dataset(
            x=x[idx],
            t=t_ev[idx],
            y=y_ev[idx],
            e1=float(p_ev[idx].mean()),
            provenance=Provenance.SYNTHETIC,
            propensity=p_ev[idx],
            name=name,
        )

    nuis_part = part(nuis_idx, "verify/nuisance")
    eval_pool = part(eval_idx, "verify/eval")
    try:
        outcome_models = learners.fit_outcome_models(
            nuis_part, seed=_seeding.derive_seed(seed, "eval-nuisance"), fit_e=False
        )
    except CateqError:
        return []  # too few treated rows to fit evaluation plug-ins; replicate dropped
    eval_nuis = outcome_models.predict(eval_pool.x)

    # models that cannot be fitted on this replicate's estimation set drop out of its ranking
    preds = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            est_nuis = learners.fit_nuisances(est, seed=_seeding.derive_seed(seed, "est-nuisance"))
        except CateqError:
            est_nuis = None
        for name in cfg.roster:
            strategy = learners.Strategy.parse(name)
            if strategy in learners.NUISANCE_STRATEGIES and est_nuis is None:
                continue
            try:
                est_model = learners.fit_cate(strategy, est, est_nuis, seed=_seeding.derive_seed(seed, "fit"))
            except (CateqError, np.linalg.LinAlgError):
                continue
            preds[strategy.short] = est_model.predict(eval_pool.x)
    if len(preds) < 2:
        return []
    tau_eval = truth.tau[eval_idx]
    pehe = {m: synthetic.oracle_pehe(p, tau_eval) for m, p in preds.items()}

    rows = []
    for cv_name in cfg.cvs:
        cv = qstat.ControlVariate.parse(cv_name)
        for size in cfg.eval_sizes:
            sub = eval_pool.take(np.arange(size))
            nuis = learners.NuisanceSet(
                eval_nuis.mu0[:size], eval_nuis.mu1[:size], eval_nuis.m[:size], np.asarray(sub.propensity)
            )
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                q = {m: qstat.qhat(p[:size], sub, propensity=sub.propensity, cv=cv, nuisances=nuis).q_hat for m, p in preds.items()}
            agreement = synthetic.oracle_rank_agreement(q, pehe)
            rows.append(
                {"replicate": rep, "cv": cv.kind.value, "eval_size": size, "n_models": len(preds), **agreement}
            )
    return rows


def run_verification(cfg: VerifyConfig, jobs: int | None = 1) -> VerificationReport:
    tasks = [(cfg, rep) for rep in range(cfg.replicates)]
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1:
        per_rep = [_verify_replicate(t) for t in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            per_rep = list(pool.map(_verify_replicate, tasks))
    rows = tuple(r for rs in per_rep for r in rs)
    table = []
    for cv_name in cfg.cvs:
        cv = qstat.CVKind.parse(cv_name).value
        for size in cfg.eval_sizes:
            sel = [r for r in rows if r["cv"] == cv and r["eval_size"] == size]
            table.append(
                {
                    "cv": cv,
                    "eval_size": size,
                    "mrr": float(np.mean([r["mrr"] for r in sel])),
                    "precision_at_1": float(np.mean([r["precision_at_1"] for r in sel])),
                    "rank_correlation": float(np.nanmean([r["rank_correlation"] for r in sel])),
                    "replicates": len(sel),
                }
            )
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}
    return VerificationReport(config, rows, tuple(table))


def trend_statistic(sizes: Sequence[int], values: Sequence[float]) -> float:
    """Spearman correlation of a metric against log evaluation size."""
    return float(stats.spearmanr(np.log(np.asarray(sizes, float)), np.asarray(values, float))[0])
