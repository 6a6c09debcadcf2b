"""Datasets, CSV ingestion and covariate preprocessing.

A :class:`Dataset` is an immutable bundle of preprocessed features ``x``
(N x D, every column in [0, 1]), binary treatments ``t`` and real outcomes
``y``, together with the RCT treatment probability ``e1`` and enough lineage
to trace every row back to the file it came from.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import math
import sys
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from . import _seeding
from .errors import AlignmentError, ConfigError, DataError, SchemaError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "Provenance",
    "Sample",
    "Dataset",
    "SchemaConfig",
    "FeatureMap",
    "PredictionTable",
    "fit_feature_map",
    "preprocess",
    "read_raw_table",
    "load_csv",
    "split",
    "import_predictions",
    "write_predictions",
    "save_dataset",
    "load_dataset",
]

MAX_DIM = 100
TREATMENT_COL = "t"
OUTCOME_COL = "y"


class Provenance(str, enum.Enum):
    RCT = "rct"
    OBSERVATIONAL = "observational-sampled"
    SYNTHETIC = "synthetic"


class Sample(NamedTuple):
    x: np.ndarray
    t: int
    y: float


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of ``(x, t, y)`` samples.

    ``propensity`` holds the true per-row assignment probability when it is
    known by construction (synthetic treatments, observational sampling);
    ``row_ids`` index rows of the root dataset this one was cut from.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    e1: float
    provenance: Provenance = Provenance.RCT
    seed_lineage: tuple = ()
    row_ids: np.ndarray | None = None
    propensity: np.ndarray | None = None
    feature_names: tuple | None = None
    name: str = "dataset"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise DataError("features must be a 2-D array")
        n, d = x.shape
        if d > MAX_DIM:
            raise DataError(f"feature dimension {d} exceeds {MAX_DIM}")
        t = np.asarray(self.t)
        if t.shape != (n,):
            raise AlignmentError(f"treatment vector has shape {t.shape}, expected ({n},)")
        if not np.isin(t, (0, 1)).all():
            raise DataError("treatment values must be 0 or 1")
        y = np.asarray(self.y, dtype=float)
        if y.shape != (n,):
            raise AlignmentError(f"outcome vector has shape {y.shape}, expected ({n},)")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise DataError("features and outcomes must be finite")
        e1 = float(self.e1)
        if not 0.0 < e1 < 1.0:
            raise DataError(f"treatment probability e1={e1:g} violates overlap (0 < e1 < 1)")
        prov = Provenance(self.provenance)
        if prov is Provenance.RCT and n > 0:
            se = math.sqrt(e1 * (1 - e1) / n)
            frac = float(t.mean())
            if abs(frac - e1) > 5 * se:
                raise DataError(
                    f"empirical treated fraction {frac:.4f} is more than 5 standard "
                    f"errors from e1={e1:.4f}; not consistent with an RCT"
                )
        row_ids = np.arange(n) if self.row_ids is None else np.asarray(self.row_ids)
        if row_ids.shape != (n,):
            raise AlignmentError("row_ids must have one entry per sample")
        set_ = object.__setattr__
        set_(self, "x", _frozen(x, float))
        set_(self, "t", _frozen(t, np.int8))
        set_(self, "y", _frozen(y, float))
        set_(self, "e1", e1)
        set_(self, "provenance", prov)
        set_(self, "seed_lineage", tuple(int(s) for s in self.seed_lineage))
        set_(self, "row_ids", _frozen(row_ids, np.int64))
        if self.propensity is not None:
            p = np.asarray(self.propensity, dtype=float)
            if p.shape != (n,):
                raise AlignmentError("propensity must have one entry per sample")
            if not ((p > 0) & (p < 1)).all():
                raise DataError("true propensities must lie strictly inside (0, 1)")
            set_(self, "propensity", _frozen(p, float))
        if self.feature_names is None:
            set_(self, "feature_names", tuple(f"x{j}" for j in range(d)))
        elif len(self.feature_names) != d:
            raise AlignmentError("feature_names length does not match feature dimension")
        else:
            set_(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.t[i]), float(self.y[i]))

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def e0(self) -> float:
        return 1.0 - self.e1

    @property
    def fingerprint(self) -> str:
        """Content hash of ``(x, t, y)``; equal data gives equal fingerprints."""
        h = hashlib.sha1()
        for a in (self.x, self.t, self.y):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr(self.x.shape).encode())
        return h.hexdigest()[:16]

    def take(self, index, **changes) -> "Dataset":
        """Subset of rows; metadata is inherited unless overridden."""
        index = np.asarray(index)
        fields = dict(
            x=self.x[index],
            t=self.t[index],
            y=self.y[index],
            row_ids=self.row_ids[index],
            propensity=None if self.propensity is None else self.propensity[index],
        )
        fields.update(changes)
        return dataclasses.replace(self, **fields)

    def replace(self, **changes) -> "Dataset":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------- schema


@dataclasses.dataclass(frozen=True)
class SchemaConfig:
    """Where the covariates, treatment and outcome live in a raw CSV.

    ``covariates`` maps column name to ``"categorical"`` or ``"numeric"``.
    With ``preprocess=False`` the covariates are taken as already-prepared
    features and used verbatim.
    """

    covariates: Mapping[str, str]
    treatment: str
    outcome: str
    e1: float | None = None
    preprocess: bool = True
    cap: int = MAX_DIM
    seed: int = 0

    def __post_init__(self):
        if not self.covariates:
            raise ConfigError("schema needs at least one covariate column")
        bad = {k: v for k, v in self.covariates.items() if v not in ("categorical", "numeric")}
        if bad:
            raise ConfigError(f"covariate kinds must be 'categorical' or 'numeric': {bad}")
        if self.treatment == self.outcome:
            raise ConfigError("treatment and outcome columns must differ")
        clash = {self.treatment, self.outcome} & set(self.covariates)
        if clash:
            raise ConfigError(f"columns used both as covariate and treatment/outcome: {sorted(clash)}")
        if self.e1 is not None and not 0 < self.e1 < 1:
            raise ConfigError(f"declared e1={self.e1} must lie in (0, 1)")
        object.__setattr__(self, "covariates", dict(self.covariates))

    @property
    def categorical(self) -> list[str]:
        return [c for c, kind in self.covariates.items() if kind == "categorical"]

    @property
    def numeric(self) -> list[str]:
        return [c for c, kind in self.covariates.items() if kind == "numeric"]

    @classmethod
    def from_mapping(cls, cfg: Mapping) -> "SchemaConfig":
        allowed = {f.name for f in dataclasses.fields(cls)}
        unknown = set(cfg) - allowed
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        missing = {"covariates", "treatment", "outcome"} - set(cfg)
        if missing:
            raise ConfigError(f"schema is missing keys: {sorted(missing)}")
        return cls(**cfg)

    @classmethod
    def from_file(cls, path) -> "SchemaConfig":
        with open(path, "rb") as fh:
            try:
                cfg = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_mapping(cfg)

    def to_toml(self) -> str:
        lines = [f'treatment = "{self.treatment}"', f'outcome = "{self.outcome}"']
        if self.e1 is not None:
            lines.append(f"e1 = {self.e1!r}")
        lines += [
            f"preprocess = {'true' if self.preprocess else 'false'}",
            f"cap = {self.cap}",
            f"seed = {self.seed}",
            "",
            "[covariates]",
        ]
        lines += [f'"{name}" = "{kind}"' for name, kind in self.covariates.items()]
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------- preprocessing


@dataclasses.dataclass(frozen=True, eq=False)
class FeatureMap:
    """Fitted covariate transform: min-max scaling, one-hot, column cap.

    Scalers come from the table the map was fitted on; rows transformed later
    are clipped into [0, 1] and unseen categories encode as all zeros.
    """

    numeric: tuple
    minima: tuple
    maxima: tuple
    categorical: tuple
    levels: tuple  # tuple of tuples, one per categorical column
    order: tuple  # input column order used when stacking
    selected: tuple  # indices into the stacked columns, ascending
    names: tuple

    @property
    def n_features(self) -> int:
        return len(self.selected)

    def transform(self, raw: pd.DataFrame) -> np.ndarray:
        missing = [c for c in self.order if c not in raw.columns]
        if missing:
            raise SchemaError(f"covariate columns missing from table: {missing}")
        blocks = []
        num_idx = {c: i for i, c in enumerate(self.numeric)}
        cat_idx = {c: i for i, c in enumerate(self.categorical)}
        for col in self.order:
            if col in num_idx:
                i = num_idx[col]
                v = pd.to_numeric(raw[col], errors="coerce").to_numpy(dtype=float)
                if not np.isfinite(v).all():
                    raise DataError(f"numeric column {col!r} has unparseable or missing values")
                lo, hi = self.minima[i], self.maxima[i]
                if hi > lo:
                    blocks.append(np.clip((v - lo) / (hi - lo), 0.0, 1.0)[:, None])
                else:
                    blocks.append(np.zeros((len(v), 1)))
            else:
                lv = self.levels[cat_idx[col]]
                v = raw[col].astype(str).to_numpy()
                blocks.append((v[:, None] == np.asarray(lv, dtype=object)[None, :]).astype(float))
        stacked = np.hstack(blocks) if blocks else np.zeros((len(raw), 0))
        return stacked[:, list(self.selected)]


def _infer_categorical(raw: pd.DataFrame) -> list[str]:
    return [
        c
        for c in raw.columns
        if raw[c].dtype == object or str(raw[c].dtype) in ("category", "bool", "string")
    ]


def fit_feature_map(
    raw: pd.DataFrame,
    categorical: Sequence[str] | None = None,
    cap: int = MAX_DIM,
    seed: int = 0,
) -> FeatureMap:
    if raw.shape[1] == 0:
        raise DataError("need at least one covariate column")
    if cap < 1:
        raise ConfigError("feature cap must be positive")
    categorical = list(_infer_categorical(raw) if categorical is None else categorical)
    numeric, minima, maxima, levels, names = [], [], [], [], []
    for col in raw.columns:
        if col in categorical:
            lv = tuple(sorted(set(raw[col].astype(str))))
            levels.append(lv)
            names += [f"{col}={level}" for level in lv]
        else:
            v = pd.to_numeric(raw[col], errors="coerce").to_numpy(dtype=float)
            if not np.isfinite(v).all():
                raise DataError(f"numeric column {col!r} has unparseable or missing values")
            numeric.append(col)
            minima.append(float(v.min()))
            maxima.append(float(v.max()))
            names.append(str(col))
    total = len(names)
    if total > cap:
        gen = _seeding.rng(seed, "feature-cap")
        selected = tuple(int(i) for i in np.sort(gen.choice(total, size=cap, replace=False)))
    else:
        selected = tuple(range(total))
    return FeatureMap(
        numeric=tuple(numeric),
        minima=tuple(minima),
        maxima=tuple(maxima),
        categorical=tuple(c for c in raw.columns if c in categorical),
        levels=tuple(levels),
        order=tuple(raw.columns),
        selected=selected,
        names=tuple(names[i] for i in selected),
    )


def preprocess(
    raw: pd.DataFrame,
    cap: int = MAX_DIM,
    seed: int = 0,
    categorical: Sequence[str] | None = None,
) -> np.ndarray:
    """One-hot categoricals, min-max scale numerics, stack, keep at most ``cap``.

    Object, string, bool and category columns are treated as categorical
    unless ``categorical`` names them explicitly. Constant numeric columns
    scale to zeros.
    """
    return fit_feature_map(raw, categorical=categorical, cap=cap, seed=seed).transform(raw)


# ------------------------------------------------------------------------- loading


def read_raw_table(path, schema: SchemaConfig) -> tuple[pd.DataFrame, np.ndarray, np.ndarray]:
    """Read a CSV and return ``(covariates, t, y)`` checked against ``schema``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        df = pd.read_csv(
            path,
            dtype={c: str for c in schema.categorical},
            encoding="utf-8",
            float_precision="round_trip",
        )
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    if len(df) == 0:
        raise DataError(f"{path} has a header but no rows")
    needed = list(schema.covariates) + [schema.treatment, schema.outcome]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: columns named in schema are missing: {missing}")
    if df[needed].isna().any().any():
        bad = [c for c in needed if df[c].isna().any()]
        raise DataError(f"{path}: missing cells in columns {bad}")
    t = pd.to_numeric(df[schema.treatment], errors="coerce").to_numpy(dtype=float)
    if not np.isin(t, (0.0, 1.0)).all():
        raw_bad = df[schema.treatment][~np.isin(t, (0.0, 1.0))].iloc[0]
        raise DataError(f"{path}: treatment value {raw_bad!r} is not 0 or 1")
    y = pd.to_numeric(df[schema.outcome], errors="coerce").to_numpy(dtype=float)
    if not np.isfinite(y).all():
        raise DataError(f"{path}: outcome column {schema.outcome!r} has non-numeric values")
    return df[list(schema.covariates)], t.astype(np.int8), y


def load_csv(path, schema: SchemaConfig, feature_map: FeatureMap | None = None) -> Dataset:
    """Load an RCT CSV into a :class:`Dataset`.

    The declared ``schema.e1`` wins over the empirical treated fraction.
    Covariates are preprocessed with ``feature_map`` if given, otherwise with
    a map fitted on this file.
    """
    raw, t, y = read_raw_table(path, schema)
    if not schema.preprocess:
        x = raw.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
        if not np.isfinite(x).all():
            raise DataError(f"{path}: prepared features must be numeric")
        names = tuple(raw.columns)
    else:
        fmap = feature_map or fit_feature_map(
            raw, categorical=schema.categorical, cap=schema.cap, seed=schema.seed
        )
        x = fmap.transform(raw)
        names = fmap.names
    e1 = schema.e1 if schema.e1 is not None else float(t.mean())
    return Dataset(
        x=x,
        t=t,
        y=y,
        e1=e1,
        provenance=Provenance.RCT,
        feature_names=names,
        name=Path(path).stem,
    )


def split(dataset: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Random disjoint partition into ``(train, eval)``.

    The eval part has ``round(eval_fraction * N)`` rows; both parts keep the
    parent's ``e1`` and provenance and preserve row order.
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ConfigError(f"eval fraction must lie in (0, 1), got {eval_fraction}")
    n = len(dataset)
    n_eval = int(math.floor(eval_fraction * n + 0.5))
    if n_eval == 0 or n_eval == n:
        raise ConfigError(f"eval fraction {eval_fraction} leaves an empty part for N={n}")
    perm = _seeding.rng(seed, "split").permutation(n)
    eval_idx = np.sort(perm[:n_eval])
    train_idx = np.sort(perm[n_eval:])
    lineage = dataset.seed_lineage + (int(seed),)
    return (
        dataset.take(train_idx, seed_lineage=lineage, name=f"{dataset.name}/train"),
        dataset.take(eval_idx, seed_lineage=lineage, name=f"{dataset.name}/eval"),
    )


# ---------------------------------------------------------------------- predictions


@dataclasses.dataclass(frozen=True, eq=False)
class PredictionTable:
    model_id: str
    tau_hat: np.ndarray
    dataset_fingerprint: str | None = None

    def __post_init__(self):
        tau = np.asarray(self.tau_hat, dtype=float)
        if tau.ndim != 1:
            raise DataError("predictions must be a vector")
        if not np.isfinite(tau).all():
            raise DataError("predictions must be finite")
        object.__setattr__(self, "tau_hat", _frozen(tau, float))

    def __len__(self) -> int:
        return len(self.tau_hat)


def import_predictions(path, dataset: Dataset | int, model_id: str | None = None) -> PredictionTable:
    """Read a ``row_index,tau_hat`` CSV aligned to ``dataset``.

    ``row_index`` is the position of the row in the dataset; every position
    must appear exactly once. ``dataset`` may also be a bare row count.
    """
    path = Path(path)
    n = dataset if isinstance(dataset, int) else len(dataset)
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    if list(df.columns[:2]) != ["row_index", "tau_hat"]:
        raise SchemaError(f"{path}: expected columns row_index,tau_hat; got {list(df.columns)}")
    if len(df) != n:
        raise AlignmentError(f"{path}: {len(df)} prediction rows for a dataset of {n} rows")
    tau = pd.to_numeric(df["tau_hat"], errors="coerce").to_numpy(dtype=float)
    if not np.isfinite(tau).all():
        raise DataError(f"{path}: non-finite prediction value")
    idx = pd.to_numeric(df["row_index"], errors="coerce").to_numpy()
    if not np.array_equal(np.sort(idx), np.arange(n)):
        raise AlignmentError(f"{path}: row_index must be a permutation of 0..{n - 1}")
    out = np.empty(n)
    out[idx.astype(int)] = tau
    fp = None if isinstance(dataset, int) else dataset.fingerprint
    return PredictionTable(model_id or path.stem, out, fp)


def write_predictions(path, tau_hat) -> None:
    tau = np.asarray(tau_hat, dtype=float)
    pd.DataFrame({"row_index": np.arange(len(tau)), "tau_hat": tau}).to_csv(path, index=False)


# ----------------------------------------------------------------- staging format


def _sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def save_dataset(dataset: Dataset, path, extra: Mapping | None = None) -> Path:
    """Write prepared features, ``t`` and ``y`` as CSV plus a JSON sidecar.

    The sidecar records e1, provenance, seed lineage, root row ids and (when
    known) the true propensities, so :func:`load_dataset` restores the
    dataset exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(dataset.x, columns=list(dataset.feature_names))
    df[TREATMENT_COL] = dataset.t.astype(int)
    df[OUTCOME_COL] = dataset.y
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    meta = {
        "name": dataset.name,
        "e1": dataset.e1,
        "provenance": dataset.provenance.value,
        "seed_lineage": list(dataset.seed_lineage),
        "feature_names": list(dataset.feature_names),
        "row_ids": dataset.row_ids.tolist(),
        "propensity": None if dataset.propensity is None else dataset.propensity.tolist(),
    }
    if extra:
        meta["extra"] = dict(extra)
    with open(_sidecar(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    return path


def load_dataset(path, e1: float | None = None) -> Dataset:
    """Read a dataset written by :func:`save_dataset`.

    Without a sidecar the CSV must still use the ``t``/``y`` column
    convention; ``e1`` then defaults to the empirical treated fraction.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    for col in (TREATMENT_COL, OUTCOME_COL):
        if col not in df.columns:
            raise SchemaError(f"{path}: missing column {col!r}")
    meta = {}
    if _sidecar(path).exists():
        with open(_sidecar(path), encoding="utf-8") as fh:
            meta = json.load(fh)
    feats = [c for c in df.columns if c not in (TREATMENT_COL, OUTCOME_COL)]
    t = df[TREATMENT_COL].to_numpy()
    if e1 is None:
        e1 = meta.get("e1", float(np.mean(t)))
    return Dataset(
        x=df[feats].to_numpy(dtype=float),
        t=t,
        y=df[OUTCOME_COL].to_numpy(dtype=float),
        e1=e1,
        provenance=meta.get("provenance", Provenance.RCT),
        seed_lineage=tuple(meta.get("seed_lineage", ())),
        row_ids=meta.get("row_ids"),
        propensity=meta.get("propensity"),
        feature_names=tuple(feats),
        name=meta.get("name", path.stem),
    )
