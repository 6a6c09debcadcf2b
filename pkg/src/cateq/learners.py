"""Nuisance learners and baseline CATE strategies.

Everything here is linear: closed-form ridge regression with K-fold choice
of the penalty, and L2-regularized logistic regression fitted by IRLS for
propensities. The CATE strategies cover the three families the evaluation
is meant to compare (outcome prediction, residual-on-residual, inverse
propensity weighting) plus the constant-effect and zero baselines.
"""

from __future__ import annotations

import dataclasses
import enum
import warnings
from typing import Sequence

import numpy as np
import scipy.linalg

from . import _seeding
from ._formulas import dr_gamma, ht_transform
from .data import Dataset, PredictionTable, Provenance
from .errors import (
    AlignmentError,
    ConfigError,
    DataError,
    DegenerateDesignError,
    FitError,
)

__all__ = [
    "DEFAULT_LAMBDAS",
    "LinearModel",
    "PropensityModel",
    "OutcomeModels",
    "NuisanceSet",
    "Strategy",
    "CateEstimator",
    "fit_ridge",
    "fit_ridge_cv",
    "fit_propensity",
    "fit_outcome_models",
    "fit_nuisances",
    "fit_cate",
    "predict_cate",
    "r_loss",
    "dr_loss",
    "dr_pseudo_outcome",
]

DEFAULT_LAMBDAS = np.logspace(-3, 3, 13)
PROPENSITY_CLIP = (0.05, 0.95)


# --------------------------------------------------------------------------- ridge


@dataclasses.dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    intercept: float
    penalty: float
    cv_errors: np.ndarray | None = None

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != len(self.weights):
            raise AlignmentError(f"model expects {len(self.weights)} features, got {x.shape[1]}")
        return x @ self.weights + self.intercept


def _center(x, y, fit_intercept):
    if fit_intercept:
        xm, ym = x.mean(axis=0), y.mean()
        return x - xm, y - ym, xm, ym
    return x, y, np.zeros(x.shape[1]), 0.0


def _solve_penalized(gram, rhs, lam):
    a = gram + lam * np.eye(gram.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        return scipy.linalg.solve(a, rhs, assume_a="sym")


def fit_ridge(x, y, lam: float, fit_intercept: bool = True) -> LinearModel:
    """Ridge regression at a single penalty, intercept unpenalized.

    Solves ``(Xc'Xc + lam I) w = Xc'yc`` on centered data. Raises
    ``numpy.linalg.LinAlgError`` when the system is singular.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc, yc, xm, ym = _center(x, y, fit_intercept)
    w = _solve_penalized(xc.T @ xc, xc.T @ yc, lam)
    return LinearModel(w, float(ym - xm @ w), float(lam))


def fit_ridge_cv(
    x,
    y,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    folds: int = 5,
    seed: int = 0,
    fit_intercept: bool = True,
) -> LinearModel:
    """Ridge regression with the penalty picked by K-fold squared error.

    Ties in CV error go to the larger penalty. A singular system at
    ``lam = 0`` falls back to the smallest positive penalty in the grid.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    lambdas = np.asarray(sorted(float(v) for v in lambdas))
    if lambdas.size == 0:
        raise ConfigError("lambda grid is empty")
    if (lambdas < 0).any():
        raise ConfigError("ridge penalties must be nonnegative")
    if folds < 2 or n < 2 * folds:
        raise DataError(f"ridge CV with {folds} folds needs at least {2 * folds} rows, got {n}")
    if len(y) != n:
        raise AlignmentError("targets and features differ in length")

    fold_of = _seeding.rng(seed, "ridge-cv").permutation(n) % folds
    sse = np.zeros(lambdas.size)
    for k in range(folds):
        tr, te = fold_of != k, fold_of == k
        xc, yc, xm, ym = _center(x[tr], y[tr], fit_intercept)
        s, v = np.linalg.eigh(xc.T @ xc)
        s = np.clip(s, 0.0, None)
        proj = v.T @ (xc.T @ yc)
        xte = (x[te] - xm) @ v
        for j, lam in enumerate(lambdas):
            denom = s + lam
            if (denom <= 1e-12 * max(1.0, s.max(initial=0.0))).any():
                sse[j] = np.inf
                continue
            pred = xte @ (proj / denom) + ym
            sse[j] += np.sum((y[te] - pred) ** 2)
    errors = sse / n
    # argmin over the reversed grid: ties resolve toward the larger penalty
    best = lambdas.size - 1 - int(np.argmin(errors[::-1]))
    lam = lambdas[best]
    try:
        model = fit_ridge(x, y, lam, fit_intercept)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
        positive = lambdas[lambdas > 0]
        if lam > 0 or positive.size == 0:
            raise FitError("ridge system is singular") from None
        lam = positive[0]
        model = fit_ridge(x, y, lam, fit_intercept)
    return dataclasses.replace(model, cv_errors=errors)


# ---------------------------------------------------------------------- propensity


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclasses.dataclass(frozen=True, eq=False)
class PropensityModel:
    weights: np.ndarray
    intercept: float
    clip: tuple = PROPENSITY_CLIP
    converged: bool = True
    n_iter: int = 0

    def __post_init__(self):
        lo, hi = self.clip
        if not 0 < lo < hi < 1:
            raise ConfigError(f"clip bounds must satisfy 0 < lo < hi < 1, got {self.clip}")

    def decision_function(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != len(self.weights):
            raise AlignmentError(f"model expects {len(self.weights)} features, got {x.shape[1]}")
        return x @ self.weights + self.intercept

    def predict_unclipped(self, x) -> np.ndarray:
        return _sigmoid(self.decision_function(x))

    def predict(self, x) -> np.ndarray:
        return np.clip(self.predict_unclipped(x), *self.clip)


def _penalized_loglik(z, t, beta, pen):
    s = z @ beta
    # log(1 + e^s) computed stably
    ll = np.sum(t * s - np.logaddexp(0.0, s))
    return ll - 0.5 * np.sum(pen * beta * beta)


def fit_propensity(
    x,
    t,
    clip: tuple = PROPENSITY_CLIP,
    penalty: float = 1.0,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> PropensityModel:
    """L2-regularized logistic regression fitted by IRLS (Newton) steps.

    The intercept is not penalized. Step halving keeps the penalized
    log-likelihood monotone; if ``max_iter`` is reached the best iterate is
    returned with ``converged=False`` and a ``RuntimeWarning``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    t = np.asarray(t, dtype=float)
    if len(t) != len(x):
        raise AlignmentError("treatments and features differ in length")
    if not np.isin(t, (0.0, 1.0)).all():
        raise DataError("treatments must be 0 or 1")
    if t.min() == t.max():
        raise FitError("propensity fit needs both treated and control samples")
    n, d = x.shape
    z = np.hstack([np.ones((n, 1)), x])
    pen = np.full(d + 1, float(penalty))
    pen[0] = 0.0
    beta = np.zeros(d + 1)
    frac = t.mean()
    beta[0] = np.log(frac / (1 - frac))
    ll = _penalized_loglik(z, t, beta, pen)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(z @ beta)
        w = np.clip(p * (1 - p), 1e-12, None)
        grad = z.T @ (t - p) - pen * beta
        hess = (z * w[:, None]).T @ z + np.diag(pen) + 1e-12 * np.eye(d + 1)
        try:
            step = scipy.linalg.solve(hess, grad, assume_a="pos")
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        scale = 1.0
        while True:
            cand = beta + scale * step
            ll_new = _penalized_loglik(z, t, cand, pen)
            if ll_new >= ll - 1e-12 * abs(ll) or scale < 1e-8:
                break
            scale *= 0.5
        delta = np.max(np.abs(cand - beta))
        if ll_new >= ll:
            beta, gain, ll = cand, ll_new - ll, ll_new
        else:
            gain = 0.0
        if delta <= tol * (1.0 + np.max(np.abs(beta))) or gain <= tol * (1.0 + abs(ll)) * 1e-3:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"logistic IRLS did not converge in {max_iter} iterations; returning best iterate",
            RuntimeWarning,
            stacklevel=2,
        )
    return PropensityModel(beta[1:].copy(), float(beta[0]), tuple(clip), converged, it)


# ----------------------------------------------------------------------- nuisances


@dataclasses.dataclass(frozen=True, eq=False)
class OutcomeModels:
    """Outcome and propensity models fitted on one training set.

    ``e`` is either a fitted :class:`PropensityModel` or the known constant
    propensity of an RCT.
    """

    mu0: LinearModel
    mu1: LinearModel
    m: LinearModel
    e: PropensityModel | float

    def propensity(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if isinstance(self.e, PropensityModel):
            return self.e.predict(x)
        return np.full(len(x), float(self.e))

    def predict(self, x) -> "NuisanceSet":
        return NuisanceSet(
            mu0=self.mu0.predict(x),
            mu1=self.mu1.predict(x),
            m=self.m.predict(x),
            e=self.propensity(x),
            models=(self,),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class NuisanceSet:
    """Plug-in values aligned to one dataset.

    When produced by :func:`fit_nuisances`, ``folds[i]`` names the fold of
    sample ``i`` and ``models[k]`` was trained on every fold except ``k``.
    """

    mu0: np.ndarray
    mu1: np.ndarray
    m: np.ndarray
    e: np.ndarray
    folds: np.ndarray | None = None
    models: tuple = ()

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, f), dtype=float) for f in ("mu0", "mu1", "m", "e")]
        n = len(arrays[0])
        if any(a.shape != (n,) for a in arrays):
            raise AlignmentError("nuisance vectors must share one length")
        for name, a in zip(("mu0", "mu1", "m", "e"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return len(self.mu0)


def _arm_cv_folds(n: int, wanted: int = 5) -> int:
    k = min(wanted, n // 2)
    if k < 2:
        raise FitError(f"too few samples ({n}) to fit an outcome model")
    return k


def _fit_models(x, t, y, e_const, fit_e, seed, lambdas, cv_folds) -> OutcomeModels:
    treated, control = t == 1, t == 0
    if not treated.any() or not control.any():
        raise FitError("outcome models need both arms present")
    mu0 = fit_ridge_cv(x[control], y[control], lambdas, _arm_cv_folds(control.sum(), cv_folds), seed)
    mu1 = fit_ridge_cv(x[treated], y[treated], lambdas, _arm_cv_folds(treated.sum(), cv_folds), seed)
    m = fit_ridge_cv(x, y, lambdas, _arm_cv_folds(len(y), cv_folds), seed)
    e = fit_propensity(x, t) if fit_e else float(e_const)
    return OutcomeModels(mu0, mu1, m, e)


def fit_outcome_models(
    dataset: Dataset,
    seed: int = 0,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    cv_folds: int = 5,
    fit_e: bool | None = None,
) -> OutcomeModels:
    """Fit mu0, mu1, m and the propensity on all of ``dataset``.

    The propensity is learned unless the data is an RCT, whose design
    probability ``e1`` is known; ``fit_e`` overrides that choice.
    """
    if fit_e is None:
        fit_e = dataset.provenance is not Provenance.RCT
    return _fit_models(dataset.x, dataset.t, dataset.y, dataset.e1, fit_e, seed, lambdas, cv_folds)


def _assign_folds(t, k, seed):
    n = len(t)
    fold_of = _seeding.rng(seed, "crossfit").permutation(n) % k
    if all(np.unique(t[fold_of == j]).size == 2 for j in range(k)):
        return fold_of
    # refold stratified by arm
    gen = _seeding.rng(seed, "crossfit-stratified")
    fold_of = np.empty(n, dtype=int)
    for arm in (0, 1):
        idx = np.flatnonzero(t == arm)
        fold_of[idx[gen.permutation(idx.size)]] = np.arange(idx.size) % k
    if all(np.unique(t[fold_of == j]).size == 2 for j in range(k)):
        return fold_of
    raise FitError(f"cannot place both arms in each of {k} folds")


def fit_nuisances(
    dataset: Dataset,
    folds: int = 2,
    seed: int = 0,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    cv_folds: int = 5,
) -> NuisanceSet:
    """Cross-fitted plug-ins: each row is predicted by models that never saw it."""
    if folds < 2:
        raise ConfigError("cross-fitting needs at least 2 folds")
    t = np.asarray(dataset.t)
    fold_of = _assign_folds(t, folds, seed)
    n = len(dataset)
    out = {k: np.empty(n) for k in ("mu0", "mu1", "m", "e")}
    models = []
    for k in range(folds):
        held = fold_of == k
        fitted = _fit_models(
            dataset.x[~held],
            t[~held],
            dataset.y[~held],
            dataset.e1,
            dataset.provenance is not Provenance.RCT,
            _seeding.derive_seed(seed, "fold", k),
            lambdas,
            cv_folds,
        )
        pred = fitted.predict(dataset.x[held])
        for key in out:
            out[key][held] = getattr(pred, key)
        models.append(fitted)
    return NuisanceSet(folds=fold_of, models=tuple(models), **out)


# ---------------------------------------------------------------------- strategies


class Strategy(str, enum.Enum):
    S = "s_learner"
    S_EXT = "s_learner_ext"
    T = "t_learner"
    R = "r_learner"
    DR = "dr_learner"
    CONST = "constant_effect"
    ZERO = "zero"
    IMPORTED = "imported"

    @classmethod
    def parse(cls, name) -> "Strategy":
        if isinstance(name, cls):
            return name
        aliases = {"s": cls.S, "s_ext": cls.S_EXT, "t": cls.T, "r": cls.R, "dr": cls.DR, "const": cls.CONST}
        try:
            return aliases.get(name) or cls(name)
        except ValueError:
            choices = sorted(set(aliases) | {s.value for s in cls})
            raise ConfigError(f"unknown strategy {name!r}; choose from {choices}") from None

    @property
    def short(self) -> str:
        return {
            Strategy.S: "s",
            Strategy.S_EXT: "s_ext",
            Strategy.T: "t",
            Strategy.R: "r",
            Strategy.DR: "dr",
            Strategy.CONST: "const",
        }.get(self, self.value)


NUISANCE_STRATEGIES = {Strategy.R, Strategy.DR, Strategy.CONST}


@dataclasses.dataclass(frozen=True, eq=False)
class CateEstimator:
    """A fitted effect model ``tau_hat(x) = intercept + x @ coef``.

    Imported estimators carry a fixed prediction vector instead and can only
    be evaluated on the rows they were aligned to.
    """

    strategy: Strategy
    intercept: float = 0.0
    coef: np.ndarray | None = None
    dim: int | None = None
    models: tuple = ()
    values: np.ndarray | None = None
    metadata: dict = dataclasses.field(default_factory=dict)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if self.strategy is Strategy.IMPORTED:
            if len(x) != len(self.values):
                raise AlignmentError(
                    f"imported predictions cover {len(self.values)} rows, got {len(x)}"
                )
            return np.array(self.values, dtype=float)
        if self.dim is not None and x.shape[1] != self.dim:
            raise AlignmentError(f"estimator expects {self.dim} features, got {x.shape[1]}")
        out = np.full(len(x), float(self.intercept))
        if self.coef is not None:
            out += x @ self.coef
        return out


def predict_cate(estimator: CateEstimator, features) -> np.ndarray:
    return estimator.predict(features)


def dr_pseudo_outcome(y, t, e, mu0, mu1) -> np.ndarray:
    return np.asarray(ht_transform(t, y, e) + dr_gamma(t, e, mu0, mu1), dtype=float)


def r_loss(tau_hat, y, t, m, e) -> float:
    """Mean squared residual-on-residual loss."""
    tau_hat, y, t, m, e = (np.asarray(a, dtype=float) for a in (tau_hat, y, t, m, e))
    return float(np.mean(((y - m) - (t - e) * tau_hat) ** 2))


def dr_loss(tau_hat, pseudo_outcome) -> float:
    return float(np.mean((np.asarray(pseudo_outcome) - np.asarray(tau_hat)) ** 2))


def _residual_design(nuisances: NuisanceSet, dataset: Dataset):
    t_res = dataset.t - nuisances.e
    if float(np.sum(t_res * t_res)) == 0.0:
        raise DegenerateDesignError("treatment residuals are identically zero")
    return t_res, dataset.y - nuisances.m


def fit_cate(
    strategy,
    dataset: Dataset,
    nuisances: NuisanceSet | None = None,
    seed: int = 0,
    lambdas: Sequence[float] = DEFAULT_LAMBDAS,
    cv_folds: int = 5,
    predictions: PredictionTable | None = None,
) -> CateEstimator:
    """Fit one CATE strategy on ``dataset``.

    Strategies ``r``, ``dr`` and ``const`` use cross-fitted ``nuisances``,
    fitted here when not supplied.
    """
    strategy = Strategy.parse(strategy)
    n, d = dataset.x.shape
    if n == 0:
        raise DataError("cannot fit on an empty dataset")
    meta = {"seed": int(seed), "dataset": dataset.name}
    x, t, y = dataset.x, dataset.t.astype(float), dataset.y

    if strategy is Strategy.ZERO:
        return CateEstimator(strategy, 0.0, None, d, metadata=meta)
    if strategy is Strategy.IMPORTED:
        if predictions is None or len(predictions) != n:
            raise AlignmentError("imported strategy needs a prediction table aligned to the dataset")
        return CateEstimator(strategy, values=predictions.tau_hat, metadata=meta)

    if strategy in NUISANCE_STRATEGIES:
        if nuisances is None:
            nuisances = fit_nuisances(dataset, seed=seed, lambdas=lambdas, cv_folds=cv_folds)
        if len(nuisances) != n:
            raise AlignmentError("nuisances are not aligned with the dataset")

    if strategy is Strategy.S:
        model = fit_ridge_cv(np.column_stack([x, t]), y, lambdas, cv_folds, seed)
        return CateEstimator(strategy, float(model.weights[d]), None, d, (model,), metadata=meta)
    if strategy is Strategy.S_EXT:
        model = fit_ridge_cv(np.column_stack([x, t, x * t[:, None]]), y, lambdas, cv_folds, seed)
        w = model.weights
        return CateEstimator(strategy, float(w[d]), w[d + 1 :].copy(), d, (model,), metadata=meta)
    if strategy is Strategy.T:
        treated, control = t == 1, t == 0
        if not treated.any() or not control.any():
            raise FitError("t-learner needs both arms")
        m1 = fit_ridge_cv(x[treated], y[treated], lambdas, _arm_cv_folds(treated.sum(), cv_folds), seed)
        m0 = fit_ridge_cv(x[control], y[control], lambdas, _arm_cv_folds(control.sum(), cv_folds), seed)
        return CateEstimator(
            strategy, m1.intercept - m0.intercept, m1.weights - m0.weights, d, (m0, m1), metadata=meta
        )
    if strategy is Strategy.R:
        t_res, y_res = _residual_design(nuisances, dataset)
        design = t_res[:, None] * np.column_stack([np.ones(n), x])
        model = fit_ridge_cv(design, y_res, lambdas, cv_folds, seed, fit_intercept=False)
        w = model.weights
        return CateEstimator(strategy, float(w[0]), w[1:].copy(), d, (model,), metadata=meta)
    if strategy is Strategy.DR:
        pseudo = dr_pseudo_outcome(y, t, nuisances.e, nuisances.mu0, nuisances.mu1)
        model = fit_ridge_cv(x, pseudo, lambdas, cv_folds, seed)
        return CateEstimator(strategy, model.intercept, model.weights.copy(), d, (model,), metadata=meta)
    if strategy is Strategy.CONST:
        t_res, y_res = _residual_design(nuisances, dataset)
        tau_b = float(np.sum(t_res * y_res) / np.sum(t_res * t_res))
        return CateEstimator(strategy, tau_b, None, d, metadata=meta)
    raise ConfigError(f"unhandled strategy {strategy}")  # pragma: no cover
