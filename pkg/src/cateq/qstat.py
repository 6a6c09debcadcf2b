"""The Q statistic: an MSE-ranking criterion for CATE estimators on RCT data.

For an estimator ``tau_hat`` the population quantity

    Q(tau_hat) = E[tau_hat(X)^2] - 2 E[tau_hat(X) tau(X)]

differs from the PEHE (mean squared error against the true effect) only by
the estimator-independent constant ``E[tau(X)^2]``, so ranking by Q is
ranking by MSE. Its sample version averages

    q_n = tau_hat(x_n)^2 - 2 tau_hat(x_n) eta_n,

where ``eta`` is the Horvitz-Thompson transformed outcome, and needs no
counterfactuals. With a known propensity the sample mean is unbiased.

Adding ``theta * r_n`` for any zero-mean control variate ``r`` keeps the
mean and can shrink the variance; the location-invariance, doubly robust
and R-style variates are provided, and custom ones may be plugged in after
passing :func:`zero_mean_gate`.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
import warnings
from typing import Callable

import numpy as np
from scipy import stats

from ._formulas import check_propensity, dr_gamma, ht_transform, q_sample
from .data import Dataset
from .errors import AlignmentError, ConfigError, ControlVariateGateError, DataError
from .learners import NuisanceSet, PropensityModel, fit_propensity

__all__ = [
    "ht_transform",
    "q_sample",
    "CVKind",
    "ControlVariate",
    "Screening",
    "QResult",
    "DensityRatio",
    "resolve_propensity",
    "control_variate_value",
    "optimal_theta",
    "qhat",
    "screen",
    "approximate_mse",
    "ipw_qhat",
    "estimate_density_ratio",
    "zero_mean_gate",
]

Z95 = float(stats.norm.ppf(0.975))


class CVKind(str, enum.Enum):
    NONE = "none"
    LOCATION_INVARIANCE = "location_invariance"
    DOUBLY_ROBUST = "doubly_robust"
    R_STYLE = "r_style"
    CUSTOM = "custom"

    @classmethod
    def parse(cls, name) -> "CVKind":
        if isinstance(name, cls):
            return name
        aliases = {"li": cls.LOCATION_INVARIANCE, "dr": cls.DOUBLY_ROBUST, "r": cls.R_STYLE}
        try:
            return aliases.get(name) or cls(name)
        except ValueError:
            raise ConfigError(
                f"unknown control variate {name!r}; choose from none, li, dr, r, custom"
            ) from None


OPTIMAL = "optimal"


@dataclasses.dataclass(frozen=True)
class ControlVariate:
    """Which control variate to add and how to weight it.

    ``theta`` is a fixed multiplier or ``"optimal"`` for the plug-in
    variance-minimizing weight. When left as ``None`` it defaults to 1 for
    the doubly robust and R-style variates (where the loss identities hold)
    and to ``"optimal"`` for location-invariance and custom variates.

    A custom ``fn`` is called as ``fn(x, t, y, tau_hat, e)`` and must return
    one value per sample with expectation zero.
    """

    kind: CVKind = CVKind.NONE
    theta: float | str | None = None
    fn: Callable | None = None

    def __post_init__(self):
        kind = CVKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is CVKind.CUSTOM and self.fn is None:
            raise ConfigError("custom control variate needs a function")
        theta = self.theta
        if theta is None:
            theta = 1.0 if kind in (CVKind.DOUBLY_ROBUST, CVKind.R_STYLE, CVKind.NONE) else OPTIMAL
        if theta != OPTIMAL:
            theta = float(theta)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def parse(cls, spec) -> "ControlVariate":
        if isinstance(spec, ControlVariate):
            return spec
        return cls(CVKind.parse(spec or "none"))


class Screening(str, enum.Enum):
    USEFUL = "useful"
    DEGENERATE = "degenerate"
    NO_HETEROGENEITY_GAIN = "no_heterogeneity_gain"
    UNSCREENED = "unscreened"


@dataclasses.dataclass(frozen=True)
class QResult:
    q_hat: float
    variance: float  # of q_hat itself, i.e. per-sample variance / N
    ci_lo: float
    ci_hi: float
    n: int
    cv: str = CVKind.NONE.value
    theta: float = 0.0
    screening: Screening = Screening.UNSCREENED
    dataset_id: str | None = dataclasses.field(default=None, compare=False)

    @property
    def se(self) -> float:
        return math.sqrt(self.variance)

    @property
    def ci(self) -> tuple[float, float]:
        return self.ci_lo, self.ci_hi

    def to_dict(self) -> dict:
        return {
            "q_hat": self.q_hat,
            "se": self.se,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n": self.n,
            "cv": self.cv,
            "theta": self.theta,
            "screening": Screening(self.screening).value,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "QResult":
        return cls(
            q_hat=float(d["q_hat"]),
            variance=float(d["se"]) ** 2,
            ci_lo=float(d["ci_lo"]),
            ci_hi=float(d["ci_hi"]),
            n=int(d["n"]),
            cv=str(d["cv"]),
            theta=float(d["theta"]),
            screening=Screening(d["screening"]),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class DensityRatio:
    weights: np.ndarray
    source: str = "user_supplied"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or not np.isfinite(w).all() or not (w > 0).all():
            raise DataError("density ratio weights must be finite and strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


# ------------------------------------------------------------------------- helpers


def resolve_propensity(propensity, dataset: Dataset) -> np.ndarray:
    """Per-sample propensities used inside eta.

    ``None`` means the RCT constant ``dataset.e1``; a float is a known
    constant; an array gives known per-sample values; a fitted
    :class:`PropensityModel` is the estimated regime (clipped predictions).
    """
    n = len(dataset)
    if propensity is None:
        e = np.full(n, dataset.e1)
    elif isinstance(propensity, PropensityModel):
        e = propensity.predict(dataset.x)
    elif np.isscalar(propensity):
        e = np.full(n, float(propensity))
    else:
        e = np.asarray(propensity, dtype=float)
        if e.shape != (n,):
            raise AlignmentError(f"propensity vector has shape {e.shape}, expected ({n},)")
    return check_propensity(e)


def _aligned_tau(tau_hat, dataset: Dataset) -> np.ndarray:
    tau = np.asarray(tau_hat, dtype=float)
    if tau.shape != (len(dataset),):
        raise AlignmentError(
            f"tau_hat has shape {tau.shape}; dataset has {len(dataset)} rows"
        )
    if not np.isfinite(tau).all():
        raise DataError("tau_hat must be finite")
    return tau


def control_variate_value(kind, t, e, tau_hat, mu0=None, mu1=None, m=None):
    """Elementwise value of a named control variate.

    ``location_invariance``: ``2 (t/e - (1-t)/(1-e)) tau_hat``
    ``doubly_robust``: ``-2 gamma(t; e, mu0, mu1) tau_hat``
    ``r_style``: ``-4 (1 - 2t) m tau_hat``
    """
    kind = CVKind.parse(kind)
    t = np.asarray(t, dtype=float)
    tau_hat = np.asarray(tau_hat, dtype=float)
    if kind is CVKind.NONE:
        out = np.zeros(np.broadcast(t, tau_hat).shape)
    elif kind is CVKind.LOCATION_INVARIANCE:
        e = check_propensity(e)
        out = 2.0 * (t / e - (1.0 - t) / (1.0 - e)) * tau_hat
    elif kind is CVKind.DOUBLY_ROBUST:
        if mu0 is None or mu1 is None:
            raise ConfigError("doubly robust control variate needs mu0 and mu1 plug-ins")
        out = -2.0 * np.asarray(dr_gamma(t, e, mu0, mu1)) * tau_hat
    elif kind is CVKind.R_STYLE:
        if m is None:
            raise ConfigError("R-style control variate needs the pooled outcome plug-in m")
        out = -4.0 * (1.0 - 2.0 * t) * np.asarray(m, dtype=float) * tau_hat
    else:
        raise ConfigError("custom control variates are evaluated through their own function")
    return float(out) if np.ndim(out) == 0 else out


def optimal_theta(q, r) -> tuple[float, bool]:
    """Plug-in ``-Cov(q, r) / Var(r)``.

    Returns ``(theta, ok)``; ``ok`` is False (and theta 0) when ``r`` has no
    variance.
    """
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    if q.shape != r.shape or q.size < 2:
        raise ConfigError("optimal theta needs two equal-length vectors with at least 2 samples")
    rc = r - r.mean()
    var_r = float(np.dot(rc, rc))
    if var_r <= 1e-300:
        return 0.0, False
    return float(-np.dot(q - q.mean(), rc) / var_r), True


def _weighted_summary(values, weights=None):
    n = len(values)
    if weights is None:
        mean = float(np.mean(values))
        var = float(np.var(values, ddof=1)) / n if n > 1 else 0.0
        return mean, var
    w = np.asarray(weights, dtype=float)
    sw = w.sum()
    mean = float(np.dot(w, values) / sw)
    if n < 2:
        return mean, 0.0
    var = float(np.sum(w * w * (values - mean) ** 2) / sw**2) * n / (n - 1)
    return mean, var


def _result(values, weights, n, cv_name, theta, dataset_id):
    mean, var = _weighted_summary(values, weights)
    half = Z95 * math.sqrt(var)
    return QResult(mean, var, mean - half, mean + half, n, cv_name, float(theta), Screening.UNSCREENED, dataset_id)


def _variate_values(cv: ControlVariate, dataset, tau, e, nuisances):
    kind = cv.kind
    if kind is CVKind.NONE:
        return None
    if kind is CVKind.CUSTOM:
        r = np.asarray(cv.fn(dataset.x, dataset.t, dataset.y, tau, e), dtype=float)
        if r.shape != tau.shape or not np.isfinite(r).all():
            raise DataError("custom control variate must return one finite value per sample")
        return r
    if kind in (CVKind.DOUBLY_ROBUST, CVKind.R_STYLE):
        if nuisances is None:
            raise ConfigError(f"control variate {kind.value} needs fitted nuisances")
        if len(nuisances) != len(tau):
            raise AlignmentError("nuisances are not aligned with the evaluation data")
        if kind is CVKind.R_STYLE and not np.allclose(e, 0.5):
            warnings.warn(
                "the R-style control variate has zero mean only when the propensity is 0.5",
                RuntimeWarning,
                stacklevel=3,
            )
        return control_variate_value(
            kind, dataset.t, e, tau, mu0=nuisances.mu0, mu1=nuisances.mu1, m=nuisances.m
        )
    return control_variate_value(kind, dataset.t, e, tau)


# ----------------------------------------------------------------------- estimators


def qhat(
    tau_hat,
    dataset: Dataset,
    propensity=None,
    cv: ControlVariate | str | None = None,
    nuisances: NuisanceSet | None = None,
    weights=None,
) -> QResult:
    """Sample Q statistic with an optional control variate and weights.

    ``q_hat = sum w_n (q_n + theta r_n) / sum w_n`` (``w = 1`` by default);
    the reported variance is that of the mean, and the interval is the 95%
    normal one.
    """
    tau = _aligned_tau(tau_hat, dataset)
    cv = ControlVariate.parse(cv)
    e = resolve_propensity(propensity, dataset)
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != tau.shape:
            raise AlignmentError("weights must have one entry per sample")
        if not (weights > 0).all():
            raise DataError("weights must be strictly positive")
    q = np.asarray(q_sample(tau, ht_transform(dataset.t, dataset.y, e)), dtype=float)
    r = _variate_values(cv, dataset, tau, e, nuisances)
    theta = 0.0
    values = q
    if r is not None:
        if cv.theta == OPTIMAL:
            theta, _ = optimal_theta(q, r) if len(q) > 1 else (0.0, False)
        else:
            theta = cv.theta
        values = q + theta * r
    return _result(values, weights, len(q), cv.kind.value, theta, dataset.fingerprint)


def screen(result: QResult, baseline: QResult | None = None) -> QResult:
    """Attach the degeneracy / heterogeneity-screening verdict.

    Degenerate when ``q_hat >= 0`` (no better than predicting zero effect);
    otherwise no heterogeneity gain when the constant-effect ``baseline`` is
    at least as good; otherwise useful.
    """
    if baseline is not None:
        if (
            result.dataset_id is not None
            and baseline.dataset_id is not None
            and result.dataset_id != baseline.dataset_id
        ) or result.n != baseline.n:
            raise DataError("result and baseline were computed on different evaluation data")
    if result.q_hat >= 0:
        verdict = Screening.DEGENERATE
    elif baseline is not None and result.q_hat >= baseline.q_hat:
        verdict = Screening.NO_HETEROGENEITY_GAIN
    else:
        verdict = Screening.USEFUL
    return dataclasses.replace(result, screening=verdict)


def approximate_mse(result: QResult, nuisances: NuisanceSet) -> float:
    """``q_hat + mean((mu1 - mu0)^2)``: an MSE estimate on the PEHE scale."""
    if nuisances is None:
        raise ConfigError("approximate MSE needs outcome plug-ins")
    if len(nuisances) != result.n:
        raise AlignmentError("nuisances are not aligned with the evaluation data")
    diff = nuisances.mu1 - nuisances.mu0
    return float(result.q_hat + np.mean(diff * diff))


def ipw_qhat(tau_hat, dataset: Dataset, ratio: DensityRatio, propensity=None) -> QResult:
    """Q on a target covariate distribution from source samples.

    Uses the unnormalized mean ``(1/N) sum zeta_n q_n`` with ``zeta`` the
    target-over-source density ratio.
    """
    tau = _aligned_tau(tau_hat, dataset)
    if not isinstance(ratio, DensityRatio):
        ratio = DensityRatio(ratio)
    if ratio.weights.shape != tau.shape:
        raise AlignmentError("density ratio must have one entry per sample")
    e = resolve_propensity(propensity, dataset)
    q = np.asarray(q_sample(tau, ht_transform(dataset.t, dataset.y, e)), dtype=float)
    return _result(ratio.weights * q, None, len(q), CVKind.NONE.value, 0.0, dataset.fingerprint)


def estimate_density_ratio(
    source,
    target,
    clip: tuple = (0.05, 20.0),
    penalty: float = 1e-3,
) -> DensityRatio:
    """Target/source density ratio at the source points via a logistic classifier.

    ``zeta(x) = p(target|x) / p(source|x) * N_source / N_target``, clipped.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.ndim == 1:
        source = source[:, None]
    if target.ndim == 1:
        target = target[:, None]
    if len(source) == 0 or len(target) == 0:
        raise DataError("both samples must be nonempty")
    if source.shape[1] != target.shape[1]:
        raise AlignmentError(
            f"source has {source.shape[1]} features, target has {target.shape[1]}"
        )
    x = np.vstack([source, target])
    label = np.concatenate([np.zeros(len(source)), np.ones(len(target))])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        clf = fit_propensity(x, label, clip=(1e-12, 1 - 1e-12), penalty=penalty, max_iter=200)
    logit = clf.decision_function(source)
    ratio = np.exp(np.clip(logit, -50, 50)) * len(source) / len(target)
    return DensityRatio(np.clip(ratio, *clip), source="classifier_estimated")


def zero_mean_gate(values) -> tuple[float, float]:
    """Check a pilot sample of control-variate values has mean zero.

    Returns ``(mean, se)``; raises :class:`ControlVariateGateError` when the
    mean is more than 3 standard errors from zero.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ConfigError("zero-mean gate needs at least 2 pilot values")
    mean = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size))
    if abs(mean) > 3 * se and not (se == 0 and mean == 0):
        raise ControlVariateGateError(mean, se)
    return mean, se


def gate_control_variate(cv: ControlVariate, pilot: Dataset, tau_hat, propensity=None):
    """Run :func:`zero_mean_gate` on a custom variate over a pilot dataset."""
    tau = _aligned_tau(tau_hat, pilot)
    e = resolve_propensity(propensity, pilot)
    r = _variate_values(cv, pilot, tau, e, None)
    return zero_mean_gate(r)
