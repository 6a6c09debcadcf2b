"""Semi-synthetic potential outcomes and treatments with known effects.

Outcome surfaces are built from random nonnegative integer weights
(``0..4`` with decreasing probability) applied to one of three feature
transforms, then standardized to zero mean and unit SD over a reference
sample. Because the ground-truth effect is known, the PEHE of any estimator
can be computed and compared with what the Q statistic concludes.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from . import _seeding
from .data import Dataset, Provenance, fit_feature_map
from .errors import AlignmentError, ConfigError

__all__ = [
    "Transform",
    "SyntheticConfig",
    "OutcomeSurface",
    "OracleTruth",
    "fit_surface",
    "gen_outcomes",
    "gen_treatment",
    "make_dataset",
    "simulate_covariates",
    "hillstrom_like_features",
    "oracle_pehe",
    "oracle_rank_agreement",
    "rank_models",
    "write_oracle",
]

BETA_VALUES = (0, 1, 2, 3, 4)
BETA_PROBS = (0.5, 0.2, 0.15, 0.1, 0.05)


class Transform(str, enum.Enum):
    LINEAR = "linear"
    INTERACTION = "interaction"
    SINE = "sine"

    @classmethod
    def parse(cls, name) -> "Transform":
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(
                f"unknown transform {name!r}; choose from {{linear, interaction, sine}}"
            ) from None


@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    transform: Transform = Transform.INTERACTION
    tau_shift: float = 0.0
    noise_sd: float = 1.0
    seed: int = 0
    beta_values: tuple = BETA_VALUES
    beta_probs: tuple = BETA_PROBS
    beta0: tuple | None = None  # force the arm weights instead of drawing them
    beta1: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "transform", Transform.parse(self.transform))
        if self.noise_sd <= 0:
            raise ConfigError("noise SD must be positive")
        if len(self.beta_values) != len(self.beta_probs):
            raise ConfigError("beta values and probabilities differ in length")
        if abs(sum(self.beta_probs) - 1.0) > 1e-12 or min(self.beta_probs) < 0:
            raise ConfigError("beta probabilities must be nonnegative and sum to 1")


def _pairs(x, offset):
    d = x.shape[1]
    return x * x[:, (np.arange(d) + offset) % d]


def _raw_arms(transform: Transform, x, beta0, beta1):
    """Unstandardized arm surfaces; arm 1 of the linear transform is returned as a log."""
    if transform is Transform.LINEAR:
        return x @ beta0, np.exp(x) @ beta1
    z0, z1 = _pairs(x, 1), _pairs(x, 2)
    if transform is Transform.INTERACTION:
        return z0 @ beta0, z1 @ beta1
    return np.cos(z0 @ beta0), np.sin(z1 @ beta1)


@dataclasses.dataclass(frozen=True, eq=False)
class OutcomeSurface:
    """Fixed potential-outcome means ``mu0(x)``, ``mu1(x)`` and effect ``tau(x)``.

    Standardization constants are frozen at fit time so fresh covariate
    draws map onto the same surface. For the linear transform arm 1 is
    ``exp(beta1 . e^x)``; it is evaluated relative to ``log_ref`` so the
    exponent never overflows, which leaves the standardized values unchanged.
    """

    transform: Transform
    beta0: np.ndarray
    beta1: np.ndarray
    mean0: float
    sd0: float
    mean1: float
    sd1: float
    tau_shift: float = 0.0
    log_ref: float = 0.0

    def _arms(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        a0, a1 = _raw_arms(self.transform, x, self.beta0, self.beta1)
        if self.transform is Transform.LINEAR:
            a1 = np.exp(a1 - self.log_ref)
        return a0, a1

    def mu(self, x) -> tuple[np.ndarray, np.ndarray]:
        a0, a1 = self._arms(x)
        mu0 = (a0 - self.mean0) / (self.sd0 if self.sd0 > 0 else 1.0)
        mu1 = (a1 - self.mean1) / (self.sd1 if self.sd1 > 0 else 1.0)
        return mu0, mu1

    def tau(self, x) -> np.ndarray:
        mu0, mu1 = self.mu(x)
        return mu1 - mu0 + self.tau_shift


@dataclasses.dataclass(frozen=True, eq=False)
class OracleTruth:
    mu0: np.ndarray
    mu1: np.ndarray
    tau: np.ndarray
    sd0: float  # arm SDs before standardization; 0 flags a constant arm
    sd1: float
    seed: int
    propensity: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.tau)

    def take(self, index) -> "OracleTruth":
        return dataclasses.replace(
            self,
            mu0=self.mu0[index],
            mu1=self.mu1[index],
            tau=self.tau[index],
            propensity=None if self.propensity is None else self.propensity[index],
        )


def _draw_beta(gen, config, d):
    return gen.choice(np.asarray(config.beta_values, dtype=float), size=d, p=config.beta_probs)


def fit_surface(features, config: SyntheticConfig) -> OutcomeSurface:
    """Draw arm weights and standardize the arms over ``features``.

    A constant arm (SD 0) is only centered, and its SD is recorded as 0.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    d = x.shape[1]
    if config.transform is not Transform.LINEAR and d < 2:
        raise ConfigError(f"the {config.transform.value} transform needs at least 2 features")
    gen = _seeding.rng(config.seed, "beta")
    beta0 = np.asarray(config.beta0, float) if config.beta0 is not None else _draw_beta(gen, config, d)
    beta1 = np.asarray(config.beta1, float) if config.beta1 is not None else _draw_beta(gen, config, d)
    if beta0.shape != (d,) or beta1.shape != (d,):
        raise ConfigError(f"forced beta vectors must have length {d}")
    a0, a1 = _raw_arms(config.transform, x, beta0, beta1)
    log_ref = 0.0
    if config.transform is Transform.LINEAR:
        log_ref = float(a1.max())
        a1 = np.exp(a1 - log_ref)
    sd0, sd1 = float(a0.std()), float(a1.std())
    # SDs this small relative to the level are round-off on a constant arm
    sd0 = sd0 if sd0 > 1e-12 * max(1.0, abs(float(a0.mean()))) else 0.0
    sd1 = sd1 if sd1 > 1e-12 * max(1.0, abs(float(a1.mean()))) else 0.0
    return OutcomeSurface(
        config.transform,
        beta0,
        beta1,
        float(a0.mean()),
        sd0,
        float(a1.mean()),
        sd1,
        float(config.tau_shift),
        log_ref,
    )


def gen_outcomes(features, config: SyntheticConfig, surface: OutcomeSurface | None = None):
    """Potential outcomes ``(y0, y1, truth)`` for each row of ``features``.

    ``y0 = mu0 + N(0, s^2)`` and ``y1 = mu1 + N(0, s^2) + tau_shift`` with
    independent noise. Without an explicit ``surface`` one is fitted on
    ``features`` itself, so the arm means are exactly standardized there.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    surface = surface or fit_surface(x, config)
    mu0, mu1 = surface.mu(x)
    gen = _seeding.rng(config.seed, "noise")
    noise = gen.standard_normal((2, len(x))) * config.noise_sd
    y0 = mu0 + noise[0]
    y1 = mu1 + noise[1] + config.tau_shift
    truth = OracleTruth(mu0, mu1, mu1 - mu0 + config.tau_shift, surface.sd0, surface.sd1, config.seed)
    return y0, y1, truth


def gen_treatment(features, seed: int, beta_t=None, offset: float = 1.0, config: SyntheticConfig | None = None):
    """Treatments with ``Pr(T=1|x) = 1 / (1 + exp(beta_t . x + offset))``.

    Returns ``(t, propensity)``. ``beta_t`` is drawn from the same discrete
    distribution as the outcome weights unless given.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not np.isfinite(x).all():
        raise ConfigError("features must be finite")
    config = config or SyntheticConfig()
    if beta_t is None:
        beta_t = _draw_beta(_seeding.rng(seed, "beta-t"), config, x.shape[1])
    beta_t = np.asarray(beta_t, dtype=float)
    p = 1.0 / (1.0 + np.exp(x @ beta_t + offset))
    t = (_seeding.rng(seed, "treatment").random(len(x)) < p).astype(np.int8)
    return t, p


def make_dataset(
    features,
    config: SyntheticConfig,
    assignment: str = "logistic",
    e1: float = 0.5,
    surface: OutcomeSurface | None = None,
    name: str = "synthetic",
) -> tuple[Dataset, OracleTruth]:
    """A full synthetic dataset and its oracle.

    ``assignment="logistic"`` draws covariate-dependent treatments with
    :func:`gen_treatment`; ``assignment="rct"`` flips a coin with
    probability ``e1``. The true propensity is stored on both outputs.
    """
    x = np.asarray(features, dtype=float)
    y0, y1, truth = gen_outcomes(x, config, surface)
    if assignment == "logistic":
        t, p = gen_treatment(x, _seeding.derive_seed(config.seed, "assign"), config=config)
        e_marg = float(np.clip(p.mean(), 1e-6, 1 - 1e-6))
    elif assignment == "rct":
        if not 0 < e1 < 1:
            raise ConfigError("e1 must lie in (0, 1)")
        t = (_seeding.rng(config.seed, "rct-assign").random(len(x)) < e1).astype(np.int8)
        p = np.full(len(x), float(e1))
        e_marg = float(e1)
    else:
        raise ConfigError(f"assignment must be 'logistic' or 'rct', got {assignment!r}")
    y = np.where(t == 1, y1, y0)
    ds = Dataset(
        x=x,
        t=t,
        y=y,
        e1=e_marg,
        provenance=Provenance.RCT if assignment == "rct" else Provenance.SYNTHETIC,
        seed_lineage=(int(config.seed),),
        propensity=p,
        name=name,
    )
    return ds, dataclasses.replace(truth, propensity=p)


def simulate_covariates(n: int, seed: int) -> pd.DataFrame:
    """Raw covariates shaped like an e-mail marketing RCT customer table.

    Mixed numeric and categorical columns, so the preprocessing path
    (scaling plus one-hot) is exercised before generation.
    """
    gen = _seeding.rng(seed, "covariates")
    recency = gen.integers(1, 13, n)
    history = np.round(np.exp(gen.normal(5.0, 0.9, n)), 2)
    mens = gen.binomial(1, 0.55, n)
    womens = np.where(mens == 1, gen.binomial(1, 0.4, n), 1)
    newbie = gen.binomial(1, 0.5, n)
    zip_code = gen.choice(["Surburban", "Urban", "Rural"], n, p=[0.45, 0.4, 0.15])
    channel = gen.choice(["Web", "Phone", "Multichannel"], n, p=[0.44, 0.44, 0.12])
    return pd.DataFrame(
        {
            "recency": recency,
            "history": history,
            "mens": mens,
            "womens": womens,
            "zip_code": zip_code,
            "newbie": newbie,
            "channel": channel,
        }
    )


def hillstrom_like_features(n: int, seed: int) -> np.ndarray:
    raw = simulate_covariates(n, seed)
    fmap = fit_feature_map(raw, categorical=["zip_code", "channel"], seed=seed)
    return fmap.transform(raw)


# ------------------------------------------------------------------------- oracles


def oracle_pehe(tau_hat, truth: OracleTruth | np.ndarray) -> float:
    """Mean squared error of ``tau_hat`` against the true effect."""
    tau = truth.tau if isinstance(truth, OracleTruth) else np.asarray(truth, dtype=float)
    tau_hat = np.asarray(tau_hat, dtype=float)
    if tau_hat.shape != tau.shape:
        raise AlignmentError(f"tau_hat has shape {tau_hat.shape}; truth has {tau.shape}")
    diff = tau - tau_hat
    return float(np.mean(diff * diff))


def rank_models(scores: Mapping[str, float]) -> list[str]:
    """Model ids ordered best (lowest score) first; ties by id."""
    return sorted(scores, key=lambda k: (scores[k], k))


def oracle_rank_agreement(q_scores: Mapping[str, float], pehe_scores: Mapping[str, float]) -> dict:
    """How well the Q ordering of models reproduces the oracle PEHE ordering.

    ``mrr`` is the reciprocal of the Q-rank of the oracle-best model,
    ``precision_at_1`` whether both pick the same best model, and
    ``rank_correlation`` Spearman's coefficient over all models.
    """
    if set(q_scores) != set(pehe_scores):
        raise ConfigError("Q and PEHE rankings cover different model sets")
    if len(q_scores) < 2:
        raise ConfigError("ranking agreement needs at least 2 models")
    q_order = rank_models(q_scores)
    p_order = rank_models(pehe_scores)
    best = p_order[0]
    q_rank = {m: i + 1 for i, m in enumerate(q_order)}
    p_rank = {m: i + 1 for i, m in enumerate(p_order)}
    models = sorted(q_scores)
    rho = stats.spearmanr([q_rank[m] for m in models], [p_rank[m] for m in models])[0]
    return {
        "mrr": 1.0 / q_rank[best],
        "precision_at_1": float(q_order[0] == best),
        "rank_correlation": float(rho),
    }


def write_oracle(truth: OracleTruth, path) -> None:
    """Sidecar CSV ``row_index, mu0, mu1, tau, true_propensity``."""
    n = len(truth)
    prop = truth.propensity if truth.propensity is not None else np.full(n, np.nan)
    pd.DataFrame(
        {
            "row_index": np.arange(n),
            "mu0": truth.mu0,
            "mu1": truth.mu1,
            "tau": truth.tau,
            "true_propensity": prop,
        }
    ).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_oracle(path) -> OracleTruth:
    df = pd.read_csv(path, float_precision="round_trip")
    prop = df["true_propensity"].to_numpy(dtype=float)
    return OracleTruth(
        df["mu0"].to_numpy(float),
        df["mu1"].to_numpy(float),
        df["tau"].to_numpy(float),
        sd0=float("nan"),
        sd1=float("nan"),
        seed=-1,
        propensity=None if np.isnan(prop).all() else prop,
    )


def tau_for(truth: OracleTruth, rows: Sequence[int]) -> np.ndarray:
    return truth.tau[np.asarray(rows)]
