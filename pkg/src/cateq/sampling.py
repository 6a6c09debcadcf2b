"""Observational sampling: manufacture selection bias by subsampling an RCT.

Each pool row ``(x, t, y)`` is kept with probability ``G(t, x)``. Because
the keep probability depends on both arm and covariates, treatment in the
kept rows depends on ``x`` with the closed-form propensity

    Pr(T=1 | x, kept) = 1 / (1 + (E0/E1) * G(x, 0) / G(x, 1)),

which is recorded on the sampled dataset as ground truth.

``G`` is built from one small random MLP per arm. An affine map on each
arm's logit is calibrated by bisection so that the expected sample size and
treated fraction hit their targets on the pool.
"""

from __future__ import annotations

import dataclasses
import itertools
from typing import Sequence

import numpy as np

from . import _seeding
from .data import Dataset, Provenance
from .errors import CalibrationError, ConfigError, DataError

__all__ = [
    "BiasingConfig",
    "BiasingFn",
    "GridCell",
    "make_biasing_fn",
    "observational_sample",
    "induced_propensity",
    "build_grid",
]

G_BOUNDS = (0.02, 0.98)
SIZE_RTOL = 0.02
FRAC_ATOL = 0.02
BISECTION_STEPS = 60


@dataclasses.dataclass(frozen=True)
class BiasingConfig:
    layers: int
    target_est_size: int
    target_treat_frac: float
    hidden: int = 8
    seed: int = 0
    g_bounds: tuple = G_BOUNDS
    strength: float = 1.0  # SD of each arm's calibrated logit on the pool

    def __post_init__(self):
        if self.layers not in (1, 2, 3):
            raise ConfigError(f"layers must be 1, 2 or 3, got {self.layers}")
        if self.target_est_size < 1:
            raise ConfigError("target estimation size must be positive")
        if not 0 < self.target_treat_frac < 1:
            raise ConfigError("target treated fraction must lie in (0, 1)")
        lo, hi = self.g_bounds
        if not 0 < lo < hi < 1:
            raise ConfigError(f"g_bounds must satisfy 0 < lo < hi < 1, got {self.g_bounds}")
        if self.hidden < 1:
            raise ConfigError("hidden width must be positive")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _mlp(x, layers):
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.tanh(h)
    return h[:, 0]


@dataclasses.dataclass(frozen=True, eq=False)
class BiasingFn:
    """Keep probability ``G(t, x)``.

    ``nets[a]`` is a list of ``(W, b)`` layers for arm ``a``; the arm's
    probability is ``clip(sigmoid(scale[a] * net_a(x) + shift[a]), *g_bounds)``.
    """

    nets: tuple
    scale: tuple = (1.0, 1.0)
    shift: tuple = (0.0, 0.0)
    g_bounds: tuple = G_BOUNDS

    def logit(self, arm: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return self.scale[arm] * _mlp(x, self.nets[arm]) + self.shift[arm]

    def prob(self, arm: int, x) -> np.ndarray:
        return np.clip(_sigmoid(self.logit(arm, x)), *self.g_bounds)

    def __call__(self, t, x) -> np.ndarray:
        t = np.asarray(t)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return np.where(t == 1, self.prob(1, x), self.prob(0, x))

    @classmethod
    def constant(cls, g0: float, g1: float, dim: int, g_bounds=G_BOUNDS) -> "BiasingFn":
        """Covariate-free ``G``: ``g0`` for control rows, ``g1`` for treated."""
        zero = [(np.zeros((dim, 1)), np.zeros(1))]
        logit = lambda p: float(np.log(p / (1 - p)))
        return cls((zero, zero), (0.0, 0.0), (logit(g0), logit(g1)), tuple(g_bounds))


def _random_net(gen, dim, layers, hidden):
    widths = [dim] + [hidden] * (layers - 1) + [1]
    return [
        (gen.standard_normal((a, b)) / np.sqrt(a), gen.standard_normal(b))
        for a, b in zip(widths[:-1], widths[1:])
    ]


def _calibrate_shift(raw, target, g_bounds, what):
    """Find ``s`` with ``sum clip(sigmoid(raw + s)) == target`` by bisection."""
    lo_b, hi_b = g_bounds
    n = raw.size
    if not n * lo_b <= target <= n * hi_b:
        raise CalibrationError(
            f"{what}: target {target:.1f} is outside the reachable range "
            f"[{n * lo_b:.1f}, {n * hi_b:.1f}] for {n} rows under g_bounds {g_bounds}"
        )
    expected = lambda s: float(np.clip(_sigmoid(raw + s), lo_b, hi_b).sum())
    lo, hi = -40.0 - raw.max(), 40.0 - raw.min()
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if expected(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def make_biasing_fn(config: BiasingConfig, pool: Dataset) -> BiasingFn:
    """Draw per-arm MLPs and calibrate them on ``pool``.

    After calibration the expected kept count is within 2% of
    ``target_est_size`` and the expected treated fraction within 0.02 of
    ``target_treat_frac``; otherwise :class:`CalibrationError` names the
    missed target.
    """
    n = len(pool)
    if n == 0:
        raise DataError("calibration pool is empty")
    if config.target_est_size > n:
        raise CalibrationError(
            f"target estimation size {config.target_est_size} exceeds pool size {n}"
        )
    gen = _seeding.rng(config.seed, "biasing-mlp")
    nets = tuple(_random_net(gen, pool.dim, config.layers, config.hidden) for _ in (0, 1))
    targets = {
        1: config.target_est_size * config.target_treat_frac,
        0: config.target_est_size * (1 - config.target_treat_frac),
    }
    scale, shift = [0.0, 0.0], [0.0, 0.0]
    for arm in (0, 1):
        x_arm = pool.x[pool.t == arm]
        if len(x_arm) == 0:
            raise CalibrationError(f"pool has no rows with t={arm}")
        raw = _mlp(x_arm, nets[arm])
        sd = raw.std()
        scale[arm] = config.strength / sd if sd > 0 else 0.0
        what = "treated count" if arm == 1 else "control count"
        shift[arm] = _calibrate_shift(scale[arm] * raw, targets[arm], config.g_bounds, what)
    g = BiasingFn(nets, tuple(scale), tuple(shift), tuple(config.g_bounds))

    kept = g(pool.t, pool.x)
    size = float(kept.sum())
    frac = float(kept[pool.t == 1].sum() / size)
    if abs(size - config.target_est_size) > SIZE_RTOL * config.target_est_size:
        raise CalibrationError(
            f"expected estimation size {size:.1f} misses target {config.target_est_size}"
        )
    if abs(frac - config.target_treat_frac) > FRAC_ATOL:
        raise CalibrationError(
            f"expected treated fraction {frac:.4f} misses target {config.target_treat_frac}"
        )
    return g


def induced_propensity(g: BiasingFn, e1: float, x) -> np.ndarray:
    """Propensity of the kept rows implied by ``g`` on an RCT with ``Pr(T=1) = e1``."""
    if not 0 < e1 < 1:
        raise ConfigError(f"e1 must lie in (0, 1), got {e1}")
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return 1.0 / (1.0 + (1.0 - e1) / e1 * g.prob(0, x) / g.prob(1, x))


def observational_sample(pool: Dataset, g: BiasingFn, seed: int, attempts: int = 3) -> Dataset:
    """Keep each pool row independently with probability ``G(t, x)``."""
    if pool.provenance is not Provenance.RCT:
        raise DataError("observational sampling needs an RCT pool")
    keep_p = g(pool.t, pool.x)
    for attempt in range(attempts):
        u = _seeding.rng(seed, "keep", attempt).random(len(pool))
        idx = np.flatnonzero(u < keep_p)
        if idx.size:
            break
    else:
        raise CalibrationError(f"observational sample came back empty {attempts} times")
    kept = pool.take(
        idx,
        provenance=Provenance.OBSERVATIONAL,
        seed_lineage=pool.seed_lineage + (int(seed),),
        name=f"{pool.name}/est",
    )
    return kept.replace(propensity=induced_propensity(g, pool.e1, kept.x))


# ---------------------------------------------------------------------------- grid


@dataclasses.dataclass(frozen=True)
class GridCell:
    index: int
    size: int
    treat_frac: float
    layers: int
    replicate: int
    seed: int

    @property
    def setting(self) -> tuple:
        return (self.size, self.treat_frac, self.layers)

    @property
    def cell_id(self) -> str:
        return f"n{self.size}-p{self.treat_frac:g}-l{self.layers}-r{self.replicate}"


def build_grid(
    sizes: Sequence[int],
    treat_fracs: Sequence[float],
    layer_counts: Sequence[int],
    replicates: int,
    master_seed: int = 0,
) -> list[GridCell]:
    """Cartesian product of settings times replicates, each with its own seed."""
    if not sizes or not treat_fracs or not layer_counts:
        raise ConfigError("grid lists must be nonempty")
    if replicates < 1:
        raise ConfigError("need at least one replicate")
    cells = []
    for setting_idx, (size, frac, layers) in enumerate(itertools.product(sizes, treat_fracs, layer_counts)):
        for rep in range(replicates):
            cells.append(
                GridCell(
                    index=len(cells),
                    size=int(size),
                    treat_frac=float(frac),
                    layers=int(layers),
                    replicate=rep,
                    seed=_seeding.derive_seed(master_seed, "cell", setting_idx, rep),
                )
            )
    return cells
