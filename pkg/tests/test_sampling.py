import numpy as np
import pytest

from cateq import sampling
from cateq.data import Dataset, Provenance
from cateq.errors import CalibrationError, ConfigError, DataError
from cateq.sampling import BiasingConfig, BiasingFn


def _pool(n=20_000, d=4, e1=0.5, seed=0):
    gen = np.random.default_rng(seed)
    x = gen.random((n, d))
    t = (gen.random(n) < e1).astype(int)
    return Dataset(x=x, t=t, y=x[:, 0] + t, e1=e1, provenance=Provenance.RCT, name="pool")


# ---------------------------------------------------------------------- calibration


def test_calibration_hits_targets_over_seeds():
    pool = _pool()
    sizes, fracs, gaps = [], [], []
    for seed in range(20):
        cfg = BiasingConfig(layers=1, target_est_size=4000, target_treat_frac=0.5, seed=seed)
        g = sampling.make_biasing_fn(cfg, pool)
        keep = g(pool.t, pool.x)
        sizes.append(keep.sum())
        fracs.append(keep[pool.t == 1].sum() / keep.sum())
        gaps.append(abs(g.logit(1, pool.x).mean() - g.logit(0, pool.x).mean()))
    assert np.all(np.abs(np.array(sizes) - 4000) <= 0.02 * 4000)
    assert np.all(np.abs(np.array(fracs) - 0.5) <= 0.02)
    # equal arms and targets: the calibrated logits sit at the same level,
    # whatever offset each random network started from
    assert np.median(gaps) < 0.1


@pytest.mark.parametrize("layers", [1, 2, 3])
@pytest.mark.parametrize("frac", [0.1, 0.9])
def test_calibration_extreme_fractions(layers, frac):
    pool = _pool(seed=layers)
    g = sampling.make_biasing_fn(BiasingConfig(layers, 4000, frac, seed=5), pool)
    keep = g(pool.t, pool.x)
    assert abs(keep[pool.t == 1].sum() / keep.sum() - frac) <= 0.02
    lo, hi = g.g_bounds
    assert keep.min() >= lo and keep.max() <= hi


def test_target_larger_than_pool():
    with pytest.raises(CalibrationError, match="exceeds pool"):
        sampling.make_biasing_fn(BiasingConfig(1, 30_000, 0.5), _pool())


def test_unreachable_target_names_arm():
    # 10 treated rows out of 20,000 would need G below the 0.02 floor
    with pytest.raises(CalibrationError, match="treated count"):
        sampling.make_biasing_fn(BiasingConfig(1, 1000, 0.01), _pool())


def test_config_validation():
    for bad in (dict(layers=4), dict(target_treat_frac=1.0), dict(g_bounds=(0.0, 0.9))):
        kw = dict(layers=1, target_est_size=10, target_treat_frac=0.5) | bad
        with pytest.raises(ConfigError):
            BiasingConfig(**kw)


def test_biasing_fn_is_deterministic_in_seed():
    pool = _pool()
    a = sampling.make_biasing_fn(BiasingConfig(2, 3000, 0.5, seed=3), pool)
    b = sampling.make_biasing_fn(BiasingConfig(2, 3000, 0.5, seed=3), pool)
    np.testing.assert_array_equal(a(pool.t, pool.x), b(pool.t, pool.x))


# --------------------------------------------------------------------------- sampling


def test_constant_g_keeps_expected_fraction():
    pool = _pool(n=50_000)
    g = BiasingFn.constant(0.98, 0.98, pool.dim)
    kept = sampling.observational_sample(pool, g, seed=1)
    n, p = len(pool), 0.98
    assert abs(len(kept) - n * p) <= 3 * np.sqrt(n * p * (1 - p))


def test_arm_specific_g_induces_treated_fraction():
    pool = _pool(n=50_000)
    g = BiasingFn.constant(0.1, 0.9, pool.dim)
    kept = sampling.observational_sample(pool, g, seed=2)
    assert kept.t.mean() == pytest.approx(0.9, abs=0.01)
    np.testing.assert_allclose(kept.propensity, 0.9)


def test_sample_is_deterministic_and_untouched():
    pool = _pool()
    g = sampling.make_biasing_fn(BiasingConfig(1, 4000, 0.3, seed=4), pool)
    a = sampling.observational_sample(pool, g, seed=9)
    b = sampling.observational_sample(pool, g, seed=9)
    assert a.fingerprint == b.fingerprint and np.array_equal(a.row_ids, b.row_ids)
    assert a.provenance is Provenance.OBSERVATIONAL
    np.testing.assert_array_equal(pool.x[a.row_ids], a.x)
    np.testing.assert_array_equal(pool.y[a.row_ids], a.y)
    np.testing.assert_array_equal(pool.t[a.row_ids], a.t)


def test_sampling_needs_an_rct_pool():
    pool = _pool(n=100).replace(provenance=Provenance.SYNTHETIC)
    with pytest.raises(DataError):
        sampling.observational_sample(pool, BiasingFn.constant(0.5, 0.5, 4), seed=0)


def test_empty_sample_after_retries():
    pool = _pool(n=5)
    tiny = BiasingFn.constant(1e-9, 1e-9, pool.dim, g_bounds=(1e-12, 0.5))
    with pytest.raises(CalibrationError, match="empty"):
        sampling.observational_sample(pool, tiny, seed=0)


# ------------------------------------------------------------------ induced propensity


@pytest.mark.parametrize(
    "e1,g0,g1,expected",
    [(0.5, 0.4, 0.4, 0.5), (0.5, 0.1, 0.9, 0.9), (0.85, 0.5, 0.5, 0.85), (0.3, 0.2, 0.6, 1 / (1 + (0.7 / 0.3) / 3))],
)
def test_induced_propensity_closed_form(e1, g0, g1, expected):
    g = BiasingFn.constant(g0, g1, 2)
    assert sampling.induced_propensity(g, e1, np.zeros((3, 2))) == pytest.approx(np.full(3, expected))


def test_induced_propensity_rejects_bad_e1():
    with pytest.raises(ConfigError):
        sampling.induced_propensity(BiasingFn.constant(0.5, 0.5, 1), 1.0, np.zeros((1, 1)))


# ------------------------------------------------------------------------------- grid


def test_full_grid_size():
    cells = sampling.build_grid([1000, 2000, 4000, 8000], [0.1, 0.5, 0.9], [1, 2, 3], 100)
    assert len(cells) == 3600
    assert len({c.seed for c in cells}) == 3600
    assert len({c.cell_id for c in cells}) == 3600


def test_single_cell_grid_and_replicate_seeds():
    assert len(sampling.build_grid([10], [0.5], [1], 1)) == 1
    a, b = sampling.build_grid([10], [0.5], [1], 2)
    assert a.setting == b.setting and a.seed != b.seed


def test_grid_seeds_depend_on_master_seed():
    a = sampling.build_grid([10], [0.5], [1], 1, master_seed=0)[0]
    b = sampling.build_grid([10], [0.5], [1], 1, master_seed=1)[0]
    assert a.seed != b.seed


def test_empty_grid_lists():
    with pytest.raises(ConfigError):
        sampling.build_grid([], [0.5], [1], 1)
