import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cateq import learners
from cateq.data import Dataset, Provenance
from cateq.errors import AlignmentError, DataError, DegenerateDesignError, FitError
from conftest import make_rct


# ---------------------------------------------------------------------------- ridge


def _ridge_oracle(x, y, lam):
    """Dense normal equations on centered data, intercept unpenalized."""
    xm, ym = x.mean(0), y.mean()
    xc, yc = x - xm, y - ym
    w = np.linalg.inv(xc.T @ xc + lam * np.eye(x.shape[1])) @ (xc.T @ yc)
    return w, ym - xm @ w


def test_ridge_matches_dense_oracle():
    gen = np.random.default_rng(0)
    x, y = gen.normal(size=(10, 3)), gen.normal(size=10)
    model = learners.fit_ridge(x, y, 0.1)
    w, b = _ridge_oracle(x, y, 0.1)
    np.testing.assert_allclose(model.weights, w, rtol=1e-8)
    assert model.intercept == pytest.approx(b, rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(5, 40), d=st.integers(1, 6), lam=st.floats(1e-3, 1e3), seed=st.integers(0, 999))
def test_ridge_satisfies_penalized_normal_equations(n, d, lam, seed):
    gen = np.random.default_rng(seed)
    x, y = gen.normal(size=(n, d)), gen.normal(size=n)
    model = learners.fit_ridge(x, y, lam)
    xc, yc = x - x.mean(0), y - y.mean()
    resid = (xc.T @ xc + lam * np.eye(d)) @ model.weights - xc.T @ yc
    assert np.linalg.norm(resid) <= 1e-8 * max(np.linalg.norm(xc.T @ yc), 1.0)


def test_ridge_cv_recovers_noiseless_line():
    x = np.linspace(0, 1, 50)[:, None]
    model = learners.fit_ridge_cv(x, 2 * x[:, 0] + 1, lambdas=[1e-6, 1e-3, 1.0, 100.0])
    assert model.weights[0] == pytest.approx(2, abs=1e-4)
    assert model.intercept == pytest.approx(1, abs=1e-4)
    assert model.penalty == 1e-6


def test_ridge_cv_constant_targets():
    gen = np.random.default_rng(1)
    x = gen.normal(size=(40, 3))
    for lam in (0.0, 1e-3, 1.0):
        model = learners.fit_ridge_cv(x, np.full(40, 3.5), lambdas=[lam] if lam else [0.0, 0.1])
        assert model.intercept == pytest.approx(3.5)
        assert np.allclose(model.weights, 0, atol=1e-10)


def test_ridge_cv_singular_zero_penalty_falls_back():
    x = np.ones((20, 2))  # collinear columns, singular at lambda = 0 after centering
    x[:, 1] = np.arange(20)
    x = np.column_stack([x[:, 1], x[:, 1]])
    model = learners.fit_ridge_cv(x, np.arange(20.0), lambdas=[0.0, 0.5, 2.0])
    assert model.penalty > 0


def test_ridge_cv_ties_prefer_larger_penalty():
    x = np.zeros((20, 2))  # no signal: every penalty gives the same CV error
    model = learners.fit_ridge_cv(x + np.arange(2), np.arange(20.0), lambdas=[0.1, 1.0, 10.0])
    assert model.penalty == 10.0


def test_ridge_cv_needs_enough_rows():
    with pytest.raises(DataError):
        learners.fit_ridge_cv(np.zeros((5, 1)), np.zeros(5), folds=5)


# ----------------------------------------------------------------------- propensity


def test_propensity_separable_data_saturates_at_clip():
    x = np.linspace(-1, 1, 40)[:, None]
    t = (x[:, 0] > 0).astype(int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = learners.fit_propensity(x, t, penalty=1e-8)
    p = model.predict(np.array([[-1.0], [1.0]]))
    assert p[0] == 0.05 and p[1] == 0.95


def test_propensity_independent_treatment_is_flat():
    gen = np.random.default_rng(2)
    n = 4000
    x = gen.random((n, 3))
    t = gen.integers(0, 2, n)
    p = learners.fit_propensity(x, t).predict(x)
    assert np.all(np.abs(p - 0.5) <= 3 * np.sqrt(0.25 / n) * 3)


def test_propensity_beats_intercept_only_likelihood():
    gen = np.random.default_rng(3)
    x = gen.normal(size=(20, 1))
    t = (gen.random(20) < 1 / (1 + np.exp(-2 * x[:, 0]))).astype(int)
    p = learners.fit_propensity(x, t, penalty=1e-6).predict_unclipped(x)
    ll = np.sum(t * np.log(p) + (1 - t) * np.log(1 - p))
    p0 = t.mean()  # closed-form intercept-only maximum likelihood
    ll0 = np.sum(t * np.log(p0) + (1 - t) * np.log(1 - p0))
    assert ll >= ll0


def test_propensity_single_class_fails():
    with pytest.raises(FitError):
        learners.fit_propensity(np.zeros((10, 1)), np.ones(10))


def test_propensity_non_convergence_warns():
    gen = np.random.default_rng(4)
    x = gen.normal(size=(100, 2))
    t = (x[:, 0] > 0).astype(int)
    with pytest.warns(RuntimeWarning):
        model = learners.fit_propensity(x, t, penalty=1e-12, max_iter=2)
    assert not model.converged


# ------------------------------------------------------------------------ nuisances


def test_rct_nuisances_use_design_propensity(rct):
    nuis = learners.fit_nuisances(rct, seed=0)
    assert np.all(nuis.e == 0.5)
    assert all(not isinstance(m.e, learners.PropensityModel) for m in nuis.models)


def test_observational_nuisances_fit_a_classifier(rct):
    obs = rct.replace(provenance=Provenance.OBSERVATIONAL)
    nuis = learners.fit_nuisances(obs, seed=0)
    assert all(isinstance(m.e, learners.PropensityModel) for m in nuis.models)


def test_pooled_outcome_model_mixes_arms():
    gen = np.random.default_rng(5)
    n, e1 = 4000, 0.3
    x = gen.random((n, 1))
    t = (gen.random(n) < e1).astype(int)
    y = np.where(t == 1, 2 * x[:, 0], x[:, 0])
    nuis = learners.fit_nuisances(Dataset(x=x, t=t, y=y, e1=e1), seed=1)
    expected = (1 - e1) * x[:, 0] + e1 * 2 * x[:, 0]
    assert np.max(np.abs(nuis.m - expected)) < 0.05


def test_cross_fitting_is_out_of_fold(rct):
    nuis = learners.fit_nuisances(rct, folds=3, seed=4)
    for k, model in enumerate(nuis.models):
        held = nuis.folds == k
        # the held-out fold's predictions come from the model not trained on it
        np.testing.assert_allclose(model.mu0.predict(rct.x[held]), nuis.mu0[held])
        refit = learners._fit_models(rct.x[~held], rct.t[~held], rct.y[~held], rct.e1, False, learners._seeding.derive_seed(4, "fold", k), learners.DEFAULT_LAMBDAS, 5)
        np.testing.assert_allclose(refit.mu1.weights, model.mu1.weights)


def test_fold_assignment_is_deterministic(rct):
    a = learners.fit_nuisances(rct, seed=9)
    b = learners.fit_nuisances(rct, seed=9)
    assert np.array_equal(a.folds, b.folds) and np.array_equal(a.mu1, b.mu1)


def test_refold_with_stratification():
    t = np.array([1, 1] + [0] * 8)
    folds = learners._assign_folds(t, 2, seed=0)
    assert all(set(t[folds == k]) == {0, 1} for k in range(2))
    with pytest.raises(FitError):
        learners._assign_folds(np.array([1] + [0] * 9), 2, seed=0)


# ----------------------------------------------------------------------- strategies


def _exact_dataset(n=2000, seed=0):
    gen = np.random.default_rng(seed)
    x = gen.random((n, 2))
    t = np.arange(n) % 2
    return Dataset(x=x, t=t, y=t * x[:, 0], e1=0.5), x[:, 0]


@pytest.mark.parametrize("strategy", ["s_ext", "t", "dr"])
def test_heterogeneous_strategies_recover_x1(strategy):
    ds, tau = _exact_dataset()
    est = learners.fit_cate(strategy, ds, seed=0, lambdas=[1e-8, 1e-6])
    assert np.max(np.abs(est.predict(ds.x) - tau)) < 1e-3


@pytest.mark.slow
def test_r_learner_recovers_x1_with_enough_data():
    ds, tau = _exact_dataset(n=100_000, seed=1)
    est = learners.fit_cate("r", ds, seed=0, lambdas=[1e-8, 1e-6])
    assert np.max(np.abs(est.predict(ds.x) - tau)) < 1e-2


@pytest.mark.parametrize("strategy", ["s", "const"])
def test_constant_strategies_give_the_average_effect(strategy):
    ds, tau = _exact_dataset()
    est = learners.fit_cate(strategy, ds, seed=0)
    pred = est.predict(ds.x)
    assert np.ptp(pred) == 0 and pred[0] == pytest.approx(tau.mean(), abs=0.02)


def test_zero_strategy():
    ds, _ = _exact_dataset(50)
    assert np.all(learners.predict_cate(learners.fit_cate("zero", ds), ds.x) == 0)


def test_constant_effect_closed_form(rct):
    nuis = learners.fit_nuisances(rct, seed=3)
    est = learners.fit_cate("const", rct, nuis)
    t_res, y_res = rct.t - nuis.e, rct.y - nuis.m
    assert est.intercept == np.sum(t_res * y_res) / np.sum(t_res * t_res)
    assert np.all(learners.CateEstimator(learners.Strategy.CONST, 0.7, dim=3).predict(np.zeros((4, 3))) == 0.7)


@pytest.mark.slow
def test_constant_effect_converges_to_homogeneous_effect():
    c, n = 0.8, 4000
    ests = []
    for r in range(30):
        ds = make_rct(n=n, d=3, seed=300 + r, effect=lambda x: np.full(len(x), c))
        ests.append(learners.fit_cate("const", ds, seed=r).intercept)
    ests = np.asarray(ests)
    assert abs(ests.mean() - c) <= 3 * ests.std(ddof=1) / np.sqrt(len(ests))


def test_degenerate_design():
    ds = make_rct(n=40)
    nuis = learners.NuisanceSet(np.zeros(40), np.zeros(40), np.zeros(40), ds.t.astype(float).clip(1e-9, 1 - 1e-9))
    nuis = learners.NuisanceSet(nuis.mu0, nuis.mu1, nuis.m, ds.t.astype(float))
    for strategy in ("r", "const"):
        with pytest.raises(DegenerateDesignError):
            learners.fit_cate(strategy, ds, nuis)


@pytest.mark.slow
def test_s_and_s_ext_agree_without_interaction():
    # the only gap is the noise in the interaction weights, so it shrinks like 1/sqrt(N)
    gaps = []
    for n in (500, 2000, 8000, 32000):
        diffs = []
        for r in range(10):
            ds = make_rct(n=n, d=2, seed=1000 * r + n, effect=lambda x: np.full(len(x), 1.0))
            a = learners.fit_cate("s", ds).predict(ds.x)
            b = learners.fit_cate("s_ext", ds).predict(ds.x)
            diffs.append(np.mean(np.abs(a - b)))
        gaps.append(np.mean(diffs))
    assert np.all(np.diff(gaps) < 0)
    assert gaps[-1] < gaps[0] / 4


def test_prediction_dimension_mismatch(rct):
    est = learners.fit_cate("t", rct)
    with pytest.raises(AlignmentError):
        est.predict(np.zeros((3, 5)))


def test_dr_pseudo_outcome_is_unbiased_in_a_bin():
    gen = np.random.default_rng(6)
    n = 200_000
    x = gen.random(n)
    t = (gen.random(n) < 0.4).astype(int)
    tau = 1 + x
    y = x + t * tau + gen.normal(size=n)
    # deliberately wrong outcome plug-ins; the true propensity keeps the mean right
    pseudo = learners.dr_pseudo_outcome(y, t, 0.4, np.zeros(n), np.ones(n))
    sel = (x > 0.4) & (x < 0.5)
    assert abs(pseudo[sel].mean() - tau[sel].mean()) <= 3 * pseudo[sel].std() / np.sqrt(sel.sum())


def test_strategy_aliases():
    assert learners.Strategy.parse("s_ext") is learners.Strategy.S_EXT
    assert learners.Strategy.parse("const") is learners.Strategy.CONST
    with pytest.raises(Exception):
        learners.Strategy.parse("xgb")
