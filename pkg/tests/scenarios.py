"""A fixed population to draw many synthetic RCTs from.

The covariate map, outcome surface, effect estimate and nuisance models are
frozen once, so every replicate is an i.i.d. sample from one population and
population quantities can be approximated by brute force on fresh draws.
"""

import numpy as np

from cateq import _seeding, learners, synthetic
from cateq.data import Dataset, Provenance, fit_feature_map

CATEGORICAL = ["zip_code", "channel"]


class Population:
    def __init__(self, transform="interaction", tau_shift=0.5, seed=0, e1=0.5, ref_size=50_000):
        self.e1 = e1
        self.seed = seed
        ref = synthetic.simulate_covariates(ref_size, _seeding.derive_seed(seed, "ref"))
        self.fmap = fit_feature_map(ref, categorical=CATEGORICAL, seed=seed)
        cfg = synthetic.SyntheticConfig(transform, tau_shift=tau_shift, seed=seed)
        self.surface = synthetic.fit_surface(self.fmap.transform(ref), cfg)
        # the estimator under evaluation and the evaluation plug-ins: both
        # trained once on independent draws, then held fixed
        self.estimator = learners.fit_cate("t", self.draw(1000, _seeding.derive_seed(seed, "fit-tau")))
        self.outcome_models = learners.fit_outcome_models(self.draw(4000, _seeding.derive_seed(seed, "fit-nuis")))

    def features(self, n, seed):
        return self.fmap.transform(synthetic.simulate_covariates(n, seed))

    def draw(self, n, seed) -> Dataset:
        x = self.features(n, seed)
        gen = _seeding.rng(seed, "outcomes")
        mu0, mu1 = self.surface.mu(x)
        noise = gen.standard_normal((2, n))
        t = (gen.random(n) < self.e1).astype(np.int8)
        y = np.where(t == 1, mu1 + noise[1] + self.surface.tau_shift, mu0 + noise[0])
        return Dataset(x=x, t=t, y=y, e1=self.e1, provenance=Provenance.RCT, name="population-draw")

    def tau(self, x):
        return self.surface.tau(x)

    def tau_hat(self, x):
        return self.estimator.predict(x)

    def nuisances(self, x):
        return self.outcome_models.predict(x)

    def q_oracle(self, n_draws=1_000_000, chunk=200_000, tau_hat=None):
        """``E[tau_hat^2 - 2 tau_hat tau]`` over fresh draws, with its Monte Carlo SE."""
        tau_hat = tau_hat or self.tau_hat
        vals = []
        for k in range(0, n_draws, chunk):
            x = self.features(min(chunk, n_draws - k), _seeding.derive_seed(self.seed, "oracle", k))
            th = tau_hat(x)
            vals.append(th * th - 2 * th * self.tau(x))
        v = np.concatenate(vals)
        return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))
