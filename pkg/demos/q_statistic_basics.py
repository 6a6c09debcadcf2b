"""
Scoring CATE estimators without counterfactuals
===============================================

A semi-synthetic trial where the true effect is known, so the Q-hat
ranking can be checked against the oracle squared error (PEHE).
"""

import warnings

import numpy as np

import cateq
from cateq import learners, synthetic

# Covariates shaped like an e-mail marketing customer table, one-hot
# encoded and scaled into [0, 1]. Outcomes follow the interaction surface
# with an average effect of 0.5; treatment is a fair coin.
x = synthetic.hillstrom_like_features(16_000, seed=0)
config = cateq.SyntheticConfig("interaction", tau_shift=0.5, seed=0)
data, truth = synthetic.make_dataset(x, config, assignment="rct", e1=0.5)
train, test = cateq.split(data, 0.5, seed=1)
truth_test = truth.take(test.row_ids)
print(f"{len(train)} training rows, {len(test)} evaluation rows, SD(tau) = {truth.tau.std():.2f}")

# Fit every native strategy on the training half.
roster = ["s", "s_ext", "t", "r", "dr", "const", "zero"]
nuisances = cateq.fit_nuisances(train, seed=2)
with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    preds = {m: cateq.fit_cate(m, train, nuisances, seed=3).predict(test.x) for m in roster}

# Evaluation plug-ins for the doubly robust control variate come from a
# slice of the evaluation half that is then left out of the sum.
q_part, nuis_part = cateq.split(test, 0.2, seed=4)
plug_ins = learners.fit_outcome_models(nuis_part, seed=5).predict(q_part.x)
rows = np.searchsorted(test.row_ids, q_part.row_ids)

baseline = cateq.qhat(preds["const"][rows], q_part, cv="dr", nuisances=plug_ins)
print(f"\n{'model':<8}{'PEHE':>8}{'Q-hat':>9}{'Q-hat(dr)':>11}{'se(dr)':>8}{'approx MSE':>12}  verdict")
for m in roster:
    plain = cateq.qhat(preds[m], test)
    dr = cateq.screen(cateq.qhat(preds[m][rows], q_part, cv="dr", nuisances=plug_ins), baseline)
    pehe = cateq.oracle_pehe(preds[m], truth_test)
    mse = cateq.approximate_mse(dr, plug_ins)
    print(f"{m:<8}{pehe:>8.3f}{plain.q_hat:>9.3f}{dr.q_hat:>11.3f}{dr.se:>8.3f}{mse:>12.3f}  {dr.screening.value}")

# Q and PEHE differ by the constant E[tau^2], so the two columns should
# order the models the same way, up to sampling noise. The four
# heterogeneous learners are all linear in x and land within a few
# thousandths of each other, far inside one standard error, so which of
# them comes first is a coin toss; the correlation over the whole ranking
# is the more telling number here. The s-learner predicts a constant too,
# and the screen can call it useful only because its Q-hat edges below
# the baseline by less than its SE.
q_scores = {m: cateq.qhat(preds[m][rows], q_part, cv="dr", nuisances=plug_ins).q_hat for m in roster}
pehe_scores = {m: cateq.oracle_pehe(preds[m], truth_test) for m in roster}
print("\nagreement with the oracle ranking:", cateq.oracle_rank_agreement(q_scores, pehe_scores))
print(f"mean tau^2 on the evaluation half: {np.mean(truth_test.tau ** 2):.3f}")
