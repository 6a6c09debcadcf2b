"""
Does Q-hat pick the model the oracle would pick?
================================================

Repeat a semi-synthetic study many times: fit the native roster on a
confounded estimation set, score it with Q-hat on evaluation sets of
growing size, and compare each ranking with the oracle PEHE ranking.
"""

import cateq
from cateq.bench import trend_statistic

# A reduced version of the full protocol so the demo runs in seconds;
# `cateq verify` runs the full one (7 sizes up to 64,000, 50 replicates).
config = cateq.VerifyConfig(
    transform="interaction",
    tau_shift=0.5,
    est_size=2000,
    eval_sizes=(500, 2000, 8000, 32000),
    replicates=12,
    cvs=("none", "dr"),
    seed=0,
)
report = cateq.run_verification(config)

print(f"{'criterion':<16}{'eval size':>10}{'MRR':>7}{'prec@1':>8}{'spearman':>10}")
for row in report.table:
    print(f"{row['cv']:<16}{row['eval_size']:>10}{row['mrr']:>7.3f}{row['precision_at_1']:>8.3f}{row['rank_correlation']:>10.3f}")

# More evaluation data should mean better agreement. The trend statistic
# is the Spearman correlation of a metric with log evaluation size.
for cv in ("none", "dr"):
    mrr = report.series(cv, "mrr")
    print(f"{cv:<5} MRR trend over size: {trend_statistic(config.eval_sizes, mrr):+.2f}")
