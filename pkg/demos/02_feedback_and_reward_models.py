"""Synthetic feedback and reward-model fitting.

Ratings are exact oracle values; preferences are Bradley-Terry draws. A
tabular model fits covered pairs exactly but leaves uncovered ones at their
initial value, which is where misgeneralization comes from.
"""

import numpy as np

from rlhf_lab.feedback import collect_preferences, collect_ratings, compute_coverage, ranking_to_pairs
from rlhf_lab.mdp import GenerationMdp
from rlhf_lab.oracle import RewardSpec, make_reward
from rlhf_lab.reward_model import RewardModel, TrainConfig, center_per_context, generalization_report, train

mdp = GenerationMdp.uniform(vocab_size=2, horizon=2, num_contexts=4)
oracle = make_reward(mdp, RewardSpec(seed=3))

print("ranking [3, 0, 2] expands to",
      [(p.winner, p.loser) for p in ranking_to_pairs(0, [3, 0, 2])])

ratings = collect_ratings(mdp, oracle, context_subset=[0, 1], outputs_per_context=3, seed=0)
print("coverage of the rating set:", compute_coverage(mdp, ratings))

model, trace = train(RewardModel.tabular(mdp), ratings, TrainConfig(step_size=0.25, num_epochs=500))
rep = generalization_report(model, oracle, ratings, mdp)
print(f"MSE fit: in-distribution {rep.in_dist_mse:.2e}, out-of-distribution {rep.ood_mse:.3f}")

prefs = collect_preferences(mdp, oracle, [0, 1, 2, 3], samples_per_pair=2000, seed=0)
bt_cfg = TrainConfig(objective="bt_nll", step_size=2e-4, num_epochs=5000, l2_weight=1e-4, convergence_tol=1e-8)
bt_model, _ = train(RewardModel.tabular(mdp), prefs, bt_cfg)
# preferences only pin rewards down up to a per-context constant
err = np.abs(center_per_context(bt_model.table()) - center_per_context(oracle.table())).max()
print(f"BT fit from {len(prefs)} comparisons: max centered error {err:.3f}")
