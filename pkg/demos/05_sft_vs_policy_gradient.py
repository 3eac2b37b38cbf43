"""Supervised fine-tuning against policy gradient.

SFT imitates the best output of each covered context; vanilla policy gradient
optimizes the oracle reward directly on the same contexts. Both are then
scored on covered and uncovered contexts.
"""

from rlhf_lab.analysis import sft_vs_pg
from rlhf_lab.mdp import GenerationMdp
from rlhf_lab.oracle import RewardSpec, make_reward

mdp = GenerationMdp.uniform(vocab_size=2, horizon=2, num_contexts=4)
oracle = make_reward(mdp, RewardSpec(seed=3))
rows = sft_vs_pg(mdp, oracle, demo_budget=40, rollout_budget=20_000, seeds=[0, 1], covered_contexts=[0, 1])
print("seed  method      J on covered  best possible  J on uncovered")
for r in rows:
    print(f"{r.seed:<5} {r.method:<11} {r.j_rew:.4f}        {r.j_optimal_rew:.4f}         {r.j_ood:.4f}")
