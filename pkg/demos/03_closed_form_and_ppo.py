"""KL-regularized optimum and PPO.

The KL-penalized objective has a closed-form maximizer that tilts the
reference policy by exp(R / beta). PPO with the same penalty, applied as a
per-token reward cost, converges to it.
"""

import numpy as np

from rlhf_lab.mdp import GenerationMdp
from rlhf_lab.oracle import RewardSpec, exact_performance, make_reward
from rlhf_lab.policy import Policy
from rlhf_lab.policy_opt import OptimConfig, closed_form_policy, kl_to_pre, total_variation, train_policy

mdp = GenerationMdp.uniform(vocab_size=4, horizon=3, num_contexts=2)
oracle = make_reward(mdp, RewardSpec(seed=0))
pre = Policy.random(mdp, seed=1)

for beta in (0.1, 1.0, 10.0):
    star = closed_form_policy(mdp, pre, oracle, beta)
    print(f"beta={beta:<5} J={exact_performance(mdp, star, oracle):.4f} KL={kl_to_pre(mdp, star, pre):.4f}")

target = closed_form_policy(mdp, pre, oracle, 1.0)
cfg = OptimConfig(algorithm="ppo", step_size=1.0, batch_size=64, num_iters=3000, beta=1.0, seed=0)
policy, history = train_policy(mdp, oracle, pre, cfg, log_every=1000)
for row in history:
    print(f"iter {row.iter:>5}: J={row.j_exact:.4f} KL={row.kl_to_pre:.4f}")
print("TV to the closed form per context:", np.round(total_variation(mdp, policy, target), 4))
