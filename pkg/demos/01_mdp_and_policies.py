"""Text generation as a finite MDP.

Builds a small instance, walks one rollout, and checks that the exact
performance of a policy agrees with a Monte Carlo estimate.
"""

import numpy as np

from rlhf_lab.mdp import GenerationMdp, StateRef, enumerate_outputs, rollout
from rlhf_lab.oracle import RewardSpec, exact_performance, make_reward, mc_performance
from rlhf_lab.policy import Policy, output_probs

mdp = GenerationMdp.uniform(vocab_size=3, horizon=2, num_contexts=2)
print(f"{mdp.num_outputs} outputs and {mdp.num_states} decision states per context")
print("outputs:", enumerate_outputs(mdp))

# a state is a context plus the tokens emitted so far
s = mdp.step(StateRef(0), 2)
print("after emitting token 2:", s, "terminal:", mdp.is_terminal(s))

policy = Policy.random(mdp, seed=0, scale=1.5)
print("rollout:", rollout(mdp, policy, rng_seed=1))
print("output distribution of context 0:", np.round(output_probs(mdp, policy)[0], 3))

oracle = make_reward(mdp, RewardSpec(kind="gaussian_random", seed=0))
exact = exact_performance(mdp, policy, oracle)
est, se = mc_performance(mdp, policy, oracle, num_samples=50_000, seed=2)
print(f"J exact {exact:.4f}, Monte Carlo {est:.4f} +/- {se:.4f}")
