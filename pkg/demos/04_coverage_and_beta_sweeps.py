"""How feedback coverage and KL strength shape the misalignment gap.

dJ compares the closed-form optima for the oracle and for a learned reward.
More coverage shrinks it; larger beta keeps both policies near the reference.
"""

from rlhf_lab.analysis import CoverageSweepConfig, beta_sweep, coverage_sweep
from rlhf_lab.feedback import collect_ratings
from rlhf_lab.mdp import GenerationMdp
from rlhf_lab.oracle import RewardSpec, make_reward
from rlhf_lab.policy import Policy
from rlhf_lab.reward_model import RewardModel, TrainConfig, train

mdp = GenerationMdp.uniform(vocab_size=2, horizon=2, num_contexts=8)
oracle = make_reward(mdp, RewardSpec(seed=0))
pre = Policy.random(mdp, seed=1)

res = coverage_sweep(mdp, oracle, [0.25, 0.5, 0.75, 1.0], CoverageSweepConfig(), seeds=range(10), pre=pre)
print("kappa   mean dJ     stderr   OOD MSE")
for p in res.points:
    print(f"{p.value:<6}  {p.delta_j_mean:.4f}  {p.delta_j_stderr:.4f}  {p.ood_mse_mean:.3f}")

covered = [0, 1, 2, 3]
data = collect_ratings(mdp, oracle, covered, mdp.num_outputs, seed=0)
model, _ = train(RewardModel.tabular(mdp), data, TrainConfig(step_size=0.25, num_epochs=500))
res = beta_sweep(mdp, oracle, model, pre, [0.1, 1.0, 10.0, 100.0], covered_contexts=covered)
print("\nbeta    dJ       J(pi*)   KL(pi_rlhf||pi_pre)")
for p in res.points:
    print(f"{p.value:<6}  {p.delta_j_mean:.4f}  {p.j_star_mean:.4f}  {p.kl_to_pre_mean:.4f}")
