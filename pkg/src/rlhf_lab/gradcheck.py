"""Finite-difference checks for every analytic gradient in the package."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .feedback import collect_preferences, collect_ratings
from .mdp import GenerationMdp
from .oracle import RewardSpec, exact_performance, make_reward
from .policy import Policy
from .policy_opt import (
    Batch,
    exact_policy_gradient,
    kl_to_pre,
    ppo_objective_and_grad,
    sft_gradient,
    sft_objective,
)
from .reward_model import FeatureMapSpec, RewardModel, bt_nll_and_grad, mse_loss_and_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    x = np.array(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        up = f(x)
        x.flat[i] = orig - h
        down = f(x)
        x.flat[i] = orig
        out.flat[i] = (up - down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> tuple[float, int]:
    """Worst coordinate error scaled by the gradient's largest magnitude.

    Returns ``(max_i |a_i - n_i| / max(|a|_inf, |n|_inf), argmax_i)``; an
    all-zero pair of gradients has error 0.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    diff = np.abs(a - n)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0, 0
    worst = int(diff.argmax())
    return float(diff[worst] / scale), worst


@dataclass(frozen=True)
class GradCheckResult:
    module: str
    operation: str
    instance: int
    max_rel_error: float
    worst_coordinate: int
    passed: bool


def _instance(seed: int):
    rng = np.random.default_rng(seed)
    V = int(rng.integers(2, 4))
    T = int(rng.integers(1, 4))
    C = int(rng.integers(1, 4))
    mdp = GenerationMdp(V, T, tuple(rng.dirichlet(np.ones(C))))
    oracle = make_reward(mdp, RewardSpec(seed=int(rng.integers(1 << 30))))
    return mdp, oracle, rng


def _check_mse(seed: int):
    mdp, oracle, rng = _instance(seed)
    data = collect_ratings(mdp, oracle, list(mdp.contexts), min(3, mdp.num_outputs), seed)
    kind = ("token_counts", "positional_onehot", "context_crossed")[seed % 3]
    model = RewardModel.linear(mdp, FeatureMapSpec(kind)) if seed % 2 else RewardModel.tabular(mdp)
    phi = rng.standard_normal(model.num_params)
    lam = float(rng.uniform(0, 0.5))
    _, grad = mse_loss_and_grad(model, data.ratings, lam, phi)
    num = central_difference(lambda p: mse_loss_and_grad(model, data.ratings, lam, p)[0], phi)
    return grad, num


def _check_bt(seed: int):
    mdp, oracle, rng = _instance(seed)
    data = collect_preferences(mdp, oracle, list(mdp.contexts), 3, seed, outputs_per_context=min(3, mdp.num_outputs))
    kind = ("token_counts", "positional_onehot", "context_crossed")[seed % 3]
    model = RewardModel.linear(mdp, FeatureMapSpec(kind)) if seed % 2 else RewardModel.tabular(mdp)
    phi = rng.standard_normal(model.num_params)
    lam = float(rng.uniform(0, 0.5))
    _, grad = bt_nll_and_grad(model, data.preferences, lam, phi)
    num = central_difference(lambda p: bt_nll_and_grad(model, data.preferences, lam, p)[0], phi)
    return grad, num


def _check_sft(seed: int):
    mdp, _, rng = _instance(seed)
    policy = Policy.random(mdp, int(rng.integers(1 << 30)))
    demos = [(int(rng.integers(mdp.num_contexts)), int(rng.integers(mdp.num_outputs))) for _ in range(5)]
    grad = sft_gradient(mdp, policy, demos)
    num = central_difference(lambda x: sft_objective(mdp, policy.with_logits(x), demos), policy.logits)
    return grad, num


def _check_pg(seed: int):
    mdp, oracle, rng = _instance(seed)
    policy = Policy.random(mdp, int(rng.integers(1 << 30)))
    grad = exact_policy_gradient(mdp, policy, oracle)
    num = central_difference(lambda x: exact_performance(mdp, policy.with_logits(x), oracle), policy.logits)
    return grad, num


def _check_kl_pg(seed: int):
    mdp, oracle, rng = _instance(seed)
    policy = Policy.random(mdp, int(rng.integers(1 << 30)))
    pre = Policy.random(mdp, int(rng.integers(1 << 30)))
    beta = float(rng.uniform(0.2, 2.0))
    grad = exact_policy_gradient(mdp, policy, oracle, pre, beta)

    def objective(x):
        p = policy.with_logits(x)
        return exact_performance(mdp, p, oracle) - beta * kl_to_pre(mdp, p, pre)

    return grad, central_difference(objective, policy.logits)


def _check_ppo(seed: int):
    mdp, _, rng = _instance(seed)
    old = Policy.random(mdp, int(rng.integers(1 << 30)))
    policy = old.with_logits(old.logits + 0.1 * rng.standard_normal(old.logits.shape))
    n = 6
    batch = Batch.from_outputs(mdp, rng.integers(mdp.num_contexts, size=n), rng.integers(mdp.num_outputs, size=n))
    adv = rng.standard_normal((n, mdp.horizon))
    # a wide band keeps every ratio away from the clip kinks, where the surrogate is not differentiable
    _, grad = ppo_objective_and_grad(policy, old, batch, adv, 10.0)
    num = central_difference(lambda x: ppo_objective_and_grad(policy.with_logits(x), old, batch, adv, 10.0)[0],
                             policy.logits)
    return grad, num


CHECKS: dict[tuple[str, str], Callable[[int], tuple[np.ndarray, np.ndarray]]] = {
    ("reward_model", "mse_loss_and_grad"): _check_mse,
    ("reward_model", "bt_nll_and_grad"): _check_bt,
    ("policy_opt", "sft_gradient"): _check_sft,
    ("policy_opt", "exact_policy_gradient"): _check_pg,
    ("policy_opt", "exact_policy_gradient[kl]"): _check_kl_pg,
    ("policy_opt", "ppo_objective_and_grad"): _check_ppo,
}


def run_gradchecks(seed: int = 0, num_instances: int = 20, tol: float = DEFAULT_TOL) -> list[GradCheckResult]:
    results = []
    for (module, op), check in CHECKS.items():
        for i in range(num_instances):
            analytic, numeric = check(seed * 1000 + i)
            err, worst = relative_error(analytic, numeric)
            results.append(GradCheckResult(module, op, i, err, worst, err <= tol))
    return results
