"""Policy optimization on the generation MDP.

Everything here operates on tabular softmax policies. Gradients are taken
with respect to the logits, where ``d log pi(a|s) / d logits[s] = e_a - pi(.|s)``.

The KL penalty toward the reference policy is folded into the reward: each
generated token costs ``beta * (log pi(a|s) - log pi_pre(a|s))``. Under that
shaping the return of a trajectory has expectation ``J(pi) - beta * KL(pi || pi_pre)``,
whose maximizer is ``pi(o|c) ~ pi_pre(o|c) * exp(R(c, o) / beta)``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .csvio import write_csv
from .errors import ContractViolation, TrainingError
from .mdp import GenerationMdp, sample_outputs
from .oracle import exact_performance, reward_table
from .policy import Policy, output_log_probs, policy_from_output_logprobs, state_visit_probs

ALGORITHMS = ("sft", "vanilla_pg", "ppo")
BASELINES = ("none", "exact_value", "learned_value")


@dataclass(frozen=True)
class OptimConfig:
    algorithm: str = "ppo"
    step_size: float = 1.0
    batch_size: int = 64
    num_iters: int = 1000
    beta: float = 1.0
    clip_eps: float = 0.2
    baseline: str = "exact_value"
    seed: int = 0
    critic_step_size: float = 0.5

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ContractViolation(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.baseline not in BASELINES:
            raise ContractViolation(f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        if not self.step_size >= 0:
            raise ContractViolation("step_size must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.num_iters < 0:
            raise ContractViolation("num_iters must be >= 0")
        if not self.beta > 0:
            raise ContractViolation("beta must be > 0")
        if not self.clip_eps > 0:
            raise ContractViolation("clip_eps must be > 0")


@dataclass(frozen=True, eq=False)
class ValueFunction:
    """Exact state values with the one-step lookahead ``Q`` table.

    ``state_values`` covers non-terminal states ``(C, S)``;
    ``terminal_values`` is identically zero because the terminal reward is paid
    on the step that enters the terminal state.
    """

    state_values: np.ndarray
    q_values: np.ndarray
    terminal_values: np.ndarray

    @property
    def advantages(self) -> np.ndarray:
        return self.q_values - self.state_values[..., None]

    def initial_values(self) -> np.ndarray:
        return self.state_values[:, 0]


def _expect(probs: np.ndarray, q: np.ndarray) -> np.ndarray:
    # shift by the row max so a constant row yields its constant exactly
    m = q.max(axis=-1, keepdims=True)
    return m[..., 0] + (probs * (q - m)).sum(axis=-1)


def token_costs(policy: Policy, pre: Policy | None, kl_coef: float) -> np.ndarray:
    """Per-(state, token) shaping cost ``kl_coef * (log pi - log pi_pre)``."""
    if pre is None or kl_coef == 0:
        return np.zeros_like(policy.logits)
    return kl_coef * (policy.log_probs - pre.log_probs)


def exact_value(
    mdp: GenerationMdp, policy: Policy, r, pre: Policy | None = None, kl_coef: float = 0.0
) -> ValueFunction:
    """Backward induction over the prefix tree.

    ``Q(s, a)`` is the (shaped) immediate reward of the step plus the value of
    the successor state; on the last step the successor is terminal and the
    immediate reward includes ``R(c, o)``.
    """
    table = reward_table(r, mdp)
    policy.check_shape(mdp)
    C, V, T, off = mdp.num_contexts, mdp.vocab_size, mdp.horizon, mdp.depth_offsets
    cost = token_costs(policy, pre, kl_coef)
    values = np.empty((C, mdp.num_states))
    q = np.empty((C, mdp.num_states, V))
    nxt = table
    for t in range(T - 1, -1, -1):
        block = slice(off[t], off[t + 1])
        q[:, block, :] = nxt.reshape(C, V**t, V) - cost[:, block, :]
        values[:, block] = _expect(policy.probs[:, block, :], q[:, block, :])
        nxt = values[:, block]
    return ValueFunction(values, q, np.zeros((C, mdp.num_outputs)))


def kl_to_pre(
    mdp: GenerationMdp, policy: Policy, pre: Policy, context_dist: np.ndarray | None = None
) -> float:
    """``E_{c ~ d_C} KL(pi(.|c) || pi_pre(.|c))`` over whole outputs."""
    d = mdp.dist if context_dist is None else np.asarray(context_dist, dtype=float)
    lp, lq = output_log_probs(mdp, policy), output_log_probs(mdp, pre)
    p = np.exp(lp)
    terms = np.where(p > 0, p * (lp - lq), 0.0)
    return float(max(d @ terms.sum(axis=1), 0.0))


def per_state_kl(policy: Policy, pre: Policy) -> np.ndarray:
    """``KL(pi(.|s) || pi_pre(.|s))`` for every non-terminal state, shape ``(C, S)``."""
    p = policy.probs
    return np.where(p > 0, p * (policy.log_probs - pre.log_probs), 0.0).sum(axis=-1)


def closed_form_policy(
    mdp: GenerationMdp, pre: Policy, r, beta: float, role: str = "rlhf"
) -> Policy:
    """Maximizer of ``J(pi) - beta * KL(pi || pi_pre)``: ``pi ~ pi_pre * exp(R / beta)``.

    The tilted output distribution is built in log space and factored back into
    per-state logits.
    """
    if not beta > 0:
        raise ContractViolation(f"beta must be > 0, got {beta}")
    table = reward_table(r, mdp)
    log_target = output_log_probs(mdp, pre) + table / beta
    log_target = log_target - logsumexp(log_target, axis=1, keepdims=True)
    return policy_from_output_logprobs(mdp, log_target, role)


def regularized_objective(mdp: GenerationMdp, policy: Policy, r, pre: Policy, beta: float) -> float:
    return exact_performance(mdp, policy, r) - beta * kl_to_pre(mdp, policy, pre)


def exact_policy_gradient(
    mdp: GenerationMdp,
    policy: Policy,
    r,
    pre: Policy | None = None,
    kl_coef: float = 0.0,
    context_dist: np.ndarray | None = None,
) -> np.ndarray:
    """Analytic gradient of ``J(pi) - kl_coef * KL(pi || pi_pre)`` w.r.t. the logits.

    ``d/d logits[c, s, a] = Pr(reach s) * pi(a|s) * A(s, a)``.
    """
    vf = exact_value(mdp, policy, r, pre, kl_coef)
    reach = state_visit_probs(mdp, policy, context_dist)
    return reach[..., None] * policy.probs * vf.advantages


# -- sample-based gradient estimators -----------------------------------------


@dataclass(frozen=True, eq=False)
class Batch:
    """Rollouts with the state and token visited at each step, shape ``(n, T)``."""

    contexts: np.ndarray
    outputs: np.ndarray
    states: np.ndarray
    tokens: np.ndarray

    @classmethod
    def from_outputs(cls, mdp: GenerationMdp, contexts, outputs) -> Batch:
        contexts = np.asarray(contexts, dtype=np.int64)
        outputs = np.asarray(outputs, dtype=np.int64)
        return cls(contexts, outputs, mdp.output_states[outputs], mdp.output_tokens[outputs])

    def __len__(self) -> int:
        return len(self.contexts)


def score_pullback(policy: Policy, batch: Batch, weights: np.ndarray) -> np.ndarray:
    """``(1/n) sum_i sum_t weights[i, t] * d log pi(a_it | s_it) / d logits``."""
    n = len(batch)
    ctx = np.broadcast_to(batch.contexts[:, None], batch.states.shape)
    grad = np.zeros_like(policy.logits)
    w = np.asarray(weights, dtype=float) / n
    np.add.at(grad, (ctx, batch.states), -w[..., None] * policy.probs[ctx, batch.states])
    np.add.at(grad, (ctx, batch.states, batch.tokens), w)
    return grad


def _parse_demos(mdp: GenerationMdp, demos) -> Batch:
    if len(demos) == 0:
        raise ContractViolation("demonstration set is empty")
    contexts, outputs = [], []
    for c, o in demos:
        contexts.append(int(c))
        outputs.append(int(o) if isinstance(o, (int, np.integer)) else mdp.output_index(o))
    return Batch.from_outputs(mdp, contexts, outputs)


def sft_objective(mdp: GenerationMdp, policy: Policy, demos) -> float:
    """Mean log-likelihood of the demonstrations."""
    batch = demos if isinstance(demos, Batch) else _parse_demos(mdp, demos)
    return float(output_log_probs(mdp, policy)[batch.contexts, batch.outputs].mean())


def sft_gradient(mdp: GenerationMdp, policy: Policy, demos) -> np.ndarray:
    batch = demos if isinstance(demos, Batch) else _parse_demos(mdp, demos)
    return score_pullback(policy, batch, np.ones(batch.states.shape))


def sft_update(mdp: GenerationMdp, policy: Policy, demos, alpha: float) -> Policy:
    """One ascent step on the demonstrations' mean log-likelihood."""
    if alpha == 0:
        return policy
    return policy.with_logits(policy.logits + alpha * sft_gradient(mdp, policy, demos))


def returns_to_go(batch: Batch, table: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """Shaped return from each step onward, shape ``(n, T)``."""
    step_rewards = -cost[batch.contexts[:, None], batch.states, batch.tokens]
    step_rewards[:, -1] += table[batch.contexts, batch.outputs]
    return np.cumsum(step_rewards[:, ::-1], axis=1)[:, ::-1]


def reinforce_gradient(
    policy: Policy, batch: Batch, returns: np.ndarray, baselines: np.ndarray | None = None
) -> np.ndarray:
    """Score-function estimate ``mean_i sum_t (G_it - b(s_it)) grad log pi(a_it | s_it)``.

    ``returns`` is either per-trajectory ``(n,)`` or per-step ``(n, T)``.
    """
    g = np.asarray(returns, dtype=float)
    if g.ndim == 1:
        g = np.broadcast_to(g[:, None], batch.states.shape)
    w = g if baselines is None else g - baselines
    return score_pullback(policy, batch, w)


@dataclass(frozen=True, eq=False)
class ValueCritic:
    """Tabular state-value estimate trained by regression onto sampled returns."""

    values: np.ndarray

    @classmethod
    def zeros(cls, mdp: GenerationMdp) -> ValueCritic:
        return cls(np.zeros((mdp.num_contexts, mdp.num_states)))

    def at(self, batch: Batch) -> np.ndarray:
        return self.values[batch.contexts[:, None], batch.states]

    def fit_step(self, batch: Batch, returns: np.ndarray, step_size: float) -> ValueCritic:
        """Move each visited state's value toward the mean return observed there."""
        ctx = np.broadcast_to(batch.contexts[:, None], batch.states.shape)
        sums = np.zeros_like(self.values)
        counts = np.zeros_like(self.values)
        np.add.at(sums, (ctx, batch.states), returns)
        np.add.at(counts, (ctx, batch.states), 1.0)
        seen = counts > 0
        new = self.values.copy()
        new[seen] += step_size * (sums[seen] / counts[seen] - new[seen])
        return ValueCritic(new)


@dataclass(frozen=True, eq=False)
class UpdateDiagnostics:
    batch: Batch
    gradient: np.ndarray
    rewards: np.ndarray
    loss: float
    critic: ValueCritic | None = None
    objective_after: float | None = None


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _check_finite(grad: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(grad)):
        raise TrainingError(f"{what} produced a non-finite gradient")


def pg_update(
    policy: Policy,
    mdp: GenerationMdp,
    r,
    config: OptimConfig,
    rng=None,
    critic: ValueCritic | None = None,
    context_dist: np.ndarray | None = None,
) -> tuple[Policy, UpdateDiagnostics]:
    """One vanilla policy-gradient (REINFORCE) step on a fresh rollout batch.

    With ``baseline="exact_value"`` the per-step baseline is the exact value of
    the visited state under the current policy; with ``"learned_value"`` it is
    ``critic`` (refit on the batch afterwards and returned in the diagnostics).
    """
    table = reward_table(r, mdp)
    rng = _rng(config.seed if rng is None else rng)
    contexts, outputs = sample_outputs(mdp, policy, config.batch_size, rng, context_dist)
    batch = Batch.from_outputs(mdp, contexts, outputs)
    rewards = table[contexts, outputs]
    returns = np.broadcast_to(rewards[:, None], batch.states.shape)
    baselines = None
    if config.baseline == "exact_value":
        vf = exact_value(mdp, policy, table)
        baselines = vf.state_values[contexts[:, None], batch.states]
    elif config.baseline == "learned_value":
        critic = critic or ValueCritic.zeros(mdp)
        baselines = critic.at(batch)
        critic = critic.fit_step(batch, returns, config.critic_step_size)
    grad = reinforce_gradient(policy, batch, returns, baselines)
    _check_finite(grad, "policy gradient")
    new = policy.with_logits(policy.logits + config.step_size * grad)
    return new, UpdateDiagnostics(batch, grad, rewards, float(-rewards.mean()), critic)


def ppo_objective_and_grad(
    policy: Policy,
    old_policy: Policy,
    batch: Batch,
    advantages: np.ndarray,
    clip_eps: float | None,
) -> tuple[float, np.ndarray]:
    """Clipped surrogate ``mean_i sum_t min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)``.

    ``clip_eps=None`` gives the unclipped surrogate ``ratio * A``.
    """
    ctx = batch.contexts[:, None]
    ratio = np.exp(policy.log_probs[ctx, batch.states, batch.tokens] - old_policy.log_probs[ctx, batch.states, batch.tokens])
    unclipped = ratio * advantages
    if clip_eps is None:
        surrogate = unclipped
        active = np.ones_like(ratio, dtype=bool)
    else:
        clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
        surrogate = np.minimum(unclipped, clipped)
        # the gradient flows only where the unclipped branch attains the min
        active = unclipped <= clipped
    n = len(batch)
    value = float(surrogate.sum() / n)
    grad = score_pullback(policy, batch, np.where(active, unclipped, 0.0))
    return value, grad


def ppo_advantages(
    mdp: GenerationMdp,
    policy: Policy,
    batch: Batch,
    table: np.ndarray,
    pre: Policy,
    config: OptimConfig,
    critic: ValueCritic | None = None,
) -> tuple[np.ndarray, np.ndarray, ValueCritic | None]:
    """Per-step advantage estimates and shaped returns for a batch.

    With a value function the estimate is the one-step residual
    ``r_t + V(s_{t+1}) - V(s_t)``; with an exact ``V`` this equals ``A(s_t, a_t)``
    because transitions are deterministic. Without one it is the return-to-go.
    """
    cost = token_costs(policy, pre, config.beta)
    returns = returns_to_go(batch, table, cost)
    if config.baseline == "none":
        return returns, returns, critic
    if config.baseline == "exact_value":
        values = exact_value(mdp, policy, table, pre, config.beta).state_values[batch.contexts[:, None], batch.states]
    else:
        critic = critic or ValueCritic.zeros(mdp)
        values = critic.at(batch)
        critic = critic.fit_step(batch, returns, config.critic_step_size)
    step_rewards = -cost[batch.contexts[:, None], batch.states, batch.tokens]
    step_rewards[:, -1] += table[batch.contexts, batch.outputs]
    next_values = np.concatenate([values[:, 1:], np.zeros((len(batch), 1))], axis=1)
    return step_rewards + next_values - values, returns, critic


def ppo_update(
    policy: Policy,
    old_policy: Policy,
    mdp: GenerationMdp,
    r,
    pre: Policy,
    config: OptimConfig,
    rng=None,
    critic: ValueCritic | None = None,
    context_dist: np.ndarray | None = None,
) -> tuple[Policy, UpdateDiagnostics]:
    """One PPO-clip step: rollouts from ``old_policy``, one ascent step on the surrogate.

    The effective reward is ``R`` minus the per-token KL cost toward ``pre``.
    """
    if not 0 < config.clip_eps:
        raise ContractViolation("clip_eps must be > 0")
    table = reward_table(r, mdp)
    rng = _rng(config.seed if rng is None else rng)
    contexts, outputs = sample_outputs(mdp, old_policy, config.batch_size, rng, context_dist)
    batch = Batch.from_outputs(mdp, contexts, outputs)
    adv, _, critic = ppo_advantages(mdp, old_policy, batch, table, pre, config, critic)
    value, grad = ppo_objective_and_grad(policy, old_policy, batch, adv, config.clip_eps)
    if not np.isfinite(value):
        raise TrainingError("PPO surrogate is non-finite")
    _check_finite(grad, "PPO surrogate")
    new = policy.with_logits(policy.logits + config.step_size * grad)
    after, _ = ppo_objective_and_grad(new, old_policy, batch, adv, config.clip_eps)
    return new, UpdateDiagnostics(batch, grad, table[contexts, outputs], -value, critic, after)


# -- training loops -------------------------------------------------------------


@dataclass(frozen=True)
class DiagnosticsRow:
    iter: int
    j_exact: float
    j_hat: float
    kl_to_pre: float
    loss: float


DIAGNOSTICS_HEADER = ("iter", "J_exact", "J_hat", "KL_to_pre", "loss")


def train_policy(
    mdp: GenerationMdp,
    r,
    pre: Policy,
    config: OptimConfig,
    eval_reward=None,
    init: Policy | None = None,
    context_dist: np.ndarray | None = None,
    log_every: int = 0,
) -> tuple[Policy, list[DiagnosticsRow]]:
    """Run ``vanilla_pg`` or ``ppo`` for ``config.num_iters`` iterations from ``init`` (default ``pre``).

    ``r`` is the training reward; ``eval_reward`` (default ``r``) is what
    ``J_exact`` reports. Diagnostics are recorded every ``log_every`` iterations
    and at the end (``0`` means only at the end).
    """
    if config.algorithm == "sft":
        raise ContractViolation("use train_sft for the sft algorithm")
    eval_reward = r if eval_reward is None else eval_reward
    policy = (init or pre).with_logits((init or pre).logits, role="rlhf")
    rng = np.random.default_rng(config.seed)
    critic = None
    history: list[DiagnosticsRow] = []
    loss = float("nan")
    for it in range(config.num_iters):
        if config.algorithm == "ppo":
            policy, diag = ppo_update(policy, policy, mdp, r, pre, config, rng, critic, context_dist)
        else:
            policy, diag = pg_update(policy, mdp, r, config, rng, critic, context_dist)
        critic, loss = diag.critic, diag.loss
        if log_every and (it + 1) % log_every == 0 and it + 1 != config.num_iters:
            history.append(_diag_row(mdp, it + 1, policy, r, eval_reward, pre, loss))
    history.append(_diag_row(mdp, config.num_iters, policy, r, eval_reward, pre, loss))
    return policy, history


def train_sft(
    mdp: GenerationMdp, init: Policy, demos, alpha: float, num_iters: int
) -> tuple[Policy, list[float]]:
    """Full-batch SFT; returns the policy and the mean log-likelihood after each step."""
    batch = _parse_demos(mdp, demos)
    policy, trace = init.with_logits(init.logits, role="rlhf"), []
    for _ in range(num_iters):
        policy = sft_update(mdp, policy, batch, alpha)
        trace.append(sft_objective(mdp, policy, batch))
    return policy, trace


def _diag_row(mdp, it, policy, r, eval_reward, pre, loss) -> DiagnosticsRow:
    return DiagnosticsRow(
        it,
        exact_performance(mdp, policy, eval_reward),
        exact_performance(mdp, policy, r),
        kl_to_pre(mdp, policy, pre),
        loss,
    )


def save_diagnostics(rows: Sequence[DiagnosticsRow], path: str | os.PathLike) -> None:
    write_csv(path, DIAGNOSTICS_HEADER, ((d.iter, d.j_exact, d.j_hat, d.kl_to_pre, d.loss) for d in rows))


def total_variation(mdp: GenerationMdp, p: Policy, q: Policy) -> np.ndarray:
    """Per-context total variation between output distributions, shape ``(C,)``."""
    a, b = np.exp(output_log_probs(mdp, p)), np.exp(output_log_probs(mdp, q))
    return 0.5 * np.abs(a - b).sum(axis=1)
