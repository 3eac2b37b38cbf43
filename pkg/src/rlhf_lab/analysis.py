"""Misalignment measurements built on closed-form KL-regularized policies.

``pi*`` is the optimum for the oracular reward and ``pi_rlhf`` the optimum for
a learned reward, both regularized toward the same reference policy with the
same ``beta``. Their performance gap under the oracular reward isolates the
damage done by reward-model error, free of optimizer noise.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .csvio import write_csv
from .errors import ContractViolation
from .feedback import collect_preferences, collect_ratings
from .mdp import GenerationMdp
from .oracle import OracularReward, exact_performance, reward_table
from .policy import Policy, output_log_probs
from .policy_opt import OptimConfig, closed_form_policy, kl_to_pre, train_policy, train_sft
from .reward_model import FeatureMapSpec, RewardModel, TrainConfig, generalization_report, train


@dataclass(frozen=True)
class GapReport:
    """Performance of ``pi*`` and ``pi_rlhf`` under the oracular reward.

    ``in_dist_contribution + ood_contribution == j_star - j_rlhf``; the split
    is by whether a context carried feedback. ``unnormalized_ood_term`` is
    ``sum d(c) pi_pre(o|c) |exp(R*/beta) - exp(R_phi/beta)| |R*|`` over
    uncovered contexts, a bound-style quantity that skips the partition
    functions; reported for comparison only.
    """

    j_star: float
    j_rlhf: float
    delta_j: float
    in_dist_contribution: float
    ood_contribution: float
    eval_contexts: frozenset[int]
    ood_contexts: frozenset[int]
    unnormalized_ood_term: float


def _context_weights(mdp: GenerationMdp, eval_dist) -> np.ndarray:
    d = mdp.dist if eval_dist is None else np.asarray(eval_dist, dtype=float)
    if d.shape != (mdp.num_contexts,) or np.any(d < 0) or abs(d.sum() - 1) > 1e-12:
        raise ContractViolation("eval_dist must be a probability vector over the MDP's contexts")
    return d


def performance_gap(
    mdp: GenerationMdp,
    oracle: OracularReward,
    reward_model,
    pre: Policy,
    beta: float,
    eval_dist: np.ndarray | None = None,
    covered_contexts: Sequence[int] | None = None,
) -> GapReport:
    """``|J(pi*) - J(pi_rlhf)|`` with both policies in closed form.

    ``covered_contexts`` is ``C_rew``, the contexts that carried feedback
    (default: all of them). ``eval_dist`` defaults to the MDP's context
    distribution; its support is ``C_eval``.
    """
    d = _context_weights(mdp, eval_dist)
    r_star = reward_table(oracle, mdp)
    r_phi = reward_table(reward_model, mdp)
    pi_star = closed_form_policy(mdp, pre, r_star, beta, role="star")
    pi_rlhf = closed_form_policy(mdp, pre, r_phi, beta, role="rlhf")
    p_star = np.exp(output_log_probs(mdp, pi_star))
    p_rlhf = np.exp(output_log_probs(mdp, pi_rlhf))
    per_context = d * ((p_star - p_rlhf) * r_star).sum(axis=1)

    eval_ctx = frozenset(int(c) for c in np.flatnonzero(d > 0))
    rew_ctx = frozenset(mdp.contexts) if covered_contexts is None else frozenset(int(c) for c in covered_contexts)
    ood_ctx = eval_ctx - rew_ctx
    ood_mask = np.zeros(mdp.num_contexts, dtype=bool)
    ood_mask[list(ood_ctx)] = True

    j_star = exact_performance(mdp, pi_star, r_star, d)
    j_rlhf = exact_performance(mdp, pi_rlhf, r_star, d)
    p_pre = np.exp(output_log_probs(mdp, pre))
    tilt_gap = np.abs(np.exp(r_star / beta) - np.exp(r_phi / beta)) * np.abs(r_star)
    unnormalized_term = float((d[:, None] * p_pre * tilt_gap)[ood_mask].sum())
    return GapReport(
        j_star=j_star,
        j_rlhf=j_rlhf,
        delta_j=abs(j_star - j_rlhf),
        in_dist_contribution=float(per_context[~ood_mask].sum()),
        ood_contribution=float(per_context[ood_mask].sum()),
        eval_contexts=eval_ctx,
        ood_contexts=ood_ctx,
        unnormalized_ood_term=unnormalized_term,
    )


# -- sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    seed: int | None
    delta_j: float
    j_star: float
    j_rlhf: float
    kl_to_pre: float
    ood_mse: float | None


@dataclass(frozen=True)
class SweepPoint:
    value: float
    delta_j_mean: float
    delta_j_stderr: float
    ood_mse_mean: float
    j_star_mean: float
    j_rlhf_mean: float
    kl_to_pre_mean: float
    num_seeds: int


@dataclass(frozen=True)
class SweepResult:
    axis: str
    points: tuple[SweepPoint, ...]
    seeds: tuple[int, ...]
    rows: tuple[SweepRow, ...] = field(repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(p, name) for p in self.points])


def _aggregate(axis: str, rows: Sequence[SweepRow], values: Sequence[float], seeds) -> SweepResult:
    points = []
    for v in values:
        cell = [r for r in rows if r.value == v]
        dj = np.array([r.delta_j for r in cell])
        ood = np.array([0.0 if r.ood_mse is None else r.ood_mse for r in cell])
        stderr = float(dj.std(ddof=1) / math.sqrt(len(dj))) if len(dj) > 1 else 0.0
        points.append(SweepPoint(
            float(v), float(dj.mean()), stderr, float(ood.mean()),
            float(np.mean([r.j_star for r in cell])), float(np.mean([r.j_rlhf for r in cell])),
            float(np.mean([r.kl_to_pre for r in cell])), len(cell),
        ))
    return SweepResult(axis, tuple(points), tuple(seeds), tuple(rows))


@dataclass(frozen=True)
class CoverageSweepConfig:
    """How each cell of a coverage sweep builds and fits its reward model.

    ``outputs_per_context=None`` rates (or compares) every output of a covered
    context. ``objective="bt_nll"`` uses preference feedback with
    ``samples_per_pair`` Bradley-Terry draws per output pair.
    """

    beta: float = 1.0
    model_class: str = "tabular"
    feature_kind: str = "token_counts"
    outputs_per_context: int | None = None
    samples_per_pair: int = 20
    train: TrainConfig = TrainConfig(objective="mse", step_size=0.25, num_epochs=500, convergence_tol=1e-12)


def _fit_reward(mdp, oracle, contexts, config: CoverageSweepConfig, seed: int):
    if config.train.objective == "mse":
        n_out = mdp.num_outputs if config.outputs_per_context is None else config.outputs_per_context
        data = collect_ratings(mdp, oracle, contexts, n_out, seed)
    else:
        data = collect_preferences(mdp, oracle, contexts, config.samples_per_pair, seed,
                                   outputs_per_context=config.outputs_per_context)
    if config.model_class == "tabular":
        model = RewardModel.tabular(mdp)
    else:
        model = RewardModel.linear(mdp, FeatureMapSpec(config.feature_kind))
    model, _ = train(model, data, config.train)
    return model, data


def coverage_sweep(
    mdp: GenerationMdp,
    oracle: OracularReward,
    grid: Sequence[float],
    config: CoverageSweepConfig,
    seeds: Sequence[int],
    pre: Policy | None = None,
    eval_dist: np.ndarray | None = None,
) -> SweepResult:
    """ΔJ and OOD reward error as the fraction of contexts with feedback grows.

    For each seed a random context ordering is drawn once; the point ``kappa``
    covers its first ``ceil(kappa * |C|)`` contexts, so coverage sets are nested
    across the grid.
    """
    grid = [float(k) for k in grid]
    if len(grid) < 2:
        raise ContractViolation("a sweep needs at least 2 grid points")
    if any(not 0 < k <= 1 for k in grid):
        raise ContractViolation("kappa grid values must lie in (0, 1]")
    if len(seeds) < 1:
        raise ContractViolation("need at least one seed")
    pre = Policy.uniform(mdp) if pre is None else pre
    rows = []
    for seed in seeds:
        order = np.random.default_rng(seed).permutation(mdp.num_contexts)
        for kappa in grid:
            contexts = sorted(int(c) for c in order[: math.ceil(kappa * mdp.num_contexts - 1e-9)])
            model, data = _fit_reward(mdp, oracle, contexts, config, seed)
            gap = performance_gap(mdp, oracle, model, pre, config.beta, eval_dist, contexts)
            pi_rlhf = closed_form_policy(mdp, pre, model, config.beta)
            gen = generalization_report(model, oracle, data, mdp)
            rows.append(SweepRow("kappa", kappa, int(seed), gap.delta_j, gap.j_star, gap.j_rlhf,
                                 kl_to_pre(mdp, pi_rlhf, pre), gen.ood_mse))
    return _aggregate("kappa", rows, grid, seeds)


def beta_sweep(
    mdp: GenerationMdp,
    oracle: OracularReward,
    reward_model,
    pre: Policy,
    grid: Sequence[float],
    eval_dist: np.ndarray | None = None,
    covered_contexts: Sequence[int] | None = None,
    ood_mse: float | None = None,
) -> SweepResult:
    """Closed-form ΔJ, ``J(pi*)``, ``J(pi_rlhf)`` and ``KL(pi_rlhf || pi_pre)`` per ``beta``."""
    grid = [float(b) for b in grid]
    if len(grid) < 2:
        raise ContractViolation("a sweep needs at least 2 grid points")
    if any(not b > 0 for b in grid):
        raise ContractViolation("beta grid values must be > 0")
    rows = []
    for beta in grid:
        gap = performance_gap(mdp, oracle, reward_model, pre, beta, eval_dist, covered_contexts)
        pi_rlhf = closed_form_policy(mdp, pre, reward_model, beta)
        rows.append(SweepRow("beta", beta, None, gap.delta_j, gap.j_star, gap.j_rlhf,
                             kl_to_pre(mdp, pi_rlhf, pre), ood_mse))
    return _aggregate("beta", rows, grid, ())


SWEEP_ROW_HEADER = ("sweep_axis", "value", "seed", "delta_j", "j_star", "j_rlhf", "kl_to_pre", "ood_mse")
SWEEP_POINT_HEADER = ("sweep_axis", "value", "num_seeds", "mean_delta_j", "stderr_delta_j",
                      "mean_ood_mse", "mean_j_star", "mean_j_rlhf", "mean_kl_to_pre")


def save_sweep(result: SweepResult, rows_path: str | os.PathLike, points_path: str | os.PathLike) -> None:
    write_csv(rows_path, SWEEP_ROW_HEADER, (
        (r.axis, r.value, r.seed, r.delta_j, r.j_star, r.j_rlhf, r.kl_to_pre, r.ood_mse) for r in result.rows))
    write_csv(points_path, SWEEP_POINT_HEADER, (
        (result.axis, p.value, p.num_seeds, p.delta_j_mean, p.delta_j_stderr, p.ood_mse_mean,
         p.j_star_mean, p.j_rlhf_mean, p.kl_to_pre_mean) for p in result.points))


# -- SFT versus policy gradient -----------------------------------------------


@dataclass(frozen=True)
class SftVsPgConfig:
    sft_step_size: float = 0.5
    sft_iters: int = 300
    pg: OptimConfig = OptimConfig(algorithm="vanilla_pg", step_size=2.0, batch_size=32, baseline="exact_value")


@dataclass(frozen=True)
class SftVsPgRow:
    seed: int
    method: str
    j_rew: float
    j_ood: float | None
    j_optimal_rew: float


def _restricted(mdp: GenerationMdp, contexts: Sequence[int]) -> np.ndarray | None:
    d = np.zeros(mdp.num_contexts)
    idx = list(contexts)
    d[idx] = mdp.dist[idx]
    if d.sum() == 0:
        return None
    return d / d.sum()


def sft_vs_pg(
    mdp: GenerationMdp,
    oracle: OracularReward,
    demo_budget: int,
    rollout_budget: int,
    seeds: Sequence[int],
    covered_contexts: Sequence[int],
    pre: Policy | None = None,
    config: SftVsPgConfig = SftVsPgConfig(),
) -> list[SftVsPgRow]:
    """Train by SFT on optimal demonstrations and by vanilla PG on ``R*``, both on ``C_rew``.

    Demonstrations pair a context drawn from ``d_C`` restricted to
    ``covered_contexts`` with that context's highest-reward output.
    ``rollout_budget`` counts PG rollouts, spent in batches of
    ``config.pg.batch_size``. Reports ``J`` on ``C_rew`` and on the remaining
    contexts (``None`` when every context is covered).
    """
    if demo_budget < 1 or rollout_budget < 1:
        raise ContractViolation("demo and rollout budgets must be >= 1")
    covered = sorted(int(c) for c in covered_contexts)
    d_rew = _restricted(mdp, covered)
    if d_rew is None:
        raise ContractViolation("covered contexts carry no probability mass")
    d_ood = _restricted(mdp, sorted(set(mdp.contexts) - set(covered)))
    pre = Policy.uniform(mdp) if pre is None else pre
    table = reward_table(oracle, mdp)
    best = table.argmax(axis=1)
    j_opt = float(d_rew @ table.max(axis=1))
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        demo_ctx = rng.choice(mdp.num_contexts, size=demo_budget, p=d_rew)
        demos = [(int(c), int(best[c])) for c in demo_ctx]
        sft_policy, _ = train_sft(mdp, pre, demos, config.sft_step_size, config.sft_iters)
        iters = max(1, rollout_budget // config.pg.batch_size)
        pg_cfg = OptimConfig(**{**config.pg.__dict__, "algorithm": "vanilla_pg", "num_iters": iters, "seed": int(seed)})
        pg_policy, _ = train_policy(mdp, table, pre, pg_cfg, context_dist=d_rew)
        for name, pol in (("sft", sft_policy), ("vanilla_pg", pg_policy)):
            j_ood = None if d_ood is None else exact_performance(mdp, pol, table, d_ood)
            rows.append(SftVsPgRow(int(seed), name, exact_performance(mdp, pol, table, d_rew), j_ood, j_opt))
    return rows
