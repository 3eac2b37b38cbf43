"""End-to-end pipeline driven by an :class:`ExperimentConfig`.

Stages run in order: build the MDP and oracle, synthesize feedback, fit the
reward model, train a policy against it, and compare against the closed-form
optimum for the oracular reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import (
    CoverageSweepConfig,
    GapReport,
    SweepResult,
    beta_sweep,
    coverage_sweep,
    performance_gap,
    save_sweep,
)
from .config import ExperimentConfig
from .csvio import write_csv, write_text_atomic
from .feedback import FeedbackDataset, collect_preferences, collect_ratings, save_dataset
from .mdp import GenerationMdp
from .oracle import OracularReward, RewardSpec, exact_performance, make_reward, save_reward
from .policy import Policy, save_policy
from .policy_opt import OptimConfig, save_diagnostics, train_policy, train_sft
from .reward_model import (
    FeatureMapSpec,
    RewardModel,
    TrainConfig,
    generalization_report,
    save_reward_model,
    train,
)

ARTIFACTS = (
    "oracle_reward.csv",
    "feedback.csv",
    "reward_model.csv",
    "policy.csv",
    "training.csv",
    "gap_report.csv",
)

GAP_HEADER = (
    "j_star", "j_rlhf", "delta_j", "in_dist_contribution", "ood_contribution",
    "eval_contexts", "ood_contexts", "unnormalized_ood_term",
    "trained_j", "trained_delta_j", "kappa", "in_dist_mse", "ood_mse",
)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage `{stage}` failed: {cause}")
        self.stage = stage


def build_mdp(cfg: ExperimentConfig) -> GenerationMdp:
    m = cfg.mdp
    if m.context_dist == "uniform":
        return GenerationMdp.uniform(m.vocab_size, m.horizon, m.num_contexts)
    return GenerationMdp(m.vocab_size, m.horizon, tuple(m.context_dist))


def build_oracle(cfg: ExperimentConfig, mdp: GenerationMdp) -> OracularReward:
    o = cfg.oracle
    spec = RewardSpec(o.kind, o.mean, o.std, o.seed, o.token, o.bonus,
                      None if o.targets is None else tuple(o.targets), o.match_value)
    return make_reward(mdp, spec)


def build_pre(cfg: ExperimentConfig, mdp: GenerationMdp) -> Policy:
    return Policy.random(mdp, cfg.policy.seed + 1000, cfg.policy.pre_scale, role="pre")


def covered_contexts(mdp: GenerationMdp, kappa: float, seed: int) -> list[int]:
    order = np.random.default_rng(seed).permutation(mdp.num_contexts)
    return sorted(int(c) for c in order[: math.ceil(kappa * mdp.num_contexts - 1e-9)])


def synthesize_feedback(cfg: ExperimentConfig, mdp: GenerationMdp, oracle: OracularReward) -> FeedbackDataset:
    f = cfg.feedback
    contexts = covered_contexts(mdp, f.kappa, f.seed)
    n_out = f.outputs_per_context
    if f.mode == "ratings":
        return collect_ratings(mdp, oracle, contexts, mdp.num_outputs if n_out is None else n_out, f.seed)
    return collect_preferences(mdp, oracle, contexts, f.preference_samples, f.seed,
                               outputs_per_context=n_out, mode=f.mode)


def reward_train_config(cfg: ExperimentConfig) -> TrainConfig:
    r = cfg.reward_model
    return TrainConfig(r.objective, r.step_size, r.num_epochs, r.l2_weight, r.seed, r.convergence_tol)


def fit_reward_model(cfg: ExperimentConfig, mdp: GenerationMdp, data: FeedbackDataset) -> RewardModel:
    r = cfg.reward_model
    model = RewardModel.tabular(mdp) if r.model_class == "tabular" else RewardModel.linear(mdp, FeatureMapSpec(r.feature_kind))
    trained, _ = train(model, data, reward_train_config(cfg))
    return trained


def optim_config(cfg: ExperimentConfig) -> OptimConfig:
    p = cfg.policy
    return OptimConfig(p.algorithm, p.step_size, p.batch_size, p.num_iters, p.beta, p.clip_eps,
                       p.baseline, p.seed, p.critic_step_size)


def best_demos(mdp: GenerationMdp, data: FeedbackDataset) -> list[tuple[int, int]]:
    """Highest-rated (or most-preferred) output of each covered context."""
    score: dict[tuple[int, int], float] = {}
    for d in data.ratings:
        score[(d.context, d.output)] = d.rating
    for p in data.preferences:
        score[(p.context, p.winner)] = score.get((p.context, p.winner), 0.0) + 1.0
        score.setdefault((p.context, p.loser), 0.0)
    best: dict[int, tuple[float, int]] = {}
    for (c, o), s in sorted(score.items()):
        if c not in best or s > best[c][0]:
            best[c] = (s, o)
    return [(c, o) for c, (_, o) in sorted(best.items())]


@dataclass
class RunResult:
    mdp: GenerationMdp
    oracle: OracularReward
    pre: Policy
    feedback: FeedbackDataset
    reward_model: RewardModel
    policy: Policy
    gap: GapReport
    output_dir: Path


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # reported with the stage that failed
        raise StageError(name, exc) from exc


def run_pipeline(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> RunResult:
    out = Path(output_dir or cfg.output_dir)
    mdp = _stage("build_mdp", build_mdp, cfg)
    oracle = _stage("build_oracle", build_oracle, cfg, mdp)
    pre = _stage("build_pre", build_pre, cfg, mdp)
    data = _stage("feedback", synthesize_feedback, cfg, mdp, oracle)
    model = _stage("reward_model", fit_reward_model, cfg, mdp, data)

    def _policy():
        ocfg = optim_config(cfg)
        if ocfg.algorithm == "sft":
            policy, trace = train_sft(mdp, pre, best_demos(mdp, data), ocfg.step_size, ocfg.num_iters)
            from .policy_opt import DiagnosticsRow, kl_to_pre
            rows = [DiagnosticsRow(ocfg.num_iters, exact_performance(mdp, policy, oracle),
                                   exact_performance(mdp, policy, model), kl_to_pre(mdp, policy, pre),
                                   -trace[-1] if trace else float("nan"))]
            return policy, rows
        return train_policy(mdp, model, pre, ocfg, eval_reward=oracle, log_every=cfg.policy.log_every)

    policy, history = _stage("policy", _policy)
    covered = sorted(data.covered_contexts)
    gap = _stage("gap_report", performance_gap, mdp, oracle, model, pre, cfg.policy.beta, None, covered)
    gen = generalization_report(model, oracle, data, mdp)

    def _write():
        write_text_atomic(out / "config.json", cfg.to_json())
        save_reward(oracle, out / "oracle_reward.csv")
        save_dataset(data, out / "feedback.csv")
        save_reward_model(model, out / "reward_model.csv")
        save_policy(policy, out / "policy.csv")
        save_diagnostics(history, out / "training.csv")
        trained_j = exact_performance(mdp, policy, oracle)
        write_csv(out / "gap_report.csv", GAP_HEADER, [(
            gap.j_star, gap.j_rlhf, gap.delta_j, gap.in_dist_contribution, gap.ood_contribution,
            " ".join(map(str, sorted(gap.eval_contexts))), " ".join(map(str, sorted(gap.ood_contexts))),
            gap.unnormalized_ood_term, trained_j, abs(gap.j_star - trained_j),
            cfg.feedback.kappa, gen.in_dist_mse, gen.ood_mse,
        )])

    _stage("write_artifacts", _write)
    return RunResult(mdp, oracle, pre, data, model, policy, gap, out)


def sweep_config(cfg: ExperimentConfig) -> CoverageSweepConfig:
    r, f = cfg.reward_model, cfg.feedback
    return CoverageSweepConfig(
        beta=cfg.policy.beta,
        model_class=r.model_class,
        feature_kind=r.feature_kind,
        outputs_per_context=f.outputs_per_context,
        samples_per_pair=f.preference_samples,
        train=reward_train_config(cfg),
    )


def _kappa_cell(args) -> SweepResult:
    cfg, grid, seed = args
    mdp = build_mdp(cfg)
    return coverage_sweep(mdp, build_oracle(cfg, mdp), grid, sweep_config(cfg), [seed], build_pre(cfg, mdp))


def run_sweep(cfg: ExperimentConfig, axis: str, grid: list[float] | None = None,
              output_dir: str | Path | None = None, jobs: int = 1) -> SweepResult:
    """Run a ``kappa`` or ``beta`` sweep and write its CSVs plus the frozen config."""
    out = Path(output_dir or cfg.output_dir)
    mdp = _stage("build_mdp", build_mdp, cfg)
    oracle = _stage("build_oracle", build_oracle, cfg, mdp)
    pre = _stage("build_pre", build_pre, cfg, mdp)
    if axis == "kappa":
        grid = list(cfg.analysis.kappa_grid if grid is None else grid)
        seeds = list(cfg.analysis.seeds)
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            from .analysis import _aggregate

            def _parallel():
                with ProcessPoolExecutor(max_workers=jobs) as pool:
                    parts = list(pool.map(_kappa_cell, [(cfg, grid, s) for s in seeds]))
                return _aggregate("kappa", [row for p in parts for row in p.rows], grid, seeds)

            result = _stage("sweep", _parallel)
        else:
            result = _stage("sweep", coverage_sweep, mdp, oracle, grid, sweep_config(cfg), seeds, pre)
    elif axis == "beta":
        grid = list(cfg.analysis.beta_grid if grid is None else grid)
        data = _stage("feedback", synthesize_feedback, cfg, mdp, oracle)
        model = _stage("reward_model", fit_reward_model, cfg, mdp, data)
        gen = generalization_report(model, oracle, data, mdp)
        covered = sorted(data.covered_contexts)
        result = _stage("sweep", beta_sweep, mdp, oracle, model, pre, grid, None, covered, gen.ood_mse)
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")

    def _write():
        write_text_atomic(out / f"sweep_{axis}_config.json", cfg.to_json())
        save_sweep(result, out / f"sweep_{axis}_rows.csv", out / f"sweep_{axis}.csv")

    _stage("write_artifacts", _write)
    return result
