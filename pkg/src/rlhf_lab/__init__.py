"""Tabular laboratory for RLHF on small text-generation MDPs."""

from .errors import ContractViolation, RlhfLabError, SizeError, TrainingError
from .mdp import GenerationMdp, StateRef, Trajectory, enumerate_outputs, rollout, sample_outputs
from .policy import Policy, output_log_probs, output_probs, state_visit_probs
from .oracle import (
    OracularReward,
    RewardSpec,
    evaluate,
    exact_performance,
    estimated_performance,
    make_reward,
    mc_performance,
)
from .feedback import (
    CoverageStats,
    FeedbackDataset,
    PreferenceDatum,
    RatingDatum,
    collect_preferences,
    collect_ratings,
    compute_coverage,
    ranking_to_pairs,
    sample_preference,
)
from .reward_model import FeatureMapSpec, RewardModel, TrainConfig, predict, train
from .policy_opt import (
    OptimConfig,
    closed_form_policy,
    exact_policy_gradient,
    exact_value,
    kl_to_pre,
    pg_update,
    ppo_update,
    sft_update,
    total_variation,
    train_policy,
    train_sft,
)
from .analysis import GapReport, SweepResult, beta_sweep, coverage_sweep, performance_gap, sft_vs_pg

__version__ = "0.1.0"
