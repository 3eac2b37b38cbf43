"""Experiment configuration: schema, loading, overrides, and freezing."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

SEED_ENV_VAR = "RLHF_LAB_SEED"

# per-section offsets so sections left unseeded draw independent streams
_SEED_OFFSETS = {"oracle": 0, "feedback": 1, "reward_model": 2, "policy": 3}


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dotted path."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"invalid config key `{key}`: {message}")
        self.key = key


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MdpSection(_Section):
    vocab_size: int = Field(ge=2)
    horizon: int = Field(ge=1)
    num_contexts: int = Field(ge=1)
    context_dist: Union[Literal["uniform"], List[float]] = "uniform"

    @field_validator("context_dist")
    @classmethod
    def _probabilities(cls, v):
        if isinstance(v, list):
            if any(p < 0 for p in v) or abs(sum(v) - 1.0) > 1e-12:
                raise ValueError("must be non-negative and sum to 1")
        return v


class OracleSection(_Section):
    kind: Literal["gaussian_random", "target_token", "prefix_match"] = "gaussian_random"
    mean: float = 0.0
    std: float = Field(1.0, ge=0)
    seed: Optional[int] = None
    token: int = Field(0, ge=0)
    bonus: float = 1.0
    targets: Optional[List[int]] = None
    match_value: float = 1.0


class FeedbackSection(_Section):
    mode: Literal["ratings", "bt_stochastic", "deterministic"] = "ratings"
    kappa: float = Field(1.0, gt=0, le=1)
    outputs_per_context: Optional[int] = Field(None, ge=1)
    preference_samples: int = Field(20, ge=1)
    seed: Optional[int] = None


class RewardModelSection(_Section):
    model_class: Literal["tabular", "linear"] = Field("tabular", alias="class")
    feature_kind: Literal["token_counts", "positional_onehot", "context_crossed"] = "token_counts"
    objective: Literal["mse", "bt_nll"] = "mse"
    step_size: float = Field(0.25, gt=0)
    num_epochs: int = Field(500, ge=1)
    l2_weight: float = Field(0.0, ge=0)
    seed: Optional[int] = None
    convergence_tol: float = Field(1e-12, gt=0)

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class PolicySection(_Section):
    algorithm: Literal["sft", "vanilla_pg", "ppo"] = "ppo"
    step_size: float = Field(1.0, ge=0)
    batch_size: int = Field(64, ge=1)
    num_iters: int = Field(500, ge=0)
    beta: float = Field(1.0, gt=0)
    clip_eps: float = Field(0.2, gt=0, lt=1)
    baseline: Literal["none", "exact_value", "learned_value"] = "exact_value"
    critic_step_size: float = Field(0.5, gt=0)
    seed: Optional[int] = None
    pre_scale: float = Field(1.0, ge=0)
    log_every: int = Field(0, ge=0)


class AnalysisSection(_Section):
    kappa_grid: List[float] = [0.25, 0.5, 0.75, 1.0]
    beta_grid: List[float] = [0.1, 1.0, 10.0, 100.0]
    seeds: List[int] = [0, 1, 2, 3, 4]


class ExperimentConfig(_Section):
    seed: int = 0
    mdp: MdpSection
    oracle: OracleSection = OracleSection()
    feedback: FeedbackSection = FeedbackSection()
    reward_model: RewardModelSection = RewardModelSection()
    policy: PolicySection = PolicySection()
    analysis: AnalysisSection = AnalysisSection()
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _feedback_matches_objective(self):
        wants_ratings = self.reward_model.objective == "mse"
        if wants_ratings != (self.feedback.mode == "ratings"):
            raise ValueError(
                f"feedback.mode={self.feedback.mode!r} cannot train reward_model.objective="
                f"{self.reward_model.objective!r}"
            )
        return self

    def resolved(self) -> ExperimentConfig:
        """Copy with every unset section seed derived from the master seed."""
        data = self.model_dump(by_alias=True)
        for section, offset in _SEED_OFFSETS.items():
            if data[section]["seed"] is None:
                data[section]["seed"] = self.seed + offset
        return ExperimentConfig.model_validate(data)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(by_alias=True), indent=2, sort_keys=True) + "\n"


def _first_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    key = ".".join(str(p) for p in err["loc"]) or "feedback.mode"
    return ConfigError(key, err["msg"])


def _apply_override(data: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like section.key=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(path, "cannot descend into a non-section value")
    node[keys[-1]] = yaml.safe_load(raw)


def parse_config(data: Any, overrides: list[str] | None = None, env: dict | None = None) -> ExperimentConfig:
    """Validate raw config data, apply ``section.key=value`` overrides and the seed env var."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    data = json.loads(json.dumps(data))
    for assignment in overrides or []:
        _apply_override(data, assignment)
    env = os.environ if env is None else env
    if env.get(SEED_ENV_VAR):
        try:
            data["seed"] = int(env[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV_VAR} must be an integer") from None
    try:
        return ExperimentConfig.model_validate(data).resolved()
    except ValidationError as exc:
        raise _first_error(exc) from None


def load_config(path: str | os.PathLike, overrides: list[str] | None = None, env: dict | None = None) -> ExperimentConfig:
    """Read a JSON or YAML config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid JSON/YAML: {exc}") from None
    return parse_config(data, overrides, env)
