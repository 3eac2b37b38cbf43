"""Learned rewards ``R_phi`` and their training objectives.

Both model classes are linear in their parameters: the tabular model uses a
one-hot feature per ``(context, output)`` pair, the linear model a hand-built
feature map. Training minimizes squared error on ratings or the Bradley-Terry
negative log-likelihood on preferences, plus ``l2_weight * ||phi||^2``
(a Gaussian prior, so the optimum is a MAP estimate).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import expit

from .csvio import read_csv, write_csv, write_text_atomic
from .errors import ContractViolation, TrainingError
from .feedback import FeedbackDataset, PreferenceDatum, RatingDatum
from .mdp import GenerationMdp
from .oracle import OracularReward

MODEL_CLASSES = ("tabular", "linear")
FEATURE_KINDS = ("token_counts", "positional_onehot", "context_crossed")
OBJECTIVES = ("mse", "bt_nll")


@dataclass(frozen=True)
class FeatureMapSpec:
    """Feature map for the linear model.

    ``token_counts`` has one feature per token (its number of occurrences),
    ``positional_onehot`` one per (position, token), and ``context_crossed``
    gives every context its own copy of the ``base`` features.
    """

    kind: str = "token_counts"
    base: str = "positional_onehot"

    def __post_init__(self) -> None:
        if self.kind not in FEATURE_KINDS:
            raise ContractViolation(f"unknown feature kind {self.kind!r}; expected one of {FEATURE_KINDS}")
        if self.base not in FEATURE_KINDS[:2]:
            raise ContractViolation(f"context_crossed base must be one of {FEATURE_KINDS[:2]}")

    def dim(self, mdp: GenerationMdp) -> int:
        kind = self.base if self.kind == "context_crossed" else self.kind
        d = mdp.vocab_size if kind == "token_counts" else mdp.horizon * mdp.vocab_size
        return d * mdp.num_contexts if self.kind == "context_crossed" else d


def feature_tensor(mdp: GenerationMdp, spec: FeatureMapSpec) -> np.ndarray:
    """Features of every ``(context, output)``, shape ``(C, N, dim)``."""
    tokens = mdp.output_tokens
    V, T, C, N = mdp.vocab_size, mdp.horizon, mdp.num_contexts, mdp.num_outputs
    kind = spec.base if spec.kind == "context_crossed" else spec.kind
    onehot = (tokens[:, :, None] == np.arange(V)).astype(float)
    base = onehot.sum(axis=1) if kind == "token_counts" else onehot.reshape(N, T * V)
    if spec.kind != "context_crossed":
        return np.broadcast_to(base, (C,) + base.shape)
    d = base.shape[1]
    out = np.zeros((C, N, C * d))
    for c in range(C):
        out[c, :, c * d : (c + 1) * d] = base
    return out


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "mse"
    step_size: float = 0.1
    num_epochs: int = 2000
    l2_weight: float = 0.0
    seed: int = 0
    convergence_tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ContractViolation(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not self.step_size > 0:
            raise ContractViolation("step_size must be > 0")
        if self.num_epochs < 1:
            raise ContractViolation("num_epochs must be >= 1")
        if self.l2_weight < 0:
            raise ContractViolation("l2_weight must be >= 0")
        if not self.convergence_tol > 0:
            raise ContractViolation("convergence_tol must be > 0")


@dataclass(frozen=True, eq=False)
class RewardModel:
    """Parameterized reward ``R_phi(c, o) = <phi, x(c, o)>``.

    Build with :meth:`tabular` or :meth:`linear`; parameters start at zero.
    """

    mdp: GenerationMdp
    model_class: str
    params: np.ndarray
    feature_map: FeatureMapSpec | None = None

    def __post_init__(self) -> None:
        if self.model_class not in MODEL_CLASSES:
            raise ContractViolation(f"model class must be one of {MODEL_CLASSES}")
        if self.model_class == "linear" and self.feature_map is None:
            raise ContractViolation("linear reward model needs a feature map")
        params = np.array(self.params, dtype=float).ravel()
        if params.shape != (self.num_params,):
            raise ContractViolation(f"expected {self.num_params} parameters, got {params.shape[0]}")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @classmethod
    def tabular(cls, mdp: GenerationMdp) -> RewardModel:
        mdp.check_cap()
        return cls(mdp, "tabular", np.zeros(mdp.num_contexts * mdp.num_outputs))

    @classmethod
    def linear(cls, mdp: GenerationMdp, feature_map: FeatureMapSpec | str = "token_counts") -> RewardModel:
        if isinstance(feature_map, str):
            feature_map = FeatureMapSpec(feature_map)
        return cls(mdp, "linear", np.zeros(feature_map.dim(mdp)), feature_map)

    @property
    def num_params(self) -> int:
        if self.model_class == "tabular":
            return self.mdp.num_contexts * self.mdp.num_outputs
        return self.feature_map.dim(self.mdp)

    def with_params(self, params: np.ndarray) -> RewardModel:
        return RewardModel(self.mdp, self.model_class, params, self.feature_map)

    @cached_property
    def _features(self) -> np.ndarray:
        """Design matrix with one row per flat ``c * N + o`` index (linear only)."""
        x = feature_tensor(self.mdp, self.feature_map)
        return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))

    def flat_index(self, contexts, outputs) -> np.ndarray:
        contexts, outputs = np.asarray(contexts), np.asarray(outputs)
        if np.any((contexts < 0) | (contexts >= self.mdp.num_contexts)):
            raise ContractViolation("context index out of range")
        if np.any((outputs < 0) | (outputs >= self.mdp.num_outputs)):
            raise ContractViolation("output index out of range")
        return contexts * self.mdp.num_outputs + outputs

    def predict_flat(self, idx: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        phi = self.params if params is None else params
        if self.model_class == "tabular":
            return phi[idx]
        return self._features[idx] @ phi

    def accumulate(self, idx: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """``sum_i weights[i] * x(idx[i])``: the chain-rule pullback onto parameters."""
        if self.model_class == "tabular":
            grad = np.zeros(self.num_params)
            np.add.at(grad, idx, weights)
            return grad
        return self._features[idx].T @ weights

    def table(self) -> np.ndarray:
        """Predictions for every ``(c, o)``, shape ``(C, N)``."""
        C, N = self.mdp.num_contexts, self.mdp.num_outputs
        if self.model_class == "tabular":
            return self.params.reshape(C, N)
        return (self._features @ self.params).reshape(C, N)


def predict(model: RewardModel, c: int, o: int) -> float:
    return float(model.predict_flat(model.flat_index(c, o)))


def _rating_arrays(model: RewardModel, ratings: Sequence[RatingDatum]):
    if len(ratings) == 0:
        raise ContractViolation("rating dataset is empty")
    idx = model.flat_index([d.context for d in ratings], [d.output for d in ratings])
    return idx, np.array([d.rating for d in ratings], dtype=float)


def _pref_arrays(model: RewardModel, prefs: Sequence[PreferenceDatum]):
    if len(prefs) == 0:
        raise ContractViolation("preference dataset is empty")
    ctx = [p.context for p in prefs]
    win = model.flat_index(ctx, [p.winner for p in prefs])
    lose = model.flat_index(ctx, [p.loser for p in prefs])
    return win, lose


def mse_loss_and_grad(
    model: RewardModel, ratings: Sequence[RatingDatum], l2_weight: float = 0.0, params: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """``sum (R_phi(c, o) - r)^2 + l2_weight * ||phi||^2`` and its gradient."""
    phi = model.params if params is None else np.asarray(params, dtype=float)
    idx, target = _rating_arrays(model, ratings)
    resid = model.predict_flat(idx, phi) - target
    loss = float(resid @ resid + l2_weight * (phi @ phi))
    grad = model.accumulate(idx, 2.0 * resid) + 2.0 * l2_weight * phi
    return loss, grad


def bt_nll_and_grad(
    model: RewardModel, prefs: Sequence[PreferenceDatum], l2_weight: float = 0.0, params: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """``-sum log sigmoid(R_phi(c, w) - R_phi(c, l)) + l2_weight * ||phi||^2`` and its gradient.

    ``-log sigmoid(g)`` is evaluated as ``softplus(-g)`` so large gaps of
    either sign stay finite.
    """
    phi = model.params if params is None else np.asarray(params, dtype=float)
    win, lose = _pref_arrays(model, prefs)
    gap = model.predict_flat(win, phi) - model.predict_flat(lose, phi)
    loss = float(np.logaddexp(0.0, -gap).sum() + l2_weight * (phi @ phi))
    dgap = -expit(-gap)
    grad = model.accumulate(win, dgap) - model.accumulate(lose, dgap) + 2.0 * l2_weight * phi
    return loss, grad


def train(
    model: RewardModel, dataset: FeedbackDataset, config: TrainConfig
) -> tuple[RewardModel, list[float]]:
    """Full-batch gradient descent from ``model.params``.

    Stops after ``num_epochs`` steps or once ``max |grad| < convergence_tol``.
    Returns the trained model and the loss at every evaluated epoch.

    Raises
    ------
    TrainingError
        If the loss or gradient stops being finite.
    """
    if config.objective == "mse":
        data = dataset.ratings
        objective = mse_loss_and_grad
    else:
        data = dataset.preferences
        objective = bt_nll_and_grad
    if len(data) == 0:
        raise ContractViolation(f"objective {config.objective!r} needs {'ratings' if config.objective == 'mse' else 'preferences'}")
    phi = model.params.copy()
    trace: list[float] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.num_epochs + 1):
            loss, grad = objective(model, data, config.l2_weight, phi)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"reward model training diverged: loss={loss}", epoch)
            trace.append(loss)
            if np.max(np.abs(grad)) < config.convergence_tol or epoch == config.num_epochs:
                break
            phi = phi - config.step_size * grad
    return model.with_params(phi), trace


def center_per_context(table: np.ndarray) -> np.ndarray:
    """Subtract each context's mean reward; removes the Bradley-Terry gauge freedom."""
    table = np.asarray(table, dtype=float)
    return table - table.mean(axis=1, keepdims=True)


@dataclass(frozen=True)
class GeneralizationReport:
    in_dist_mse: float
    ood_mse: float | None
    num_covered: int
    num_uncovered: int


def generalization_report(
    model: RewardModel, oracle: OracularReward, train_set: FeedbackDataset, mdp: GenerationMdp
) -> GeneralizationReport:
    """Squared error of ``R_phi`` against ``R*`` on covered vs uncovered pairs.

    ``ood_mse`` is ``None`` when the training set covers every pair.
    """
    err = (model.table() - oracle.values) ** 2
    mask = np.zeros(err.shape, dtype=bool)
    for c, o in train_set.covered_pairs():
        mask[c, o] = True
    in_dist = float(err[mask].mean()) if mask.any() else float("nan")
    ood = float(err[~mask].mean()) if (~mask).any() else None
    return GeneralizationReport(in_dist, ood, int(mask.sum()), int((~mask).sum()))


def save_reward_model(model: RewardModel, path: str | os.PathLike) -> None:
    """Parameters as ``(param_index, value)`` CSV plus a ``.meta.json`` header."""
    write_csv(path, ("param_index", "value"), enumerate(model.params))
    meta = {
        "model_class": model.model_class,
        "feature_kind": None if model.feature_map is None else model.feature_map.kind,
        "feature_base": None if model.feature_map is None else model.feature_map.base,
        "num_params": model.num_params,
        "num_contexts": model.mdp.num_contexts,
        "vocab_size": model.mdp.vocab_size,
        "horizon": model.mdp.horizon,
    }
    write_text_atomic(f"{path}.meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_reward_model(mdp: GenerationMdp, path: str | os.PathLike) -> RewardModel:
    with open(f"{path}.meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    _, rows = read_csv(path)
    params = np.zeros(meta["num_params"])
    for i, v in rows:
        params[int(i)] = float(v)
    fmap = None
    if meta["model_class"] == "linear":
        fmap = FeatureMapSpec(meta["feature_kind"], meta["feature_base"])
    return RewardModel(mdp, meta["model_class"], params, fmap)
