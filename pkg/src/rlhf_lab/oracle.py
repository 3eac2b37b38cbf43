"""Ground-truth rewards and policy performance.

The oracular reward is a dense ``(num_contexts, num_outputs)`` table paid once,
on entering the terminal state. Performance ``J(pi)`` is the expected terminal
reward with contexts drawn from the MDP's context distribution.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .csvio import read_csv, write_csv
from .errors import ContractViolation
from .mdp import GenerationMdp, sample_outputs
from .policy import Policy, output_probs

REWARD_KINDS = ("gaussian_random", "target_token", "prefix_match")


@dataclass(frozen=True)
class RewardSpec:
    """Recipe for a synthetic oracular reward.

    ``gaussian_random``
        i.i.d. ``Normal(mean, std)`` entries drawn from ``seed``.
    ``target_token``
        ``bonus`` times the number of occurrences of ``token`` in the output.
    ``prefix_match``
        ``match_value`` times the length of the common prefix between the
        output and the context's target. Targets are drawn from ``seed`` unless
        given explicitly as output indices.
    """

    kind: str = "gaussian_random"
    mean: float = 0.0
    std: float = 1.0
    seed: int = 0
    token: int = 0
    bonus: float = 1.0
    targets: tuple[int, ...] | None = None
    match_value: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in REWARD_KINDS:
            raise ContractViolation(f"unknown reward kind {self.kind!r}; expected one of {REWARD_KINDS}")
        if self.std < 0:
            raise ContractViolation("std must be >= 0")
        if self.targets is not None:
            object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))


@dataclass(frozen=True, eq=False)
class OracularReward:
    """Deterministic terminal reward table ``R*(c, o)``."""

    values: np.ndarray
    vocab_size: int
    horizon: int
    spec: RewardSpec | None = field(default=None)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != self.vocab_size**self.horizon:
            raise ContractViolation(
                f"reward table shape {values.shape} incompatible with |V|={self.vocab_size}, T={self.horizon}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractViolation("reward table entries must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_table(cls, mdp: GenerationMdp, values) -> OracularReward:
        r = cls(values, mdp.vocab_size, mdp.horizon)
        r.check_shape(mdp)
        return r

    def table(self) -> np.ndarray:
        return self.values

    def check_shape(self, mdp: GenerationMdp) -> None:
        if self.values.shape != (mdp.num_contexts, mdp.num_outputs):
            raise ContractViolation(
                f"reward table shape {self.values.shape} != {(mdp.num_contexts, mdp.num_outputs)}"
            )

    def shifted(self, k) -> OracularReward:
        """Add a constant, or a per-context vector of constants, to every entry."""
        k = np.asarray(k, dtype=float)
        shift = k[:, None] if k.ndim == 1 else k
        return OracularReward(self.values + shift, self.vocab_size, self.horizon)


def make_reward(mdp: GenerationMdp, spec: RewardSpec) -> OracularReward:
    """Materialize ``spec`` into a table; reproducible from ``(spec, mdp)``."""
    mdp.check_cap()
    C, N = mdp.num_contexts, mdp.num_outputs
    tokens = mdp.output_tokens
    if spec.kind == "gaussian_random":
        rng = np.random.default_rng(spec.seed)
        values = spec.mean + spec.std * rng.standard_normal((C, N))
    elif spec.kind == "target_token":
        if not 0 <= spec.token < mdp.vocab_size:
            raise ContractViolation(f"target token {spec.token} outside vocabulary")
        counts = (tokens == spec.token).sum(axis=1)
        values = np.broadcast_to(spec.bonus * counts, (C, N))
    else:
        if spec.targets is None:
            targets = np.random.default_rng(spec.seed).integers(N, size=C)
        else:
            if len(spec.targets) != C:
                raise ContractViolation(f"prefix_match needs {C} targets, got {len(spec.targets)}")
            targets = np.asarray(spec.targets)
        if np.any((targets < 0) | (targets >= N)):
            raise ContractViolation("prefix_match target index out of range")
        same = tokens[None, :, :] == tokens[targets][:, None, :]
        common = np.cumprod(same, axis=-1).sum(axis=-1)
        values = spec.match_value * common
    return OracularReward(values, mdp.vocab_size, mdp.horizon, spec)


def reward_table(reward, mdp: GenerationMdp) -> np.ndarray:
    """Dense ``(C, N)`` table from an array or any object exposing ``table()``."""
    values = reward.table() if hasattr(reward, "table") else np.asarray(reward, dtype=float)
    if values.shape != (mdp.num_contexts, mdp.num_outputs):
        raise ContractViolation(f"reward table shape {values.shape} != {(mdp.num_contexts, mdp.num_outputs)}")
    return values


def evaluate(r: OracularReward, c: int, o: int | Sequence[int]) -> float:
    """Terminal reward of output ``o`` (index or token sequence) for context ``c``.

    Intermediate steps earn nothing; this is the whole return of the episode.
    """
    C, N = r.values.shape
    if not isinstance(o, (int, np.integer)):
        tokens = tuple(o)
        if len(tokens) != r.horizon or any(not 0 <= a < r.vocab_size for a in tokens):
            raise ContractViolation(f"invalid output {tokens}")
        idx = 0
        for a in tokens:
            idx = idx * r.vocab_size + int(a)
        o = idx
    if not 0 <= c < C or not 0 <= o < N:
        raise ContractViolation(f"index (c={c}, o={o}) out of range for table of shape {(C, N)}")
    return float(r.values[c, o])


def exact_performance(
    mdp: GenerationMdp, policy: Policy, r, context_dist: np.ndarray | None = None
) -> float:
    """``J(pi) = sum_c d(c) sum_o pi(o|c) R(c, o)`` by enumeration."""
    d = mdp.dist if context_dist is None else np.asarray(context_dist, dtype=float)
    table = reward_table(r, mdp)
    per_context = (output_probs(mdp, policy) * table).sum(axis=1)
    return float(d @ per_context)


def estimated_performance(
    mdp: GenerationMdp, policy: Policy, reward_model, context_dist: np.ndarray | None = None
) -> float:
    """Same as :func:`exact_performance` with a learned reward in place of ``R*``."""
    return exact_performance(mdp, policy, reward_model, context_dist)


def sequential_performance(mdp: GenerationMdp, policy: Policy, r) -> float:
    """``J`` accumulated step by step, ``sum_t E[r_t]``.

    Per-step rewards are laid out along every full path; only the step that
    enters the terminal state carries ``R(c, o)``, all earlier steps pay 0.
    """
    table = reward_table(r, mdp)
    probs = output_probs(mdp, policy)
    step_rewards = np.zeros(table.shape + (mdp.horizon,))
    step_rewards[:, :, -1] = table
    total = 0.0
    for t in range(mdp.horizon):
        total += float(mdp.dist @ (probs * step_rewards[:, :, t]).sum(axis=1))
    return total


def mc_performance(
    mdp: GenerationMdp, policy: Policy, r, num_samples: int, seed: int
) -> tuple[float, float]:
    """Monte Carlo estimate of ``J`` and its standard error."""
    if num_samples < 2:
        raise ContractViolation(f"num_samples must be >= 2, got {num_samples}")
    table = reward_table(r, mdp)
    contexts, outputs = sample_outputs(mdp, policy, num_samples, np.random.default_rng(seed))
    rewards = table[contexts, outputs]
    return float(rewards.mean()), float(rewards.std(ddof=1) / np.sqrt(num_samples))


def save_reward(r: OracularReward, path: str | os.PathLike) -> None:
    C, N = r.values.shape
    write_csv(path, ("context_id", "output_index", "reward"),
              ((c, o, r.values[c, o]) for c in range(C) for o in range(N)))


def load_reward(mdp: GenerationMdp, path: str | os.PathLike) -> OracularReward:
    _, rows = read_csv(path)
    values = np.full((mdp.num_contexts, mdp.num_outputs), np.nan)
    for c, o, v in rows:
        values[int(c), int(o)] = float(v)
    return OracularReward.from_table(mdp, values)
