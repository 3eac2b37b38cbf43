"""Finite text-generation MDP.

A context is an opaque integer id. A state is a context plus the tokens
generated so far; appending a token is the only transition. Every output has
exactly ``horizon`` tokens, so each context owns a complete ``vocab_size``-ary
tree of depth ``horizon`` whose leaves are the outputs.

Outputs are addressed by their lexicographic index, i.e. the base-``|V|``
number whose digits are the tokens. Non-terminal states of one context are
addressed by a local index: states at depth ``t`` occupy the block
``offset[t] .. offset[t] + |V|**t - 1`` in prefix-lexicographic order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np

from .errors import ContractViolation, SizeError

DEFAULT_ENUMERATION_CAP = 10**6


class HasActionProbs(Protocol):
    probs: np.ndarray  # (num_contexts, num_states, vocab_size)


@dataclass(frozen=True)
class StateRef:
    """A context id together with the generated prefix."""

    context: int
    prefix: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "prefix", tuple(int(a) for a in self.prefix))


@dataclass(frozen=True)
class Trajectory:
    context: int
    output: tuple[int, ...]
    terminal_reward: float = float("nan")

    def with_reward(self, reward: float) -> Trajectory:
        return Trajectory(self.context, self.output, float(reward))


@dataclass(frozen=True)
class GenerationMdp:
    """Deterministic, fixed-horizon generation process over a finite vocabulary.

    Parameters
    ----------
    vocab_size : int
        Number of tokens, at least 2.
    horizon : int
        Number of generated tokens per output, at least 1.
    context_dist : sequence of float
        Probability of each context; its length fixes the number of contexts.
    enumeration_cap : int
        Largest output count that exhaustive operations will accept.
    """

    vocab_size: int
    horizon: int
    context_dist: tuple[float, ...]
    enumeration_cap: int = field(default=DEFAULT_ENUMERATION_CAP, compare=False)

    def __post_init__(self) -> None:
        if int(self.vocab_size) != self.vocab_size or self.vocab_size < 2:
            raise ContractViolation(f"vocab_size must be an integer >= 2, got {self.vocab_size}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ContractViolation(f"horizon must be an integer >= 1, got {self.horizon}")
        dist = tuple(float(p) for p in self.context_dist)
        if len(dist) == 0:
            raise ContractViolation("context_dist must contain at least one context")
        if any(not np.isfinite(p) or p < 0 for p in dist):
            raise ContractViolation("context_dist entries must be finite and >= 0")
        if abs(sum(dist) - 1.0) > 1e-12:
            raise ContractViolation(f"context_dist must sum to 1, got {sum(dist)!r}")
        object.__setattr__(self, "vocab_size", int(self.vocab_size))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "context_dist", dist)

    @classmethod
    def uniform(cls, vocab_size: int, horizon: int, num_contexts: int, **kwargs) -> GenerationMdp:
        if num_contexts < 1:
            raise ContractViolation(f"num_contexts must be >= 1, got {num_contexts}")
        return cls(vocab_size, horizon, (1.0 / num_contexts,) * num_contexts, **kwargs)

    # -- sizes ---------------------------------------------------------------

    @property
    def num_contexts(self) -> int:
        return len(self.context_dist)

    @property
    def contexts(self) -> range:
        return range(self.num_contexts)

    @property
    def num_outputs(self) -> int:
        return self.vocab_size**self.horizon

    @property
    def num_states(self) -> int:
        """Non-terminal states per context, ``sum_{t<T} |V|**t``."""
        return (self.vocab_size**self.horizon - 1) // (self.vocab_size - 1)

    @cached_property
    def depth_offsets(self) -> np.ndarray:
        """Start of each depth block in the local state index; length ``T + 1``."""
        sizes = self.vocab_size ** np.arange(self.horizon + 1)
        return np.concatenate([[0], np.cumsum(sizes[:-1])]).astype(np.int64)

    @property
    def dist(self) -> np.ndarray:
        return np.asarray(self.context_dist, dtype=float)

    def check_cap(self, cap: int | None = None) -> None:
        cap = self.enumeration_cap if cap is None else cap
        if self.num_outputs > cap:
            raise SizeError(
                f"{self.vocab_size}**{self.horizon} = {self.num_outputs} outputs exceeds "
                f"the enumeration cap of {cap}"
            )

    # -- indexing ------------------------------------------------------------

    def is_terminal(self, state: StateRef) -> bool:
        return len(state.prefix) == self.horizon

    def validate_state(self, state: StateRef) -> None:
        if not 0 <= state.context < self.num_contexts:
            raise ContractViolation(f"context {state.context} out of range")
        if len(state.prefix) > self.horizon:
            raise ContractViolation(f"prefix longer than horizon {self.horizon}")
        if any(not 0 <= a < self.vocab_size for a in state.prefix):
            raise ContractViolation(f"prefix {state.prefix} has a token outside the vocabulary")

    def step(self, state: StateRef, action: int) -> StateRef:
        """Append ``action`` to the prefix; the only transition of the process."""
        self.validate_state(state)
        if self.is_terminal(state):
            raise ContractViolation(f"cannot step terminal state {state}")
        if not 0 <= action < self.vocab_size:
            raise ContractViolation(f"action {action} outside vocabulary of size {self.vocab_size}")
        return StateRef(state.context, state.prefix + (int(action),))

    def prefix_index(self, prefix: Sequence[int]) -> int:
        idx = 0
        for a in prefix:
            idx = idx * self.vocab_size + int(a)
        return idx

    def state_index(self, state: StateRef) -> int:
        """Local index of a non-terminal state within its context's tree."""
        self.validate_state(state)
        if self.is_terminal(state):
            raise ContractViolation(f"terminal state {state} has no policy row")
        return int(self.depth_offsets[len(state.prefix)]) + self.prefix_index(state.prefix)

    def state_from_index(self, context: int, index: int) -> StateRef:
        if not 0 <= index < self.num_states:
            raise ContractViolation(f"state index {index} out of range")
        depth = int(np.searchsorted(self.depth_offsets, index, side="right")) - 1
        return StateRef(context, self.output_from_index(index - self.depth_offsets[depth], depth))

    def output_index(self, output: Sequence[int]) -> int:
        if len(output) != self.horizon:
            raise ContractViolation(f"output length {len(output)} != horizon {self.horizon}")
        if any(not 0 <= a < self.vocab_size for a in output):
            raise ContractViolation(f"output {tuple(output)} has a token outside the vocabulary")
        return self.prefix_index(output)

    def output_from_index(self, index: int, length: int | None = None) -> tuple[int, ...]:
        length = self.horizon if length is None else length
        if not 0 <= index < self.vocab_size**length:
            raise ContractViolation(f"output index {index} out of range")
        digits = []
        for _ in range(length):
            index, a = divmod(int(index), self.vocab_size)
            digits.append(a)
        return tuple(reversed(digits))

    # -- vectorized path tables ----------------------------------------------

    @cached_property
    def output_tokens(self) -> np.ndarray:
        """``(N, T)`` token matrix of every output in canonical order."""
        self.check_cap()
        idx = np.arange(self.num_outputs)
        powers = self.vocab_size ** np.arange(self.horizon - 1, -1, -1)
        return (idx[:, None] // powers[None, :]) % self.vocab_size

    @cached_property
    def output_states(self) -> np.ndarray:
        """``(N, T)`` local state index visited at each step of every output."""
        idx = np.arange(self.num_outputs)
        powers = self.vocab_size ** np.arange(self.horizon, 0, -1)
        return self.depth_offsets[None, :-1] + idx[:, None] // powers[None, :]


def enumerate_outputs(mdp: GenerationMdp, cap: int | None = None) -> list[tuple[int, ...]]:
    """All ``|V|**T`` outputs in lexicographic (canonical index) order."""
    mdp.check_cap(cap)
    return [tuple(int(a) for a in row) for row in mdp.output_tokens]


def sample_outputs(
    mdp: GenerationMdp,
    policy: HasActionProbs,
    num_samples: int,
    rng: np.random.Generator,
    context_dist: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw a batch of rollouts; returns ``(contexts, output_indices)``.

    Contexts come from ``context_dist`` (default ``mdp.context_dist``) and each
    token from the policy row of the current state.
    """
    p = mdp.dist if context_dist is None else np.asarray(context_dist, dtype=float)
    contexts = rng.choice(mdp.num_contexts, size=num_samples, p=p)
    prefix = np.zeros(num_samples, dtype=np.int64)
    V = mdp.vocab_size
    for t in range(mdp.horizon):
        rows = policy.probs[contexts, mdp.depth_offsets[t] + prefix]
        cdf = np.cumsum(rows, axis=1)
        u = rng.random(num_samples)[:, None]
        tokens = np.minimum((cdf < u * cdf[:, -1:]).sum(axis=1), V - 1)
        prefix = prefix * V + tokens
    return contexts, prefix


def rollout(mdp: GenerationMdp, policy: HasActionProbs, rng_seed: int) -> Trajectory:
    """Generate one trajectory; identical seeds give identical trajectories."""
    rng = np.random.default_rng(rng_seed)
    contexts, outputs = sample_outputs(mdp, policy, 1, rng)
    return Trajectory(int(contexts[0]), mdp.output_from_index(int(outputs[0])))
