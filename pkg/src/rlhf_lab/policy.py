"""Tabular softmax policies over the states of a :class:`GenerationMdp`."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .csvio import read_csv, write_csv
from .errors import ContractViolation
from .mdp import GenerationMdp

ROLES = ("pre", "rlhf", "star")

# exp(-800) underflows to exactly 0.0, so rows become exactly one-hot
_GREEDY_MARGIN = 800.0


@dataclass(frozen=True, eq=False)
class Policy:
    """Next-token distribution ``softmax(logits[c, s])`` for every non-terminal state.

    Parameters
    ----------
    logits : ndarray, shape (num_contexts, num_states, vocab_size)
        Unnormalized log-probabilities, indexed by context, local state index
        (see :mod:`rlhf_lab.mdp`) and token.
    role : {"pre", "rlhf", "star"}
        Which policy this is in the pipeline; informational only.
    """

    logits: np.ndarray
    role: str = "pre"

    def __post_init__(self) -> None:
        logits = np.array(self.logits, dtype=float)
        if logits.ndim != 3:
            raise ContractViolation(f"logits must be 3-D, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ContractViolation("policy logits must be finite")
        if self.role not in ROLES:
            raise ContractViolation(f"role must be one of {ROLES}, got {self.role!r}")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)

    @classmethod
    def uniform(cls, mdp: GenerationMdp, role: str = "pre") -> Policy:
        return cls(np.zeros((mdp.num_contexts, mdp.num_states, mdp.vocab_size)), role)

    @classmethod
    def random(cls, mdp: GenerationMdp, seed: int, scale: float = 1.0, role: str = "pre") -> Policy:
        rng = np.random.default_rng(seed)
        shape = (mdp.num_contexts, mdp.num_states, mdp.vocab_size)
        return cls(scale * rng.standard_normal(shape), role)

    @classmethod
    def greedy(cls, mdp: GenerationMdp, outputs: Sequence[int], role: str = "pre") -> Policy:
        """Deterministic policy emitting ``outputs[c]`` (an output index) for context ``c``.

        Off-path states put all mass on token 0.
        """
        logits = np.zeros((mdp.num_contexts, mdp.num_states, mdp.vocab_size))
        logits[:, :, 1:] = -_GREEDY_MARGIN
        for c, o in enumerate(outputs):
            for s, a in zip(mdp.output_states[o], mdp.output_tokens[o]):
                logits[c, s, :] = -_GREEDY_MARGIN
                logits[c, s, a] = 0.0
        return cls(logits, role)

    def with_logits(self, logits: np.ndarray, role: str | None = None) -> Policy:
        return Policy(logits, self.role if role is None else role)

    @cached_property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    @cached_property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=-1)

    def check_shape(self, mdp: GenerationMdp) -> None:
        expected = (mdp.num_contexts, mdp.num_states, mdp.vocab_size)
        if self.logits.shape != expected:
            raise ContractViolation(f"policy shape {self.logits.shape} does not match MDP {expected}")


def output_log_probs(mdp: GenerationMdp, policy: Policy) -> np.ndarray:
    """``log pi(o | c)`` for every context and output, shape ``(C, N)``."""
    mdp.check_cap()
    policy.check_shape(mdp)
    per_token = policy.log_probs[:, mdp.output_states, mdp.output_tokens]
    return per_token.sum(axis=-1)


def output_probs(mdp: GenerationMdp, policy: Policy) -> np.ndarray:
    return np.exp(output_log_probs(mdp, policy))


def state_visit_probs(mdp: GenerationMdp, policy: Policy, context_dist: np.ndarray | None = None) -> np.ndarray:
    """Probability of reaching each non-terminal state, shape ``(C, S)``."""
    d = mdp.dist if context_dist is None else np.asarray(context_dist, dtype=float)
    V, off = mdp.vocab_size, mdp.depth_offsets
    reach = np.zeros((mdp.num_contexts, mdp.num_states))
    reach[:, 0] = d
    for t in range(mdp.horizon - 1):
        block = slice(off[t], off[t + 1])
        nxt = reach[:, block, None] * policy.probs[:, block, :]
        reach[:, off[t + 1] : off[t + 2]] = nxt.reshape(mdp.num_contexts, -1)
    return reach


def policy_from_output_logprobs(mdp: GenerationMdp, log_target: np.ndarray, role: str = "pre") -> Policy:
    """Factor per-context output distributions into per-state next-token logits.

    The logit of token ``a`` at prefix ``h`` is the log of the total target
    mass of outputs that start with ``h + a``; the softmax of a row is then the
    conditional ``Pr(a | h)`` and the product along any path recovers the
    target probability. Exact because the state space is a tree.
    ``log_target`` need not be normalized.
    """
    mdp.check_cap()
    C, V, T = mdp.num_contexts, mdp.vocab_size, mdp.horizon
    log_target = np.asarray(log_target, dtype=float)
    if log_target.shape != (C, mdp.num_outputs):
        raise ContractViolation(f"target shape {log_target.shape} != {(C, mdp.num_outputs)}")
    logits = np.empty((C, mdp.num_states, V))
    mass = log_target
    for t in range(T - 1, -1, -1):
        # mass[c, k] is the log mass of the k-th prefix of length t + 1
        off = mdp.depth_offsets
        logits[:, off[t] : off[t + 1], :] = mass.reshape(C, V**t, V)
        mass = logsumexp(mass.reshape(C, V**t, V), axis=-1)
    # rows unreachable under the target are all -inf; give them a uniform row
    dead = ~np.isfinite(logits).any(axis=-1)
    logits[dead] = 0.0
    logits = np.where(np.isfinite(logits), logits, -_GREEDY_MARGIN + logits.max(axis=-1, keepdims=True))
    logits = logits - logits.max(axis=-1, keepdims=True)
    return Policy(logits, role)


def save_policy(policy: Policy, path: str | os.PathLike) -> None:
    C, S, V = policy.logits.shape
    rows = ((c * S + s, a, policy.logits[c, s, a]) for c in range(C) for s in range(S) for a in range(V))
    write_csv(path, ("state_index", "token_id", "logit"), rows)


def load_policy(mdp: GenerationMdp, path: str | os.PathLike, role: str = "pre") -> Policy:
    _, rows = read_csv(path)
    logits = np.zeros((mdp.num_contexts * mdp.num_states, mdp.vocab_size))
    for s, a, v in rows:
        logits[int(s), int(a)] = float(v)
    return Policy(logits.reshape(mdp.num_contexts, mdp.num_states, mdp.vocab_size), role)
