"""Synthetic human feedback drawn from the oracular reward.

Ratings report ``R*(c, o)`` verbatim (noiseless annotators). Preferences
compare two outputs of one context, either through the Bradley-Terry choice
probability ``sigmoid(R*(c, o) - R*(c, o'))`` or deterministically.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .csvio import read_csv, write_csv
from .errors import ContractViolation, SizeError
from .mdp import GenerationMdp
from .oracle import OracularReward
from .policy import Policy, output_probs

PREFERENCE_MODES = ("bt_stochastic", "deterministic")


@dataclass(frozen=True)
class RatingDatum:
    context: int
    output: int
    rating: float


@dataclass(frozen=True)
class PreferenceDatum:
    """``winner`` was preferred over ``loser`` for ``context``."""

    context: int
    winner: int
    loser: int

    def __post_init__(self) -> None:
        if self.winner == self.loser:
            raise ContractViolation(f"winner and loser must differ, both are {self.winner}")


@dataclass(frozen=True)
class CoverageStats:
    kappa: float
    rho: float


@dataclass(frozen=True)
class FeedbackDataset:
    """Ratings and preferences; coverage sets are derived from the data."""

    ratings: tuple[RatingDatum, ...] = ()
    preferences: tuple[PreferenceDatum, ...] = ()
    _covered: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ratings", tuple(self.ratings))
        object.__setattr__(self, "preferences", tuple(self.preferences))
        covered: dict[int, set[int]] = {}
        for d in self.ratings:
            covered.setdefault(d.context, set()).add(d.output)
        for p in self.preferences:
            covered.setdefault(p.context, set()).update((p.winner, p.loser))
        object.__setattr__(self, "_covered", {c: frozenset(o) for c, o in covered.items()})

    @property
    def covered_contexts(self) -> frozenset[int]:
        return frozenset(self._covered)

    @property
    def covered_outputs_per_context(self) -> dict[int, frozenset[int]]:
        return dict(self._covered)

    def covered_pairs(self) -> set[tuple[int, int]]:
        return {(c, o) for c, outs in self._covered.items() for o in outs}

    def __add__(self, other: FeedbackDataset) -> FeedbackDataset:
        return FeedbackDataset(self.ratings + other.ratings, self.preferences + other.preferences)

    def __len__(self) -> int:
        return len(self.ratings) + len(self.preferences)


def _pick_outputs(
    mdp: GenerationMdp, c: int, count: int, rng: np.random.Generator, probs: np.ndarray | None
) -> np.ndarray:
    if probs is None:
        return np.sort(rng.choice(mdp.num_outputs, size=count, replace=False))
    p = probs[c] / probs[c].sum()
    if np.count_nonzero(p) < count:
        raise SizeError(
            f"sampling policy supports {np.count_nonzero(p)} outputs for context {c}, {count} requested"
        )
    return np.sort(rng.choice(mdp.num_outputs, size=count, replace=False, p=p))


def _check_request(mdp: GenerationMdp, contexts: Sequence[int], outputs_per_context: int) -> None:
    if len(set(contexts)) != len(contexts):
        raise ContractViolation("context_subset contains duplicates")
    if any(not 0 <= c < mdp.num_contexts for c in contexts):
        raise ContractViolation("context_subset has an id outside the MDP")
    if outputs_per_context > mdp.num_outputs:
        raise SizeError(f"{outputs_per_context} outputs per context requested, only {mdp.num_outputs} exist")
    if outputs_per_context < 1:
        raise ContractViolation("outputs_per_context must be >= 1")


def collect_ratings(
    mdp: GenerationMdp,
    oracle: OracularReward,
    context_subset: Sequence[int],
    outputs_per_context: int,
    seed: int,
    sampling_policy: Policy | None = None,
) -> FeedbackDataset:
    """Rate ``outputs_per_context`` distinct outputs of each selected context.

    Outputs are chosen uniformly without replacement, or without replacement
    in proportion to ``sampling_policy``'s output distribution when given.
    """
    _check_request(mdp, context_subset, outputs_per_context)
    rng = np.random.default_rng(seed)
    probs = None if sampling_policy is None else output_probs(mdp, sampling_policy)
    data = []
    for c in context_subset:
        for o in _pick_outputs(mdp, c, outputs_per_context, rng, probs):
            data.append(RatingDatum(int(c), int(o), float(oracle.values[c, o])))
    return FeedbackDataset(ratings=tuple(data))


def sample_preference(
    oracle: OracularReward,
    c: int,
    o: int,
    o_prime: int,
    mode: str = "bt_stochastic",
    seed: int | np.random.Generator | None = None,
) -> PreferenceDatum:
    """One comparison of ``o`` against ``o_prime``.

    In ``deterministic`` mode the higher reward wins and exact ties go to the
    lower output index.
    """
    if o == o_prime:
        raise ContractViolation(f"cannot compare output {o} with itself")
    if mode not in PREFERENCE_MODES:
        raise ContractViolation(f"unknown preference mode {mode!r}")
    r, r_prime = oracle.values[c, o], oracle.values[c, o_prime]
    if mode == "deterministic":
        o_wins = r > r_prime or (r == r_prime and o < o_prime)
    else:
        o_wins = np.random.default_rng(seed).random() < expit(r - r_prime)
    return PreferenceDatum(c, o, o_prime) if o_wins else PreferenceDatum(c, o_prime, o)


def ranking_to_pairs(c: int, ranked_outputs: Sequence[int]) -> list[PreferenceDatum]:
    """Expand a best-first ranking of N outputs into its N(N-1)/2 pairwise preferences."""
    ranked = [int(o) for o in ranked_outputs]
    if len(ranked) < 2:
        raise ContractViolation("a ranking needs at least 2 outputs")
    if len(set(ranked)) != len(ranked):
        raise ContractViolation(f"ranking contains duplicate outputs: {ranked}")
    return [PreferenceDatum(c, w, l) for w, l in itertools.combinations(ranked, 2)]


def collect_preferences(
    mdp: GenerationMdp,
    oracle: OracularReward,
    context_subset: Sequence[int],
    samples_per_pair: int,
    seed: int,
    outputs_per_context: int | None = None,
    mode: str = "bt_stochastic",
    sampling_policy: Policy | None = None,
) -> FeedbackDataset:
    """Compare every pair among a per-context output subset, ``samples_per_pair`` times each.

    ``outputs_per_context=None`` uses every output (exhaustive comparisons).
    """
    n_out = mdp.num_outputs if outputs_per_context is None else outputs_per_context
    _check_request(mdp, context_subset, n_out)
    if n_out < 2:
        raise ContractViolation("need at least 2 outputs per context to form pairs")
    if samples_per_pair < 1:
        raise ContractViolation("samples_per_pair must be >= 1")
    if mode not in PREFERENCE_MODES:
        raise ContractViolation(f"unknown preference mode {mode!r}")
    rng = np.random.default_rng(seed)
    probs = None if sampling_policy is None else output_probs(mdp, sampling_policy)
    data = []
    for c in context_subset:
        outs = _pick_outputs(mdp, c, n_out, rng, probs)
        for o, o_prime in itertools.combinations(outs.tolist(), 2):
            if mode == "deterministic":
                data.extend([sample_preference(oracle, c, o, o_prime, mode)] * samples_per_pair)
                continue
            p = expit(oracle.values[c, o] - oracle.values[c, o_prime])
            wins = rng.random(samples_per_pair) < p
            data.extend(PreferenceDatum(int(c), o, o_prime) if w else PreferenceDatum(int(c), o_prime, o)
                        for w in wins)
    return FeedbackDataset(preferences=tuple(data))


def compute_coverage(mdp: GenerationMdp, dataset: FeedbackDataset) -> CoverageStats:
    """Context coverage ``|C_HF| / |C|`` and output coverage ``|O_HF| / |O'|``.

    ``O'`` is every output of every covered context, so ``|O'| = |C_HF| * |V|**T``
    and ``|O_HF|`` counts covered (context, output) pairs.
    """
    covered = dataset.covered_outputs_per_context
    for c, outs in covered.items():
        if not 0 <= c < mdp.num_contexts or any(not 0 <= o < mdp.num_outputs for o in outs):
            raise ContractViolation(f"dataset references (c={c}) outside the MDP")
    if not covered:
        return CoverageStats(0.0, 0.0)
    n_pairs = sum(len(outs) for outs in covered.values())
    return CoverageStats(len(covered) / mdp.num_contexts, n_pairs / (len(covered) * mdp.num_outputs))


_HEADER = ("kind", "context_id", "output_a", "output_b_or_blank", "rating_or_blank")


def save_dataset(dataset: FeedbackDataset, path: str | os.PathLike) -> None:
    rows: Iterable = itertools.chain(
        (("rating", d.context, d.output, None, d.rating) for d in dataset.ratings),
        (("preference", p.context, p.winner, p.loser, None) for p in dataset.preferences),
    )
    write_csv(path, _HEADER, rows)


def load_dataset(path: str | os.PathLike) -> FeedbackDataset:
    header, rows = read_csv(path)
    if tuple(header) != _HEADER:
        raise ContractViolation(f"unexpected dataset header {header}")
    ratings, prefs = [], []
    for kind, c, a, b, r in rows:
        if kind == "rating":
            ratings.append(RatingDatum(int(c), int(a), float(r)))
        elif kind == "preference":
            prefs.append(PreferenceDatum(int(c), int(a), int(b)))
        else:
            raise ContractViolation(f"unknown row kind {kind!r}")
    return FeedbackDataset(tuple(ratings), tuple(prefs))
