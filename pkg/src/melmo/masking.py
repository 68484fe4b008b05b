"""Masked-LM corruption and mutually exclusive mask-set sampling.

Per segment, k pairwise-disjoint sets of eligible (non-special,
non-pad) positions are drawn, each of size floor(m * E). Within a set,
corruption actions follow deterministic counts: round(0.8 P) positions
become [MASK], round(0.1 P) are replaced by a uniformly drawn different
non-special token, the remainder are kept unchanged; the assignment of
actions to positions is random. Targets always record the original
token.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class MaskingError(ValueError):
    """Invalid masking configuration or plan application."""


class Action(IntEnum):
    MASK_TOKEN = 0
    RANDOM_REPLACE = 1
    KEEP = 2


@dataclass
class MaskPlan:
    """Corruption decisions and prediction targets for one mask set."""

    positions: np.ndarray  # indices into the sequence
    actions: np.ndarray    # Action per position
    targets: np.ndarray    # original token id per position

    def __len__(self):
        return int(self.positions.shape[0])


@dataclass
class MaskSetFamily:
    """k disjoint MaskPlans over one segment."""

    plans: list
    eligible: int

    def __len__(self):
        return len(self.plans)

    def __iter__(self):
        return iter(self.plans)


def _action_counts(p):
    n_mask = int(np.floor(0.8 * p + 0.5))
    n_rand = int(np.floor(0.1 * p + 0.5))
    return n_mask, n_rand, p - n_mask - n_rand


def sample_mask_sets(seq, m, k, rng):
    """Draw k disjoint uniform subsets of eligible positions, size floor(m*E)."""
    if k < 1:
        raise MaskingError(f"need at least one mask set, got k={k}")
    if k * m > 1.0 + 1e-12:
        raise MaskingError(f"k*m must not exceed 1, got {k}*{m} = {k * m}")
    eligible = np.flatnonzero(~seq.special)
    e = eligible.shape[0]
    size = int(np.floor(m * e))
    perm = rng.permutation(eligible) if e else eligible
    plans = []
    for j in range(k):
        positions = np.sort(perm[j * size:(j + 1) * size])
        p = positions.shape[0]
        n_mask, n_rand, n_keep = _action_counts(p)
        actions = np.concatenate([
            np.full(n_mask, Action.MASK_TOKEN, dtype=np.int8),
            np.full(n_rand, Action.RANDOM_REPLACE, dtype=np.int8),
            np.full(n_keep, Action.KEEP, dtype=np.int8),
        ])
        rng.shuffle(actions)
        plans.append(MaskPlan(positions=positions, actions=actions,
                              targets=seq.ids[positions].copy()))
    return MaskSetFamily(plans=plans, eligible=e)


def _draw_replacement(original, vocab, rng):
    # expected < 2 draws; at most V-6 distinct rejections possible
    while True:
        candidate = int(rng.integers(vocab.size))
        if candidate != original and candidate not in vocab.special_ids:
            return candidate


def apply_mask_plan(seq, plan, vocab, rng):
    """Corrupt a copy of `seq` according to `plan`; targets stay intact."""
    n = len(seq)
    if len(plan) and (plan.positions.min() < 0 or plan.positions.max() >= n):
        raise MaskingError(f"plan position out of range for length-{n} sequence")
    ids = seq.ids.copy()
    for pos, action, target in zip(plan.positions, plan.actions, plan.targets):
        if action == Action.MASK_TOKEN:
            ids[pos] = vocab.mask_id
        elif action == Action.RANDOM_REPLACE:
            ids[pos] = _draw_replacement(int(target), vocab, rng)
        # KEEP: leave the original token in place
    return type(seq)(ids, seq.special.copy())
