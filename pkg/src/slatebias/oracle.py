"""Synthetic choice oracle: a latent population with ground-truth utilities.

Stands in for human participants. Supports softmax (logit-consistent)
choice behavior and a "context" variant whose choice probabilities depend
on the composition of the slate, so that probability ratios between two
items are no longer constant across slates. The context variant exists to
stress models whose likelihoods assume slate-independent ratios.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ChoiceEvent,
    ChoiceLog,
    ConfigurationError,
    ContractError,
    EventArrays,
    ItemCatalog,
    RngHandle,
    Slate,
    UserSplit,
    events_from_arrays,
)

BEHAVIOR_MNL = "mnl"
BEHAVIOR_CONTEXT = "context"


@dataclass(frozen=True)
class BehaviorSpec:
    """How the population turns utilities into choices.

    ``mnl``: probabilities are the softmax of the slate's true utilities.
    ``context``: each utility's deviation from the slate mean is amplified
    in proportion to the slate's utility spread before the softmax. The
    amplification factor differs between slates with different spreads,
    which breaks constant probability ratios across slates.
    """

    kind: str = BEHAVIOR_MNL
    context_strength: float = 0.3

    def __post_init__(self):
        if self.kind not in (BEHAVIOR_MNL, BEHAVIOR_CONTEXT):
            raise ConfigurationError(f"unknown behavior kind {self.kind!r}")
        if self.context_strength < 0:
            raise ConfigurationError("context_strength must be >= 0")


@dataclass(frozen=True)
class LatentPopulation:
    """Ground-truth user/item factors and item intercepts.

    true_utility(u, i) = item_intercepts[i] + user_factors[u] . item_factors[i]
    """

    user_factors: np.ndarray   # (n_users, dim)
    item_factors: np.ndarray   # (n_items, dim)
    item_intercepts: np.ndarray  # (n_items,)
    dim: int

    def __post_init__(self):
        for arr in (self.user_factors, self.item_factors, self.item_intercepts):
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError("population entries must be finite")

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    def true_utility(self, user: int, item: int) -> float:
        return float(self.item_intercepts[item]
                     + self.user_factors[user] @ self.item_factors[item])

    def utility_matrix(self) -> np.ndarray:
        """Full (n_users, n_items) table of true utilities."""
        return self.user_factors @ self.item_factors.T + self.item_intercepts

    def mean_utilities(self, users: Sequence[int] | None = None) -> np.ndarray:
        """Per-item utility averaged over the given users (default: all)."""
        uf = self.user_factors if users is None else self.user_factors[list(users)]
        return self.item_intercepts + uf.mean(axis=0) @ self.item_factors.T

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "user_factors": self.user_factors.tolist(),
            "item_factors": self.item_factors.tolist(),
            "item_intercepts": self.item_intercepts.tolist(),
        }


def sample_population(n_users: int, n_items: int, dim: int, rng: RngHandle,
                      factor_scale: float | None = None,
                      intercept_scale: float = 0.5) -> LatentPopulation:
    """Draw a population with i.i.d. normal factors and intercepts.

    Factor entries have standard deviation 1/sqrt(dim) unless overridden,
    so the factor product's variance stays comparable across dimensions.
    """
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    if n_users < 1 or n_items < 1:
        raise ConfigurationError("need at least one user and one item")
    scale = (1.0 / np.sqrt(dim)) if factor_scale is None else factor_scale
    if scale < 0 or intercept_scale < 0:
        raise ConfigurationError("scales must be non-negative")
    gen = rng.generator()
    user_factors = gen.normal(0.0, 1.0, size=(n_users, dim)) * scale
    item_factors = gen.normal(0.0, 1.0, size=(n_items, dim)) * scale
    intercepts = gen.normal(0.0, 1.0, size=n_items) * intercept_scale
    return LatentPopulation(user_factors=user_factors, item_factors=item_factors,
                            item_intercepts=intercepts, dim=dim)


# ---------------------------------------------------------------------------
# Choice probabilities
# ---------------------------------------------------------------------------

def slate_probabilities(utilities: np.ndarray, behavior: BehaviorSpec) -> np.ndarray:
    """Choice probabilities for one or many slates of utilities.

    Accepts shape (k,) or (E, k); returns the same shape. Softmax uses
    max-subtraction for overflow safety.
    """
    v = np.asarray(utilities, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ContractError("non-finite utility passed to slate_probabilities")
    squeeze = v.ndim == 1
    if squeeze:
        v = v[None, :]
    if behavior.kind == BEHAVIOR_CONTEXT and behavior.context_strength > 0:
        mean = v.mean(axis=1, keepdims=True)
        spread = v.std(axis=1, keepdims=True)
        v = v + behavior.context_strength * spread * (v - mean)
    v = v - v.max(axis=1, keepdims=True)
    ex = np.exp(v)
    p = ex / ex.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def choice_distribution(pop: LatentPopulation, user: int, slate: Slate,
                        behavior: BehaviorSpec) -> np.ndarray:
    """Probability of each slate position being chosen by the given user."""
    v = np.array([pop.true_utility(user, i) for i in slate.items])
    return slate_probabilities(v, behavior)


def _sample_positions(probs: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling of one position per row, deterministic per stream."""
    cum = np.cumsum(probs, axis=1)
    u = gen.random(probs.shape[0])
    idx = (u[:, None] > cum).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def simulate_choices_arrays(pop: LatentPopulation, users: np.ndarray,
                            slates: np.ndarray, policies: Sequence[str],
                            behavior: BehaviorSpec, rng: RngHandle) -> EventArrays:
    """Vectorized simulation on columnar inputs; one draw per row, in order."""
    util = pop.utility_matrix()
    v = util[users[:, None], slates]
    probs = slate_probabilities(v, behavior)
    chosen = _sample_positions(probs, rng.generator())
    return EventArrays(users=users.astype(np.int64), slates=slates.astype(np.int64),
                       chosen=chosen.astype(np.int64), policies=tuple(policies))


def simulate_choices(pop: LatentPopulation,
                     sessions: Sequence[tuple[int, Sequence[Slate]]],
                     behavior: BehaviorSpec, rng: RngHandle,
                     catalog: ItemCatalog, split: UserSplit) -> ChoiceLog:
    """Simulate every (user, slate) decision in deterministic session order."""
    flat_users, flat_slates, flat_policies = [], [], []
    for user, slates in sessions:
        for slate in slates:
            flat_users.append(user)
            flat_slates.append(slate.items)
            flat_policies.append(slate.policy_tag)
    if not flat_users:
        return ChoiceLog(events=(), catalog=catalog, split=split)
    arrays = simulate_choices_arrays(
        pop,
        np.asarray(flat_users, dtype=np.int64),
        np.asarray(flat_slates, dtype=np.int64),
        flat_policies,
        behavior,
        rng,
    )
    return ChoiceLog(events=events_from_arrays(arrays), catalog=catalog, split=split)
