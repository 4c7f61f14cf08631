"""Experimental design: exposure policies, session plans, dataset pairs.

A dataset pair is two compiled training logs that share every uniform
event and differ only in how one block of slates over ``set_b`` was
sampled. Training models on both members and comparing the resulting item
ranks isolates the exposure distribution as the only varying factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ChoiceEvent,
    ChoiceLog,
    ConfigurationError,
    EventArrays,
    ItemCatalog,
    POLICY_COMPETE_POPULAR,
    POLICY_COMPETE_UNPOPULAR,
    POLICY_OVEREXPOSE,
    POLICY_UNIFORM_A,
    POLICY_UNIFORM_B,
    RngHandle,
    Slate,
    UserSplit,
    events_from_arrays,
)
from .oracle import BehaviorSpec, LatentPopulation, simulate_choices_arrays

EXPERIMENT_OVEREXPOSURE = "overexposure"
EXPERIMENT_COMPETITION = "competition"
EXPERIMENT_NULL = "null"
EXPERIMENTS = (EXPERIMENT_OVEREXPOSURE, EXPERIMENT_COMPETITION)

MEMBER_TREATED = "treated"
MEMBER_CONTROL = "control"
_MEMBER_BOTH = "both"


@dataclass(frozen=True)
class ExposurePolicy:
    """How one block of slates is sampled.

    ``force_prob`` only applies to the overexposure kind: with that
    probability a slate is built around one uniformly chosen bias item.
    ``quartile_size`` only applies to the competition kinds: the size of
    the popularity pool competitor items are drawn from.
    """

    kind: str
    force_prob: float = 0.0
    quartile_size: int = 11

    def __post_init__(self):
        if self.kind not in (POLICY_UNIFORM_A, POLICY_UNIFORM_B, POLICY_OVEREXPOSE,
                             POLICY_COMPETE_POPULAR, POLICY_COMPETE_UNPOPULAR):
            raise ConfigurationError(f"unknown policy kind {self.kind!r}")
        if not (0.0 <= self.force_prob <= 1.0):
            raise ConfigurationError("force_prob must be in [0, 1]")


@dataclass(frozen=True)
class SessionMix:
    """Per-user slate counts for each policy block of a session.

    Every session totals ``uniform_a + uniform_b + max(overexposure,
    2 * compete_each)`` choices; with the defaults both experiment layouts
    come to 40 choices per user.
    """

    uniform_a: int = 20
    uniform_b: int = 10
    overexposure: int = 10
    compete_each: int = 5

    def __post_init__(self):
        for name in ("uniform_a", "uniform_b", "overexposure", "compete_each"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"session count {name} must be >= 0")


@dataclass(frozen=True)
class DatasetPair:
    """Two logs identical except for the exposure distribution on set_b."""

    label: str
    treated: ChoiceLog
    control: ChoiceLog

    def member(self, name: str) -> ChoiceLog:
        if name == MEMBER_TREATED:
            return self.treated
        if name == MEMBER_CONTROL:
            return self.control
        raise ConfigurationError(f"unknown member {name!r}")


@dataclass(frozen=True)
class SessionPlan:
    user: int
    slates: tuple[Slate, ...]


# ---------------------------------------------------------------------------
# Slate samplers (vectorized; one generator consumed sequentially)
# ---------------------------------------------------------------------------

def _uniform_subsets(pool: np.ndarray, k: int, count: int,
                     gen: np.random.Generator) -> np.ndarray:
    """(count, k) distinct-item draws from pool, rows sorted ascending."""
    if k > pool.size:
        raise ConfigurationError(f"slate size {k} exceeds pool of {pool.size}")
    keys = gen.random((count, pool.size))
    take = np.argpartition(keys, k - 1, axis=1)[:, :k]
    return np.sort(pool[take], axis=1)


def _overexpose_slates(catalog: ItemCatalog, k: int, count: int, rho: float,
                       gen: np.random.Generator) -> np.ndarray:
    """With probability rho force one uniformly chosen bias item into the
    slate and fill the rest uniformly from set_b minus that item; otherwise
    sample the slate uniformly from set_b."""
    set_b = np.asarray(catalog.set_b, dtype=np.int64)
    bias = np.asarray(catalog.bias_set, dtype=np.int64)
    forced = gen.random(count) < rho
    n_forced = int(forced.sum())
    out = np.empty((count, k), dtype=np.int64)
    if n_forced:
        picks = bias[gen.integers(0, bias.size, n_forced)]
        keys = gen.random((n_forced, set_b.size))
        keys[set_b[None, :] == picks[:, None]] = np.inf  # exclude the forced item
        take = np.argpartition(keys, k - 2, axis=1)[:, :k - 1]
        filled = np.concatenate([picks[:, None], set_b[take]], axis=1)
        out[forced] = np.sort(filled, axis=1)
    n_plain = count - n_forced
    if n_plain:
        out[~forced] = _uniform_subsets(set_b, k, n_plain, gen)
    return out


def competition_pools(catalog: ItemCatalog, popularity: np.ndarray,
                      quartile_size: int) -> tuple[np.ndarray, np.ndarray]:
    """(popular, unpopular) competitor pools from set_b minus the bias set,
    ranked by the popularity vector with id tie-breaks."""
    others = np.asarray(catalog.non_bias_b, dtype=np.int64)
    if quartile_size > others.size:
        raise ConfigurationError(
            f"quartile_size {quartile_size} exceeds the {others.size} non-bias items")
    pop = popularity[others]
    top = others[np.lexsort((others, -pop))][:quartile_size]
    bottom = others[np.lexsort((others, pop))][:quartile_size]
    return np.sort(top), np.sort(bottom)


def _compete_slates(catalog: ItemCatalog, popularity: np.ndarray, k: int,
                    count: int, quartile_size: int, popular: bool,
                    gen: np.random.Generator) -> np.ndarray:
    """One uniformly chosen bias item plus k-1 competitors from the popular
    (or unpopular) pool."""
    if quartile_size < k - 1:
        raise ConfigurationError(
            f"quartile_size {quartile_size} cannot fill {k - 1} competitor slots")
    top, bottom = competition_pools(catalog, popularity, quartile_size)
    pool = top if popular else bottom
    bias = np.asarray(catalog.bias_set, dtype=np.int64)
    picks = bias[gen.integers(0, bias.size, count)]
    comp = _uniform_subsets(pool, k - 1, count, gen)
    return np.sort(np.concatenate([picks[:, None], comp], axis=1), axis=1)


def sample_slates(policy: ExposurePolicy, catalog: ItemCatalog,
                  popularity: np.ndarray | None, k: int, count: int,
                  gen: np.random.Generator) -> np.ndarray:
    if policy.kind == POLICY_UNIFORM_A:
        return _uniform_subsets(np.asarray(catalog.set_a, dtype=np.int64), k, count, gen)
    if policy.kind == POLICY_UNIFORM_B:
        return _uniform_subsets(np.asarray(catalog.set_b, dtype=np.int64), k, count, gen)
    if policy.kind == POLICY_OVEREXPOSE:
        return _overexpose_slates(catalog, k, count, policy.force_prob, gen)
    if policy.kind in (POLICY_COMPETE_POPULAR, POLICY_COMPETE_UNPOPULAR):
        if popularity is None:
            raise ConfigurationError("competition policies need a popularity vector")
        return _compete_slates(catalog, popularity, k, count, policy.quartile_size,
                               policy.kind == POLICY_COMPETE_POPULAR, gen)
    raise ConfigurationError(f"unknown policy {policy.kind!r}")


def sample_slate(policy: ExposurePolicy, catalog: ItemCatalog,
                 popularity: np.ndarray | None, rng: RngHandle, k: int = 4) -> Slate:
    row = sample_slates(policy, catalog, popularity, k, 1, rng.generator())[0]
    return Slate(items=tuple(int(i) for i in row), policy_tag=policy.kind)


# ---------------------------------------------------------------------------
# Overexposure intensity
# ---------------------------------------------------------------------------

def exposure_rates(rho: float, n_b: int, n_bias: int, k: int) -> tuple[float, float]:
    """Exact per-slate inclusion probability of a bias item and of a
    non-bias item under the overexposure policy.

    Forced branch (probability rho): a specific bias item is the forced
    pick with probability 1/n_bias, and otherwise sits among the n_b - 1
    filler candidates; a non-bias item is only ever a filler candidate.
    Plain branch: every item lands in the slate with probability k / n_b.
    """
    filler = (k - 1) / (n_b - 1)
    e_bias = rho * (1.0 / n_bias + (1.0 - 1.0 / n_bias) * filler) + (1.0 - rho) * k / n_b
    e_non = rho * filler + (1.0 - rho) * k / n_b
    return e_bias, e_non


def exposure_ratio(rho: float, n_b: int, n_bias: int, k: int) -> float:
    e_bias, e_non = exposure_rates(rho, n_b, n_bias, k)
    return e_bias / e_non


def solve_force_prob(target_ratio: float, catalog: ItemCatalog, k: int,
                     tol: float = 1e-6) -> float:
    """Force probability at which the expected per-item exposure of bias
    items exceeds that of the other set_b items by ``target_ratio``.

    The ratio is monotone in the force probability, so a bisection against
    the exact expectation converges; unreachable targets report the
    maximum achievable ratio.
    """
    n_b = len(catalog.set_b)
    n_bias = len(catalog.bias_set)
    if n_bias >= n_b:
        raise ConfigurationError("need at least one non-bias item in set_b")
    if k > n_b:
        raise ConfigurationError(f"slate size {k} exceeds |set_b| = {n_b}")
    if target_ratio < 1.0:
        raise ConfigurationError("target_ratio must be >= 1")
    max_ratio = exposure_ratio(1.0, n_b, n_bias, k)
    if target_ratio > max_ratio + tol:
        raise ConfigurationError(
            f"target ratio {target_ratio} unachievable; maximum is {max_ratio:.6f}")
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = exposure_ratio(mid, n_b, n_bias, k)
        if abs(r - target_ratio) <= tol:
            return mid
        if r < target_ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Session composition and pair compilation
# ---------------------------------------------------------------------------

def session_blocks(experiment: str, mix: SessionMix, rho: float,
                   quartile_size: int) -> tuple[tuple[ExposurePolicy, int, str], ...]:
    """Ordered (policy, per-user count, member) blocks for one experiment.

    The ``both`` blocks land in both pair members unchanged; the treated
    and control blocks are what distinguish the members. The competition
    layout keeps a shared uniform block over set_b so that every set_b
    item is observed in both members and only the company of the bias
    items varies. The null layout draws both distinguishing blocks from
    the uniform policy, which is the reference point for chance effects.
    """
    ua = (ExposurePolicy(POLICY_UNIFORM_A), mix.uniform_a, _MEMBER_BOTH)
    if experiment == EXPERIMENT_OVEREXPOSURE:
        return (
            ua,
            (ExposurePolicy(POLICY_OVEREXPOSE, force_prob=rho), mix.overexposure,
             MEMBER_TREATED),
            (ExposurePolicy(POLICY_UNIFORM_B), mix.uniform_b, MEMBER_CONTROL),
        )
    if experiment == EXPERIMENT_COMPETITION:
        return (
            ua,
            (ExposurePolicy(POLICY_UNIFORM_B), mix.uniform_b, _MEMBER_BOTH),
            (ExposurePolicy(POLICY_COMPETE_POPULAR, quartile_size=quartile_size),
             mix.compete_each, MEMBER_TREATED),
            (ExposurePolicy(POLICY_COMPETE_UNPOPULAR, quartile_size=quartile_size),
             mix.compete_each, MEMBER_CONTROL),
        )
    if experiment == EXPERIMENT_NULL:
        return (
            ua,
            (ExposurePolicy(POLICY_UNIFORM_B), mix.uniform_b, MEMBER_TREATED),
            (ExposurePolicy(POLICY_UNIFORM_B), mix.uniform_b, MEMBER_CONTROL),
        )
    raise ConfigurationError(f"unknown experiment {experiment!r}")


def build_session_plans(catalog: ItemCatalog, split: UserSplit, experiment: str,
                        mix: SessionMix, rho: float, quartile_size: int,
                        popularity: np.ndarray | None, k: int,
                        rng: RngHandle) -> list[SessionPlan]:
    """Materialize every user's session as Slate objects (diagnostic path)."""
    slates, _, policies, _ = _sample_session_arrays(
        catalog, split, experiment, mix, rho, quartile_size, popularity, k, rng)
    n_users = split.n_users
    per_user = slates.shape[0] // n_users
    plans = []
    for u in range(n_users):
        rows = slates[u * per_user:(u + 1) * per_user]
        tags = policies[u * per_user:(u + 1) * per_user]
        plans.append(SessionPlan(
            user=u,
            slates=tuple(Slate(items=tuple(int(i) for i in r), policy_tag=t)
                         for r, t in zip(rows, tags)),
        ))
    return plans


def _sample_session_arrays(catalog, split, experiment, mix, rho, quartile_size,
                           popularity, k, rng):
    """All users' session slates in user-major, block-ordered layout."""
    blocks = session_blocks(experiment, mix, rho, quartile_size)
    n_users = split.n_users
    gen = rng.generator()
    per_block = []
    for policy, count, member in blocks:
        if count == 0:
            continue
        rows = sample_slates(policy, catalog, popularity, k, n_users * count, gen)
        per_block.append((rows.reshape(n_users, count, k), policy.kind, member, count))
    slates = np.concatenate([b[0] for b in per_block], axis=1)
    total = slates.shape[1]
    slates = slates.reshape(n_users * total, k)
    users = np.repeat(np.arange(n_users, dtype=np.int64), total)
    policies, members = [], []
    for _, kind, member, count in per_block:
        policies.extend([kind] * count)
        members.extend([member] * count)
    policies = tuple(policies * n_users)
    members = tuple(members * n_users)
    return slates, users, policies, members


def train_user_popularity(pop: LatentPopulation, split: UserSplit) -> np.ndarray:
    """Ground-truth popularity: per-item mean true utility over train users."""
    return pop.mean_utilities(split.train_users)


def build_pair(pop: LatentPopulation, catalog: ItemCatalog, split: UserSplit,
               experiment: str, behavior: BehaviorSpec, rng: RngHandle,
               mix: SessionMix = SessionMix(), rho: float = 0.0,
               quartile_size: int = 11, k: int = 4) -> DatasetPair:
    """Simulate one full session per user and compile both pair members.

    Each user's choices are simulated exactly once; the members then select
    the shared blocks plus their own distinguishing block, so the shared
    events are identical across members by construction.
    """
    popularity = None
    if experiment == EXPERIMENT_COMPETITION:
        popularity = train_user_popularity(pop, split)
    slates, users, policies, members = _sample_session_arrays(
        catalog, split, experiment, mix, rho, quartile_size, popularity, k, rng.child(1))
    arrays = simulate_choices_arrays(pop, users, slates, policies, behavior, rng.child(2))
    member_flags = np.asarray(members)

    def compile_member(which: str) -> ChoiceLog:
        keep = (member_flags == _MEMBER_BOTH) | (member_flags == which)
        sub = EventArrays(users=arrays.users[keep], slates=arrays.slates[keep],
                          chosen=arrays.chosen[keep],
                          policies=tuple(p for p, f in zip(arrays.policies, keep) if f))
        return ChoiceLog(events=events_from_arrays(sub), catalog=catalog, split=split)

    return DatasetPair(label=experiment,
                       treated=compile_member(MEMBER_TREATED),
                       control=compile_member(MEMBER_CONTROL))


def training_view(log: ChoiceLog, split: UserSplit, catalog: ItemCatalog
                  ) -> tuple[ChoiceEvent, ...]:
    """All events except eval users' choices over set_b.

    Eval users' set_a events are retained; they are what anchors the eval
    users' embeddings without leaking their set_b behavior into training.
    """
    eval_users = set(split.eval_users)
    set_b = set(catalog.set_b)
    return tuple(ev for ev in log.events
                 if not (ev.user in eval_users and set(ev.slate.items) <= set_b))
