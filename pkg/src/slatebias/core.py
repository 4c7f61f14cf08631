"""Shared domain types, partitioning procedures, and the deterministic RNG contract.

Everything downstream (choice simulation, dataset compilation, training,
evaluation) builds on the types in this module. All id lists are kept in
strictly increasing order so that serialized artifacts are canonical and
runs are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfigurationError(ValueError):
    """Requested sizes or options are impossible or inconsistent."""


class ContractError(RuntimeError):
    """A caller violated an operation's input contract."""


# Exposure policy tags. A slate records which policy produced it.
POLICY_UNIFORM_A = "uniform_a"
POLICY_UNIFORM_B = "uniform_b"
POLICY_OVEREXPOSE = "overexpose_bias"
POLICY_COMPETE_POPULAR = "compete_popular"
POLICY_COMPETE_UNPOPULAR = "compete_unpopular"

ALL_POLICIES = (
    POLICY_UNIFORM_A,
    POLICY_UNIFORM_B,
    POLICY_OVEREXPOSE,
    POLICY_COMPETE_POPULAR,
    POLICY_COMPETE_UNPOPULAR,
)

# Policies that draw from the treatment-side pool (everything except uniform_a).
SET_B_POLICIES = ALL_POLICIES[1:]


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

# Purpose codes for top-level stream ids, see make_stream().
PURPOSE_CATALOG = 1
PURPOSE_SPLIT = 2
PURPOSE_POPULATION = 3
PURPOSE_NESTS = 4
PURPOSE_PAIR = 5
PURPOSE_TRAIN = 6
PURPOSE_BOOTSTRAP = 7

_REP_BITS = 32
_MODEL_BITS = 5
_MEMBER_BITS = 1
_EXPERIMENT_BITS = 3


def make_stream(purpose: int, experiment: int = 0, repetition: int = 0,
                member: int = 0, model: int = 0) -> int:
    """Pack a structured stream id into a single non-negative integer.

    Repetition r of a given purpose gets its own stream; members and model
    kinds within a repetition get disjoint streams. The packing guarantees
    that distinct argument tuples map to distinct ids.
    """
    if not (0 <= repetition < 2 ** _REP_BITS):
        raise ConfigurationError(f"repetition {repetition} out of range")
    if not (0 <= model < 2 ** _MODEL_BITS):
        raise ConfigurationError(f"model index {model} out of range")
    if not (0 <= member < 2 ** _MEMBER_BITS):
        raise ConfigurationError(f"member index {member} out of range")
    if not (0 <= experiment < 2 ** _EXPERIMENT_BITS):
        raise ConfigurationError(f"experiment index {experiment} out of range")
    out = purpose
    out = (out << _EXPERIMENT_BITS) | experiment
    out = (out << _MEMBER_BITS) | member
    out = (out << _MODEL_BITS) | model
    out = (out << _REP_BITS) | repetition
    return out


@dataclass(frozen=True)
class RngHandle:
    """A named, reproducible random stream.

    Two handles with identical (seed, stream) and derivation path yield
    bit-identical draw sequences; distinct streams are statistically
    independent. Sub-purposes derive children with ``child(i)``, which maps
    onto numpy's SeedSequence spawn-key tree and never collides with the
    parent or with sibling streams.
    """

    seed: int
    stream: int = 0
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0 or self.stream < 0:
            raise ConfigurationError("seed and stream must be non-negative")

    def child(self, index: int) -> "RngHandle":
        if index < 0:
            raise ConfigurationError("child index must be non-negative")
        return RngHandle(self.seed, index, self.path + (self.stream,))

    def generator(self) -> np.random.Generator:
        key = self.path + (self.stream,)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

def _check_sorted_unique(ids: Sequence[int], name: str) -> None:
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ConfigurationError(f"{name} must be strictly increasing")


@dataclass(frozen=True)
class ItemCatalog:
    """The item universe: a two-way partition plus a small focal subset.

    ``set_a`` and ``set_b`` partition {0..n_items-1}; ``bias_set`` is the
    subset of ``set_b`` whose exposure the experiments manipulate.
    """

    n_items: int
    set_a: tuple[int, ...]
    set_b: tuple[int, ...]
    bias_set: tuple[int, ...]

    def __post_init__(self):
        for name in ("set_a", "set_b", "bias_set"):
            _check_sorted_unique(getattr(self, name), name)
        if sorted(self.set_a + self.set_b) != list(range(self.n_items)):
            raise ConfigurationError("set_a and set_b must partition the catalog")
        if not self.bias_set:
            raise ConfigurationError("bias_set must be non-empty")
        if not set(self.bias_set) <= set(self.set_b):
            raise ConfigurationError("bias_set must be a subset of set_b")

    @property
    def non_bias_b(self) -> tuple[int, ...]:
        bias = set(self.bias_set)
        return tuple(i for i in self.set_b if i not in bias)

    def side_of(self, item: int) -> str:
        return "a" if item in set(self.set_a) else "b"

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "set_a": list(self.set_a),
            "set_b": list(self.set_b),
            "bias_set": list(self.bias_set),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ItemCatalog":
        return cls(d["n_items"], tuple(d["set_a"]), tuple(d["set_b"]), tuple(d["bias_set"]))


@dataclass(frozen=True)
class UserSplit:
    """Disjoint train/eval user id lists covering {0..n_users-1}."""

    train_users: tuple[int, ...]
    eval_users: tuple[int, ...]

    def __post_init__(self):
        _check_sorted_unique(self.train_users, "train_users")
        _check_sorted_unique(self.eval_users, "eval_users")
        if not self.train_users or not self.eval_users:
            raise ConfigurationError("both user subsets must be non-empty")
        n = len(self.train_users) + len(self.eval_users)
        if sorted(self.train_users + self.eval_users) != list(range(n)):
            raise ConfigurationError("train and eval users must partition the user set")

    @property
    def n_users(self) -> int:
        return len(self.train_users) + len(self.eval_users)

    def to_dict(self) -> dict:
        return {"train_users": list(self.train_users), "eval_users": list(self.eval_users)}

    @classmethod
    def from_dict(cls, d: dict) -> "UserSplit":
        return cls(tuple(d["train_users"]), tuple(d["eval_users"]))


@dataclass(frozen=True)
class Slate:
    """The k items exposed together for one decision, in ascending-id order."""

    items: tuple[int, ...]
    policy_tag: str

    def __post_init__(self):
        if len(set(self.items)) != len(self.items):
            raise ConfigurationError("slate items must be distinct")
        _check_sorted_unique(self.items, "slate items")
        if self.policy_tag not in ALL_POLICIES:
            raise ConfigurationError(f"unknown policy tag {self.policy_tag!r}")


@dataclass(frozen=True)
class ChoiceEvent:
    """One logged decision: the exposed slate and the position chosen."""

    user: int
    slate: Slate
    chosen_index: int

    def __post_init__(self):
        if not (0 <= self.chosen_index < len(self.slate.items)):
            raise ConfigurationError("chosen_index out of slate bounds")

    @property
    def chosen_item(self) -> int:
        return self.slate.items[self.chosen_index]


def validate_slate(slate: Slate, catalog: ItemCatalog) -> None:
    """Check catalog membership and the no-mixing rule for one slate."""
    a, b = set(catalog.set_a), set(catalog.set_b)
    items = set(slate.items)
    if not (items <= a or items <= b):
        raise ConfigurationError(f"slate {slate.items} mixes catalog sides or leaves the catalog")
    if slate.policy_tag == POLICY_UNIFORM_A and not items <= a:
        raise ConfigurationError("uniform_a slate outside set_a")
    if slate.policy_tag in SET_B_POLICIES and not items <= b:
        raise ConfigurationError(f"{slate.policy_tag} slate outside set_b")


@dataclass(frozen=True)
class ChoiceLog:
    """An ordered collection of choice events against one catalog and split."""

    events: tuple[ChoiceEvent, ...]
    catalog: ItemCatalog
    split: UserSplit

    def validate(self) -> None:
        n_users = self.split.n_users
        for ev in self.events:
            if not (0 <= ev.user < n_users):
                raise ConfigurationError(f"event user {ev.user} outside the split")
            validate_slate(ev.slate, self.catalog)

    def __len__(self) -> int:
        return len(self.events)


# ---------------------------------------------------------------------------
# Partitioning operations
# ---------------------------------------------------------------------------

def build_catalog(n_items: int, size_a: int, n_bias: int, rng: RngHandle) -> ItemCatalog:
    """Uniformly partition items into two subsets and draw the focal subset.

    ``set_a`` gets ``size_a`` items, ``set_b`` the rest; ``bias_set`` is
    drawn uniformly without replacement from ``set_b``.
    """
    if n_items < 2 or size_a < 1:
        raise ConfigurationError("need n_items >= 2 and size_a >= 1")
    if size_a >= n_items:
        raise ConfigurationError("size_a must be smaller than n_items")
    if not (1 <= n_bias <= n_items - size_a):
        raise ConfigurationError("n_bias must be in [1, n_items - size_a]")
    gen = rng.generator()
    perm = gen.permutation(n_items)
    set_a = tuple(sorted(int(i) for i in perm[:size_a]))
    set_b = tuple(sorted(int(i) for i in perm[size_a:]))
    bias = tuple(sorted(int(i) for i in gen.choice(set_b, size=n_bias, replace=False)))
    return ItemCatalog(n_items=n_items, set_a=set_a, set_b=set_b, bias_set=bias)


def partition_users(n_users: int, eval_fraction: float, rng: RngHandle) -> UserSplit:
    """Uniform random train/eval split with round(eval_fraction * n_users) eval users."""
    if not (0.0 < eval_fraction < 1.0):
        raise ConfigurationError("eval_fraction must be in (0, 1)")
    n_eval = int(round(eval_fraction * n_users))
    if n_eval < 1 or n_eval >= n_users:
        raise ConfigurationError(
            f"split of {n_users} users at fraction {eval_fraction} leaves an empty side")
    perm = rng.generator().permutation(n_users)
    eval_users = tuple(sorted(int(u) for u in perm[:n_eval]))
    train_users = tuple(sorted(int(u) for u in perm[n_eval:]))
    return UserSplit(train_users=train_users, eval_users=eval_users)


# ---------------------------------------------------------------------------
# Event arrays (internal vectorized view of an event list)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventArrays:
    """Columnar view of an event list used by the training and eval paths."""

    users: np.ndarray       # (E,) int64
    slates: np.ndarray      # (E, k) int64
    chosen: np.ndarray      # (E,) int64, position in slate
    policies: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.users)

    @property
    def chosen_items(self) -> np.ndarray:
        return self.slates[np.arange(len(self.users)), self.chosen]


def event_arrays(events: Sequence[ChoiceEvent]) -> EventArrays:
    if not events:
        raise ContractError("cannot build arrays from an empty event list")
    k = len(events[0].slate.items)
    if any(len(ev.slate.items) != k for ev in events):
        raise ContractError("all slates must share one slate size")
    users = np.fromiter((ev.user for ev in events), dtype=np.int64, count=len(events))
    slates = np.array([ev.slate.items for ev in events], dtype=np.int64)
    chosen = np.fromiter((ev.chosen_index for ev in events), dtype=np.int64, count=len(events))
    policies = tuple(ev.slate.policy_tag for ev in events)
    return EventArrays(users=users, slates=slates, chosen=chosen, policies=policies)


def events_from_arrays(arrays: EventArrays) -> tuple[ChoiceEvent, ...]:
    out = []
    for u, row, c, tag in zip(arrays.users, arrays.slates, arrays.chosen, arrays.policies):
        slate = Slate(items=tuple(int(i) for i in row), policy_tag=tag)
        out.append(ChoiceEvent(user=int(u), slate=slate, chosen_index=int(c)))
    return tuple(out)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def write_events_jsonl(events: Iterable[ChoiceEvent], path: Path) -> None:
    """One JSON object per line: {"user", "slate", "chosen", "policy"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps({
                "user": ev.user,
                "slate": list(ev.slate.items),
                "chosen": ev.chosen_index,
                "policy": ev.slate.policy_tag,
            }) + "\n")


def read_events_jsonl(path: Path) -> tuple[ChoiceEvent, ...]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            slate = Slate(items=tuple(d["slate"]), policy_tag=d["policy"])
            events.append(ChoiceEvent(user=d["user"], slate=slate, chosen_index=d["chosen"]))
    return tuple(events)


def write_context_json(catalog: ItemCatalog, split: UserSplit, path: Path) -> None:
    """Catalog and split as a single JSON document next to the event logs."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"catalog": catalog.to_dict(), "split": split.to_dict()}, fh, indent=2)
        fh.write("\n")


def read_context_json(path: Path) -> tuple[ItemCatalog, UserSplit]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return ItemCatalog.from_dict(d["catalog"]), UserSplit.from_dict(d["split"])
