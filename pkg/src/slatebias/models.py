"""Scoring models and their per-event losses with analytic gradients.

Seven model kinds share one latent-factor scoring backbone so that bias
differences between them are attributable to the loss, not to capacity:

* ``mnl``   - softmax over the logged slate (multivariate).
* ``gev``   - two-level nested logit over the logged slate (multivariate).
* ``bl``    - independent per-item binary logit with a learned global
              offset for the 1:(k-1) choose/skip base rate (univariate).
* ``bpr``   - pairwise ranking against negatives sampled from the items a
              user never chose anywhere in training; ignores the slate.
* ``ips_bpr`` - bpr with per-event inverse-propensity weights, propensity
              being the item's empirical exposure frequency.
* ``popularity`` - item score equals its global training choice count.
* ``random``  - seed-deterministic pseudorandom item scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .core import (
    ChoiceEvent,
    ConfigurationError,
    ContractError,
    EventArrays,
    RngHandle,
    event_arrays,
)

KIND_MNL = "mnl"
KIND_GEV = "gev"
KIND_BL = "bl"
KIND_BPR = "bpr"
KIND_IPS_BPR = "ips_bpr"
KIND_POPULARITY = "popularity"
KIND_RANDOM = "random"

ALL_KINDS = (KIND_MNL, KIND_GEV, KIND_BL, KIND_BPR, KIND_IPS_BPR,
             KIND_POPULARITY, KIND_RANDOM)
MULTIVARIATE_KINDS = (KIND_MNL, KIND_GEV)
TRAINED_KINDS = (KIND_MNL, KIND_GEV, KIND_BL, KIND_BPR, KIND_IPS_BPR)
NEGATIVE_SAMPLING_KINDS = (KIND_BPR, KIND_IPS_BPR)

PROPENSITY_CLIP = 1e-3


# ---------------------------------------------------------------------------
# Parameters and nest structure
# ---------------------------------------------------------------------------

@dataclass
class ModelParams:
    """Learnable state shared by all kinds.

    score(u, i) = item_intercepts[i] + user_factors[u] . item_factors[i]

    ``nest_logits`` are unconstrained; the effective nested-logit scales
    are their logistic transform, confined to (0, 1).
    """

    user_factors: np.ndarray    # (n_users, dim)
    item_factors: np.ndarray    # (n_items, dim)
    item_intercepts: np.ndarray  # (n_items,)
    nest_logits: np.ndarray     # (n_nests,)
    bl_offset: float = 0.0

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def dim(self) -> int:
        return self.user_factors.shape[1]

    def nest_scales(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.nest_logits))

    def copy(self) -> "ModelParams":
        return ModelParams(self.user_factors.copy(), self.item_factors.copy(),
                           self.item_intercepts.copy(), self.nest_logits.copy(),
                           self.bl_offset)

    def to_dict(self) -> dict:
        return {
            "user_factors": self.user_factors.tolist(),
            "item_factors": self.item_factors.tolist(),
            "item_intercepts": self.item_intercepts.tolist(),
            "nest_logits": self.nest_logits.tolist(),
            "bl_offset": self.bl_offset,
            "shape": {"n_users": self.n_users, "n_items": self.n_items,
                      "dim": self.dim, "n_nests": len(self.nest_logits)},
        }


def zero_params(n_users: int, n_items: int, dim: int, n_nests: int) -> ModelParams:
    return ModelParams(np.zeros((n_users, dim)), np.zeros((n_items, dim)),
                       np.zeros(n_items), np.zeros(n_nests), 0.0)


@dataclass(frozen=True)
class NestStructure:
    """Assignment of every catalog item to exactly one non-empty nest."""

    assignment: np.ndarray  # (n_items,) int64 nest id per item
    n_nests: int

    def __post_init__(self):
        counts = np.bincount(self.assignment, minlength=self.n_nests)
        if self.assignment.min() < 0 or self.assignment.max() >= self.n_nests:
            raise ConfigurationError("nest ids out of range")
        if (counts == 0).any():
            raise ConfigurationError("every nest must be non-empty")


def random_nests(n_items: int, n_nests: int, rng: RngHandle) -> NestStructure:
    """Assign items to nests by a seeded random near-even partition."""
    if not (1 <= n_nests <= n_items):
        raise ConfigurationError("need 1 <= n_nests <= n_items")
    perm = rng.generator().permutation(n_items)
    assignment = np.empty(n_items, dtype=np.int64)
    assignment[perm] = np.arange(n_items) % n_nests
    return NestStructure(assignment=assignment, n_nests=n_nests)


# ---------------------------------------------------------------------------
# Scoring and ranking
# ---------------------------------------------------------------------------

def score(params: ModelParams, user: int, item: int) -> float:
    return float(params.item_intercepts[item]
                 + params.user_factors[user] @ params.item_factors[item])


def score_table(params: ModelParams) -> np.ndarray:
    """Dense (n_users, n_items) score matrix."""
    return params.user_factors @ params.item_factors.T + params.item_intercepts


def predict_ranking(params: ModelParams, user: int, items: Sequence[int]) -> list[int]:
    """Items sorted by descending score; ties broken by ascending item id."""
    if len(items) == 0:
        raise ContractError("cannot rank an empty item list")
    ids = np.asarray(items, dtype=np.int64)
    scores = params.item_intercepts[ids] + params.item_factors[ids] @ params.user_factors[user]
    order = np.lexsort((ids, -scores))
    return [int(i) for i in ids[order]]


# ---------------------------------------------------------------------------
# Slate probabilities (mnl / gev)
# ---------------------------------------------------------------------------

def slate_log_probs(kind: str, params: ModelParams, user: int,
                    slate_items: Sequence[int],
                    nests: NestStructure | None = None) -> np.ndarray:
    """Log choice probability of each slate position under mnl or gev."""
    ids = np.asarray(slate_items, dtype=np.int64)
    s = params.item_intercepts[ids] + params.item_factors[ids] @ params.user_factors[user]
    if kind == KIND_MNL:
        m = s.max()
        return s - m - np.log(np.exp(s - m).sum())
    if kind == KIND_GEV:
        if nests is None:
            raise ContractError("gev requires a nest structure")
        lam = params.nest_scales()
        nj = nests.assignment[ids]
        z = s / lam[nj]
        same = nj[:, None] == nj[None, :]
        zmax = np.where(same, z[None, :], -np.inf).max(axis=1)
        L = zmax + np.log(np.where(same, np.exp(z[None, :] - zmax[:, None]), 0.0).sum(axis=1))
        cnt = same.sum(axis=1)
        a = lam[nj] * L
        amax = a.max()
        G = amax + np.log((np.exp(a - amax) / cnt).sum())
        return z + (lam[nj] - 1.0) * L - G
    raise ContractError(f"slate probabilities are only defined for mnl/gev, not {kind!r}")


# ---------------------------------------------------------------------------
# Negative sampling and propensities
# ---------------------------------------------------------------------------

def negative_candidates(arrays: EventArrays, n_users: int, n_items: int
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Per-user candidate pools: every item the user never chose in training.

    Returns a padded (n_users, n_items) id matrix (valid candidates first,
    ascending) and the per-user pool sizes.
    """
    mask = np.ones((n_users, n_items), dtype=bool)
    mask[arrays.users, arrays.chosen_items] = False
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise ContractError("a user has chosen every catalog item; no negatives exist")
    cand = np.where(mask, np.arange(n_items)[None, :], n_items).astype(np.int64)
    cand.sort(axis=1)
    return cand, lengths.astype(np.int64)


def draw_negatives(cand: np.ndarray, lengths: np.ndarray, users: np.ndarray,
                   n_negatives: int, gen: np.random.Generator) -> np.ndarray:
    """Uniform draws (with replacement across slots) from each event's pool."""
    r = gen.random((users.shape[0], n_negatives))
    idx = (r * lengths[users][:, None]).astype(np.int64)
    return cand[users[:, None], idx]


def propensity_vector(arrays: EventArrays, n_items: int) -> np.ndarray:
    """Empirical exposure frequency: share of events whose slate shows the item."""
    counts = np.bincount(arrays.slates.ravel(), minlength=n_items)
    return counts / float(len(arrays))


def ips_weights(propensity: np.ndarray, chosen_items: np.ndarray) -> np.ndarray:
    return 1.0 / np.maximum(propensity[chosen_items], PROPENSITY_CLIP)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _softplus(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(x)))


def event_loss(kind: str, params: ModelParams, event: ChoiceEvent,
               nests: NestStructure | None = None,
               propensity: np.ndarray | None = None,
               negatives: Sequence[int] | None = None) -> float:
    """Loss contribution of a single logged event under the given kind."""
    items = event.slate.items
    user = event.user
    if kind in (KIND_MNL, KIND_GEV):
        return float(-slate_log_probs(kind, params, user, items, nests)[event.chosen_index])
    if kind == KIND_BL:
        ids = np.asarray(items, dtype=np.int64)
        s = (params.item_intercepts[ids]
             + params.item_factors[ids] @ params.user_factors[user]
             + params.bl_offset)
        y = np.zeros(len(items))
        y[event.chosen_index] = 1.0
        return float((_softplus(s) - y * s).sum())
    if kind in NEGATIVE_SAMPLING_KINDS:
        if negatives is None:
            raise ContractError(f"{kind} requires explicit negatives")
        sc = score(params, user, event.chosen_item)
        sn = np.array([score(params, user, n) for n in negatives])
        base = float(_softplus(-(sc - sn)).sum())
        if kind == KIND_BPR:
            return base
        if propensity is None:
            raise ContractError("ips_bpr requires a propensity vector")
        return base * float(ips_weights(propensity, np.array([event.chosen_item]))[0])
    raise ContractError(f"kind {kind!r} has no training loss")


@dataclass
class Gradients:
    """Same shapes as ModelParams."""

    user_factors: np.ndarray
    item_factors: np.ndarray
    item_intercepts: np.ndarray
    nest_logits: np.ndarray
    bl_offset: float = 0.0


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


def _as_arrays(batch) -> EventArrays:
    if isinstance(batch, EventArrays):
        return batch
    return event_arrays(batch)


def loss_and_gradient(kind: str, params: ModelParams, batch,
                      reg: float = 0.0,
                      nests: NestStructure | None = None,
                      propensity: np.ndarray | None = None,
                      rng: RngHandle | None = None,
                      n_negatives: int = 4,
                      negatives: np.ndarray | None = None,
                      neg_pool: tuple[np.ndarray, np.ndarray] | None = None,
                      ) -> tuple[float, Gradients]:
    """Mean event loss over the batch plus L2 on the factor matrices.

    The penalty is reg * (|user_factors|^2 + |item_factors|^2); intercepts,
    nest scales and the offset are unpenalized. For the negative-sampling
    kinds, negatives are drawn inside from ``rng`` (or taken from the
    explicit ``negatives`` array, one row per event).
    """
    arrays = _as_arrays(batch)
    if len(arrays) == 0:
        raise ContractError("batch must be non-empty")
    n_users, n_items = params.n_users, params.n_items
    S_full = score_table(params)
    C = np.zeros((n_users, n_items))
    glam_logits = np.zeros_like(params.nest_logits)
    goff = 0.0

    if kind == KIND_MNL:
        loss = _kernels.mnl_epoch(S_full, arrays.users, arrays.slates, arrays.chosen, C)
    elif kind == KIND_GEV:
        if nests is None:
            raise ContractError("gev requires a nest structure")
        lam = params.nest_scales()
        glam = np.zeros_like(lam)
        loss = _kernels.gev_epoch(S_full, arrays.users, arrays.slates, arrays.chosen,
                                  nests.assignment, lam, C, glam)
        glam_logits = glam * lam * (1.0 - lam)
    elif kind == KIND_BL:
        loss, goff = _kernels.bl_epoch(S_full, arrays.users, arrays.slates,
                                       arrays.chosen, params.bl_offset, C)
    elif kind in NEGATIVE_SAMPLING_KINDS:
        pos_items = arrays.chosen_items
        if negatives is None:
            if rng is None:
                raise ContractError(f"{kind} requires an rng handle or explicit negatives")
            if neg_pool is None:
                neg_pool = negative_candidates(arrays, n_users, n_items)
            cand, lengths = neg_pool
            negatives = draw_negatives(cand, lengths, arrays.users, n_negatives,
                                       rng.generator())
        if kind == KIND_IPS_BPR:
            if propensity is None:
                raise ContractError("ips_bpr requires a propensity vector")
            weights = ips_weights(propensity, pos_items)
        else:
            weights = np.ones(len(arrays))
        loss = _kernels.bpr_epoch(S_full, arrays.users, pos_items,
                                  np.ascontiguousarray(negatives, dtype=np.int64),
                                  weights, C)
    else:
        raise ContractError(f"kind {kind!r} has no training loss")

    loss = float(loss)
    loss += reg * (float(np.sum(params.user_factors ** 2))
                   + float(np.sum(params.item_factors ** 2)))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss for kind {kind!r}")

    grads = Gradients(
        user_factors=C @ params.item_factors + 2.0 * reg * params.user_factors,
        item_factors=C.T @ params.user_factors + 2.0 * reg * params.item_factors,
        item_intercepts=C.sum(axis=0),
        nest_logits=glam_logits,
        bl_offset=float(goff),
    )
    return loss, grads
