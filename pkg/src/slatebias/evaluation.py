"""Headline measurements: chance-corrected rank-shift bias and nDCG.

Bias is measured between the two members of a dataset pair: train the
same model kind on each member, rank set_b for every eval user, and take
the per-bias-item difference of mean ranks (control minus treated). A
positive shift means the treated exposure made the model rank the item
better. The chance term subtracted from the mean shift comes from null
pairs whose members differ only by independent uniform sampling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ContractError, ItemCatalog, RngHandle, UserSplit
from .design import (
    DatasetPair,
    EXPERIMENT_NULL,
    SessionMix,
    build_pair,
    training_view,
)
from .models import ModelParams, NestStructure
from .oracle import BehaviorSpec, LatentPopulation
from .train import HyperParams, TrainedModel, fit


# ---------------------------------------------------------------------------
# Rank tables
# ---------------------------------------------------------------------------

def eval_rank_table(params: ModelParams, split: UserSplit, catalog: ItemCatalog
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Per-(eval user, set_b item) rank, 1 = best.

    Returns (item ids, ranks) where ranks has one row per eval user and
    each row is a permutation of 1..|set_b|. Ties break by ascending id.
    """
    users = np.asarray(split.eval_users, dtype=np.int64)
    items = np.asarray(catalog.set_b, dtype=np.int64)
    scores = (params.item_intercepts[items]
              + params.user_factors[users] @ params.item_factors[items].T)
    ranks = np.empty(scores.shape, dtype=np.int64)
    positions = np.arange(1, items.size + 1)
    for r in range(users.size):
        order = np.lexsort((items, -scores[r]))
        ranks[r, order] = positions
    return items, ranks


def mean_eval_rank(model: TrainedModel, split: UserSplit, catalog: ItemCatalog
                   ) -> dict[int, float]:
    """Mean rank of each set_b item across eval users."""
    items, ranks = eval_rank_table(model.params, split, catalog)
    means = ranks.mean(axis=0)
    return {int(i): float(m) for i, m in zip(items, means)}


# ---------------------------------------------------------------------------
# Pair bias
# ---------------------------------------------------------------------------

def pair_bias(kind: str, pair: DatasetPair, split: UserSplit, catalog: ItemCatalog,
              hyper: HyperParams, nests: NestStructure, rng: RngHandle,
              independent_members: bool = True) -> dict[int, float]:
    """Per-bias-item rank shift between the pair members.

    shift(i) = mean eval rank under the control member minus under the
    treated member, so positive means the treated exposure improved the
    item's estimated rank. Each member trains on its leak-free view with
    its own derived stream (or a shared one when requested, in which case
    identical members produce exactly zero shifts).
    """
    n_users, n_items = split.n_users, catalog.n_items
    rng_t = rng.child(0)
    rng_c = rng.child(0) if not independent_members else rng.child(1)
    model_t = fit(kind, training_view(pair.treated, split, catalog),
                  n_users, n_items, hyper, nests, rng_t)
    model_c = fit(kind, training_view(pair.control, split, catalog),
                  n_users, n_items, hyper, nests, rng_c)
    ranks_t = mean_eval_rank(model_t, split, catalog)
    ranks_c = mean_eval_rank(model_c, split, catalog)
    return {i: ranks_c[i] - ranks_t[i] for i in catalog.bias_set}


def null_bias(kind: str, catalog: ItemCatalog, split: UserSplit,
              pop: LatentPopulation, behavior: BehaviorSpec, hyper: HyperParams,
              nests: NestStructure, rng: RngHandle, n_null: int,
              mix: SessionMix = SessionMix(), k: int = 4) -> float:
    """Mean bias over pairs whose members differ only by chance.

    Both members of a null pair draw their distinguishing block from the
    uniform policy with independent randomness, so any mean shift is the
    finite-sample noise floor that the bias reports subtract.
    """
    if n_null < 1:
        raise ContractError("n_null must be >= 1")
    means = []
    for j in range(n_null):
        pair = build_pair(pop, catalog, split, EXPERIMENT_NULL, behavior,
                          rng.child(2 * j), mix=mix, k=k)
        shifts = pair_bias(kind, pair, split, catalog, hyper, nests, rng.child(2 * j + 1))
        means.append(float(np.mean(list(shifts.values()))))
    return float(np.mean(means))


# ---------------------------------------------------------------------------
# nDCG
# ---------------------------------------------------------------------------

def ndcg_at_k(model: TrainedModel, pop: LatentPopulation, split: UserSplit,
              catalog: ItemCatalog, k: int = 10, n_relevant: int = 5) -> float:
    """Position-discounted overlap with each eval user's true top items.

    relevance(u, i) = 1 iff i is among u's ``n_relevant`` best set_b items
    by true utility. DCG sums 1/log2(pos + 1) over the top k predicted
    positions; the ideal places all relevant items first.
    """
    items = np.asarray(catalog.set_b, dtype=np.int64)
    if k > items.size:
        raise ContractError(f"k = {k} exceeds |set_b| = {items.size}")
    users = np.asarray(split.eval_users, dtype=np.int64)
    true = (pop.item_intercepts[items]
            + pop.user_factors[users] @ pop.item_factors[items].T)
    top = np.argsort(-true, axis=1, kind="stable")[:, :n_relevant]
    relevant = np.zeros(true.shape, dtype=bool)
    relevant[np.arange(users.size)[:, None], top] = True
    _, ranks = eval_rank_table(model.params, split, catalog)
    gain = np.where(relevant & (ranks <= k), 1.0 / np.log2(ranks + 1.0), 0.0)
    ideal = (1.0 / np.log2(np.arange(1, min(k, n_relevant) + 1) + 1.0)).sum()
    return float((gain.sum(axis=1) / ideal).mean())


# ---------------------------------------------------------------------------
# Uncertainty and reports
# ---------------------------------------------------------------------------

def bootstrap_ci(samples: Sequence[float], level: float = 0.95,
                 rng: RngHandle | None = None, n_resamples: int = 2000
                 ) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of the samples."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise ContractError("bootstrap_ci needs at least 2 samples")
    if not (0.0 < level < 1.0):
        raise ContractError("level must be in (0, 1)")
    gen = (rng or RngHandle(0)).generator()
    idx = gen.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass(frozen=True)
class BiasReport:
    model_kind: str
    experiment: str
    per_item_shift: dict[int, float]
    mean_bias: float
    null_bias: float
    corrected_bias: float
    ci_low: float
    ci_high: float
    n_repetitions: int

    def to_dict(self) -> dict:
        return {
            "model": self.model_kind, "experiment": self.experiment,
            "per_item_shift": {str(k): v for k, v in self.per_item_shift.items()},
            "mean_bias": self.mean_bias, "null_bias": self.null_bias,
            "corrected_bias": self.corrected_bias,
            "ci_low": self.ci_low, "ci_high": self.ci_high,
            "n_repetitions": self.n_repetitions,
        }


@dataclass(frozen=True)
class AccuracyReport:
    model_kind: str
    experiment: str
    condition: str        # pair member the model was trained on
    ndcg_at_k: float
    k: int
    ci_low: float
    ci_high: float
    n_repetitions: int

    def to_dict(self) -> dict:
        return {
            "model": self.model_kind, "experiment": self.experiment,
            "condition": self.condition, "ndcg_at_k": self.ndcg_at_k, "k": self.k,
            "ci_low": self.ci_low, "ci_high": self.ci_high,
            "n_repetitions": self.n_repetitions,
        }


def build_bias_report(model_kind: str, experiment: str,
                      per_rep_shifts: Sequence[dict[int, float]],
                      null_value: float, rng: RngHandle,
                      level: float = 0.95, n_resamples: int = 2000) -> BiasReport:
    """Aggregate per-repetition shifts: users were averaged first (inside
    mean_eval_rank), then bias items, then repetitions."""
    items = sorted(per_rep_shifts[0])
    mat = np.array([[s[i] for i in items] for s in per_rep_shifts])  # (R, n_bias)
    per_item = {i: float(m) for i, m in zip(items, mat.mean(axis=0))}
    rep_means = mat.mean(axis=1)
    mean_bias = float(rep_means.mean())
    corrected = mean_bias - null_value
    if rep_means.size >= 2:
        lo, hi = bootstrap_ci(rep_means, level=level, rng=rng, n_resamples=n_resamples)
        lo, hi = lo - null_value, hi - null_value
    else:
        lo = hi = corrected
    # the interval is for the corrected mean; keep the point inside it
    lo, hi = min(lo, corrected), max(hi, corrected)
    return BiasReport(model_kind=model_kind, experiment=experiment,
                      per_item_shift=per_item, mean_bias=mean_bias,
                      null_bias=null_value, corrected_bias=corrected,
                      ci_low=lo, ci_high=hi, n_repetitions=len(per_rep_shifts))


def build_accuracy_report(model_kind: str, experiment: str, condition: str,
                          ndcg_samples: Sequence[float], k: int, rng: RngHandle,
                          level: float = 0.95, n_resamples: int = 2000) -> AccuracyReport:
    x = np.asarray(ndcg_samples, dtype=np.float64)
    mean = float(x.mean())
    if x.size >= 2:
        lo, hi = bootstrap_ci(x, level=level, rng=rng, n_resamples=n_resamples)
    else:
        lo = hi = mean
    return AccuracyReport(model_kind=model_kind, experiment=experiment,
                          condition=condition, ndcg_at_k=mean, k=k,
                          ci_low=lo, ci_high=hi, n_repetitions=x.size)
