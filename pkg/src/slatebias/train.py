"""Deterministic gradient-based fitting of every model kind.

One shared first-order optimizer (adaptive moments) with a fixed epoch
count; no early stopping, so a fit is a pure function of (events, hyper
parameters, rng handle). The counting kinds (popularity, random) skip
optimization entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ContractError, ConfigurationError, EventArrays, RngHandle
from .models import (
    Gradients,
    KIND_BPR,
    KIND_GEV,
    KIND_IPS_BPR,
    KIND_POPULARITY,
    KIND_RANDOM,
    ALL_KINDS,
    NEGATIVE_SAMPLING_KINDS,
    TRAINED_KINDS,
    ModelParams,
    NestStructure,
    TrainingError,
    _as_arrays,
    loss_and_gradient,
    negative_candidates,
    propensity_vector,
)

# Child-stream offsets inside one fit. Negatives and shuffling get one
# stream per epoch so that non-sampling kinds never consume them.
_SUB_INIT = 0
_SUB_SCORES = 2
_SUB_NEG_BASE = 1_000_000
_SUB_SHUFFLE_BASE = 2_000_000


@dataclass(frozen=True)
class HyperParams:
    dim: int = 8
    learning_rate: float = 0.05
    epochs: int = 300
    reg: float = 1e-3
    batch_size: int | None = None      # None = full batch
    n_negatives: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1 when set")


@dataclass
class TrainedModel:
    kind: str
    params: ModelParams
    final_loss: float
    loss_trace: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "final_loss": self.final_loss,
                "loss_trace": list(self.loss_trace), "params": self.params.to_dict()}


def _init_params(n_users: int, n_items: int, hyper: HyperParams,
                 n_nests: int, rng: RngHandle) -> ModelParams:
    gen = rng.generator()
    return ModelParams(
        user_factors=gen.normal(0.0, 0.01, size=(n_users, hyper.dim)),
        item_factors=gen.normal(0.0, 0.01, size=(n_items, hyper.dim)),
        item_intercepts=np.zeros(n_items),
        nest_logits=np.zeros(n_nests),
        bl_offset=0.0,
    )


class _Adam:
    def __init__(self, shapes, hyper: HyperParams):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0
        self.hyper = hyper

    def step(self, arrays, grads):
        h = self.hyper
        self.t += 1
        bc1 = 1.0 - h.beta1 ** self.t
        bc2 = 1.0 - h.beta2 ** self.t
        for i, (x, g) in enumerate(zip(arrays, grads)):
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g
            x -= h.learning_rate * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + h.adam_eps)


def fit(kind: str, events, n_users: int, n_items: int, hyper: HyperParams,
        nests: NestStructure, rng: RngHandle) -> TrainedModel:
    """Fit one model kind on the given events.

    Deterministic given (rng handle, hyper, event order). The counting
    kinds return immediately with an all-zero loss trace.
    """
    if kind not in ALL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    arrays = _as_arrays(events) if len(events) else None
    if kind == KIND_POPULARITY:
        params = ModelParams(np.zeros((n_users, hyper.dim)), np.zeros((n_items, hyper.dim)),
                             np.zeros(n_items), np.zeros(nests.n_nests), 0.0)
        if arrays is not None:
            counts = np.bincount(arrays.chosen_items, minlength=n_items).astype(np.float64)
            params.item_intercepts = counts
        return TrainedModel(kind, params, 0.0, (0.0,) * hyper.epochs)
    if kind == KIND_RANDOM:
        gen = rng.child(_SUB_SCORES).generator()
        params = ModelParams(np.zeros((n_users, hyper.dim)), np.zeros((n_items, hyper.dim)),
                             gen.random(n_items), np.zeros(nests.n_nests), 0.0)
        return TrainedModel(kind, params, 0.0, (0.0,) * hyper.epochs)

    if arrays is None or len(arrays) == 0:
        raise ContractError(f"kind {kind!r} needs a non-empty event list")

    params = _init_params(n_users, n_items, hyper, nests.n_nests, rng.child(_SUB_INIT))
    propensity = None
    neg_pool = None
    if kind in NEGATIVE_SAMPLING_KINDS:
        neg_pool = negative_candidates(arrays, n_users, n_items)
        if kind == KIND_IPS_BPR:
            propensity = propensity_vector(arrays, n_items)

    adam = _Adam([params.user_factors.shape, params.item_factors.shape,
                  params.item_intercepts.shape, params.nest_logits.shape, ()], hyper)
    trace = []
    offset_holder = np.zeros(())  # scalar offset as a 0-d array for the optimizer

    for epoch in range(hyper.epochs):
        neg_rng = rng.child(_SUB_NEG_BASE + epoch) if kind in NEGATIVE_SAMPLING_KINDS else None
        if hyper.batch_size is None:
            batches = [arrays]
        else:
            order = rng.child(_SUB_SHUFFLE_BASE + epoch).generator().permutation(len(arrays))
            batches = [
                EventArrays(arrays.users[idx], arrays.slates[idx], arrays.chosen[idx],
                            tuple(arrays.policies[i] for i in idx))
                for idx in np.array_split(order, max(1, len(order) // hyper.batch_size))
            ]
        epoch_losses = []
        for b_i, batch in enumerate(batches):
            try:
                loss, grads = loss_and_gradient(
                    kind, params, batch, reg=hyper.reg, nests=nests,
                    propensity=propensity, rng=neg_rng,
                    n_negatives=hyper.n_negatives, neg_pool=neg_pool)
            except TrainingError as err:
                raise TrainingError(f"{err} at epoch {epoch}", epoch=epoch) from err
            adam.step(
                [params.user_factors, params.item_factors, params.item_intercepts,
                 params.nest_logits, offset_holder],
                [grads.user_factors, grads.item_factors, grads.item_intercepts,
                 grads.nest_logits, np.asarray(grads.bl_offset)],
            )
            params.bl_offset = float(offset_holder)
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
        if not np.isfinite(trace[-1]):
            raise TrainingError(f"non-finite loss for {kind}", epoch=epoch)

    return TrainedModel(kind, params, trace[-1], tuple(trace))


def gradient_check(kind: str, events, hyper: HyperParams, nests: NestStructure,
                   rng: RngHandle, n_users: int, n_items: int,
                   step: float = 1e-5) -> float:
    """Max relative error of the analytic gradient vs central differences.

    Evaluated at a randomized parameter point with negatives held fixed so
    the loss is a deterministic function of the parameters. Intended for
    small instances (tens of events).
    """
    if kind not in TRAINED_KINDS:
        raise ContractError(f"kind {kind!r} has no gradient to check")
    arrays = _as_arrays(events)
    gen = rng.generator()
    params = ModelParams(
        user_factors=gen.normal(0.0, 0.3, size=(n_users, hyper.dim)),
        item_factors=gen.normal(0.0, 0.3, size=(n_items, hyper.dim)),
        item_intercepts=gen.normal(0.0, 0.3, size=n_items),
        nest_logits=gen.normal(0.0, 0.5, size=nests.n_nests),
        bl_offset=float(gen.normal(0.0, 0.3)),
    )
    negatives = None
    propensity = None
    if kind in NEGATIVE_SAMPLING_KINDS:
        cand, lengths = negative_candidates(arrays, n_users, n_items)
        from .models import draw_negatives
        negatives = draw_negatives(cand, lengths, arrays.users, hyper.n_negatives,
                                   rng.child(1).generator())
        propensity = propensity_vector(arrays, n_items)

    def evaluate(p: ModelParams):
        return loss_and_gradient(kind, p, arrays, reg=hyper.reg, nests=nests,
                                 propensity=propensity, negatives=negatives)

    _, grads = evaluate(params)

    fields = [("user_factors", grads.user_factors), ("item_factors", grads.item_factors),
              ("item_intercepts", grads.item_intercepts), ("nest_logits", grads.nest_logits)]
    max_err = 0.0

    def fd(setter_get):
        nonlocal max_err
        base, analytic = setter_get
        flat_g = np.asarray(analytic).ravel()
        flat_x = base.ravel()
        for i in range(flat_x.size):
            orig = flat_x[i]
            flat_x[i] = orig + step
            up, _ = evaluate(params)
            flat_x[i] = orig - step
            down, _ = evaluate(params)
            flat_x[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = flat_g[i]
            if abs(a) + abs(numeric) > 1e-10:
                max_err = max(max_err, abs(a - numeric) / (abs(a) + abs(numeric)))

    for name, g in fields:
        fd((getattr(params, name), g))

    # scalar offset
    a = grads.bl_offset
    orig = params.bl_offset
    params.bl_offset = orig + step
    up, _ = evaluate(params)
    params.bl_offset = orig - step
    down, _ = evaluate(params)
    params.bl_offset = orig
    numeric = (up - down) / (2.0 * step)
    if abs(a) + abs(numeric) > 1e-10:
        max_err = max(max_err, abs(a - numeric) / (abs(a) + abs(numeric)))
    return max_err
