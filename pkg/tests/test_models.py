"""Model losses and gradients checked against naive scalar references.

The reference routines below recompute every loss directly from its
definition (plain exp/log arithmetic, no shared code with the package) so
the production kernels are verified against an independent path.
"""

import math

import numpy as np
import pytest

from slatebias.core import ChoiceEvent, ContractError, RngHandle, Slate, event_arrays
from slatebias.models import (
    ALL_KINDS,
    Gradients,
    KIND_BL,
    KIND_BPR,
    KIND_GEV,
    KIND_IPS_BPR,
    KIND_MNL,
    KIND_POPULARITY,
    ModelParams,
    NestStructure,
    PROPENSITY_CLIP,
    event_loss,
    loss_and_gradient,
    negative_candidates,
    predict_ranking,
    propensity_vector,
    random_nests,
    score,
    slate_log_probs,
    zero_params,
)


# ---------------------------------------------------------------------------
# Reference implementations (independent oracles)
# ---------------------------------------------------------------------------

def ref_score(params, u, i):
    s = params.item_intercepts[i]
    for d in range(params.dim):
        s += params.user_factors[u, d] * params.item_factors[i, d]
    return float(s)


def ref_mnl_loss(params, event):
    exps = [math.exp(ref_score(params, event.user, i)) for i in event.slate.items]
    return -math.log(exps[event.chosen_index] / sum(exps))


def ref_gev_loss(params, event, nests):
    lam = 1.0 / (1.0 + np.exp(-params.nest_logits))
    items = event.slate.items
    groups = {}
    for i in items:
        groups.setdefault(int(nests.assignment[i]), []).append(i)
    denom = 0.0
    for m, members in groups.items():
        t = sum(math.exp(ref_score(params, event.user, i) / lam[m]) for i in members)
        denom += t ** lam[m]
    c = items[event.chosen_index]
    mc = int(nests.assignment[c])
    t_c = sum(math.exp(ref_score(params, event.user, i) / lam[mc])
              for i in groups[mc])
    p = math.exp(ref_score(params, event.user, c) / lam[mc]) * t_c ** (lam[mc] - 1.0) / denom
    return -math.log(p)


def ref_bl_loss(params, event):
    total = 0.0
    for pos, i in enumerate(event.slate.items):
        x = ref_score(params, event.user, i) + params.bl_offset
        p = 1.0 / (1.0 + math.exp(-x))
        y = 1.0 if pos == event.chosen_index else 0.0
        total += -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))
    return total


def ref_bpr_loss(params, event, negatives, weight=1.0):
    sc = ref_score(params, event.user, event.chosen_item)
    total = 0.0
    for n in negatives:
        x = sc - ref_score(params, event.user, n)
        total += -math.log(1.0 / (1.0 + math.exp(-x)))
    return weight * total


def random_params(n_users, n_items, dim, n_nests, seed):
    gen = np.random.default_rng(seed)
    return ModelParams(user_factors=gen.normal(0, 0.5, (n_users, dim)),
                       item_factors=gen.normal(0, 0.5, (n_items, dim)),
                       item_intercepts=gen.normal(0, 0.5, n_items),
                       nest_logits=gen.normal(0, 0.7, n_nests),
                       bl_offset=float(gen.normal(0, 0.5)))


def random_events(n_events, n_users, n_items, k, seed, policy="uniform_a"):
    gen = np.random.default_rng(seed)
    events = []
    for _ in range(n_events):
        items = tuple(sorted(int(i) for i in gen.choice(n_items, k, replace=False)))
        events.append(ChoiceEvent(user=int(gen.integers(n_users)),
                                  slate=Slate(items=items, policy_tag=policy),
                                  chosen_index=int(gen.integers(k))))
    return events


# ---------------------------------------------------------------------------
# score / ranking
# ---------------------------------------------------------------------------

def test_score_intercept_only():
    params = zero_params(2, 3, 2, 1)
    params.item_intercepts[1] = 0.7
    assert score(params, 0, 1) == pytest.approx(0.7)


def test_score_dot_product():
    params = zero_params(1, 1, 2, 1)
    params.user_factors[0] = [1.0, 2.0]
    params.item_factors[0] = [3.0, -1.0]
    assert score(params, 0, 0) == pytest.approx(1.0)


def test_predict_ranking_orders_by_score():
    params = zero_params(1, 2, 1, 1)
    params.item_intercepts[:] = [0.2, 0.9]
    assert predict_ranking(params, 0, [0, 1]) == [1, 0]


def test_predict_ranking_tie_breaks_ascending():
    params = zero_params(1, 5, 1, 1)
    assert predict_ranking(params, 0, [4, 2, 0, 3]) == [0, 2, 3, 4]


def test_predict_ranking_matches_sort_oracle():
    params = random_params(3, 50, 4, 2, seed=5)
    items = list(range(50))
    got = predict_ranking(params, 1, items)
    expected = [i for _, i in sorted(((-ref_score(params, 1, i), i) for i in items))]
    assert got == expected


def test_rank_invariance_under_intercept_shift():
    params = random_params(2, 20, 3, 2, seed=8)
    before = predict_ranking(params, 0, list(range(20)))
    params.item_intercepts += 3.7
    assert predict_ranking(params, 0, list(range(20))) == before


# ---------------------------------------------------------------------------
# event_loss
# ---------------------------------------------------------------------------

def test_mnl_loss_uniform_slate():
    params = zero_params(1, 4, 2, 1)
    ev = ChoiceEvent(0, Slate((0, 1, 2, 3), "uniform_a"), 2)
    assert event_loss(KIND_MNL, params, ev) == pytest.approx(math.log(4.0), abs=1e-12)


def test_mnl_loss_matches_reference():
    params = zero_params(1, 4, 1, 1)
    params.item_intercepts[:] = [1.0, 0.5, 0.0, -0.5]
    ev = ChoiceEvent(0, Slate((0, 1, 2, 3), "uniform_a"), 0)
    assert event_loss(KIND_MNL, params, ev) == pytest.approx(ref_mnl_loss(params, ev),
                                                             abs=1e-12)


def test_bl_loss_all_zero_scores():
    params = zero_params(1, 4, 2, 1)
    ev = ChoiceEvent(0, Slate((0, 1, 2, 3), "uniform_a"), 1)
    assert event_loss(KIND_BL, params, ev) == pytest.approx(4.0 * math.log(2.0), abs=1e-12)


def test_gev_unit_scales_reduce_to_mnl():
    nests = random_nests(12, 3, RngHandle(4))
    params = random_params(3, 12, 3, 3, seed=2)
    params.nest_logits[:] = 40.0  # logistic(40) == 1.0 in float64
    for ev in random_events(25, 3, 12, 4, seed=6):
        assert event_loss(KIND_GEV, params, ev, nests=nests) == pytest.approx(
            event_loss(KIND_MNL, params, ev), abs=1e-10)


def test_gev_loss_matches_reference():
    nests = random_nests(12, 3, RngHandle(4))
    params = random_params(3, 12, 3, 3, seed=3)
    for ev in random_events(25, 3, 12, 4, seed=7):
        assert event_loss(KIND_GEV, params, ev, nests=nests) == pytest.approx(
            ref_gev_loss(params, ev, nests), rel=1e-10)


def test_bl_loss_matches_reference():
    params = random_params(3, 12, 3, 1, seed=9)
    for ev in random_events(10, 3, 12, 4, seed=10):
        assert event_loss(KIND_BL, params, ev) == pytest.approx(ref_bl_loss(params, ev),
                                                                rel=1e-10)


def test_bpr_loss_matches_reference_and_requires_negatives():
    params = random_params(3, 12, 3, 1, seed=11)
    ev = random_events(1, 3, 12, 4, seed=12)[0]
    negs = [0, 5, 9]
    assert event_loss(KIND_BPR, params, ev, negatives=negs) == pytest.approx(
        ref_bpr_loss(params, ev, negs), rel=1e-10)
    with pytest.raises(ContractError):
        event_loss(KIND_BPR, params, ev)


def test_ips_loss_weights_by_inverse_propensity():
    params = random_params(3, 12, 3, 1, seed=13)
    events = random_events(40, 3, 12, 4, seed=14)
    prop = propensity_vector(event_arrays(events), 12)
    ev = events[0]
    negs = [1, 2]
    w = 1.0 / max(prop[ev.chosen_item], PROPENSITY_CLIP)
    assert event_loss(KIND_IPS_BPR, params, ev, propensity=prop,
                      negatives=negs) == pytest.approx(
        ref_bpr_loss(params, ev, negs, weight=w), rel=1e-10)


def test_popularity_has_no_training_loss():
    params = zero_params(1, 4, 1, 1)
    ev = ChoiceEvent(0, Slate((0, 1, 2, 3), "uniform_a"), 0)
    with pytest.raises(ContractError):
        event_loss(KIND_POPULARITY, params, ev)


# ---------------------------------------------------------------------------
# implied slate probabilities
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", [KIND_MNL, KIND_GEV])
def test_slate_probabilities_sum_to_one(kind):
    nests = random_nests(12, 3, RngHandle(4))
    params = random_params(3, 12, 3, 3, seed=15)
    for ev in random_events(30, 3, 12, 4, seed=16):
        logp = slate_log_probs(kind, params, ev.user, ev.slate.items, nests=nests)
        p = np.exp(logp)
        assert abs(p.sum() - 1.0) < 1e-9
        assert (p > 0).all()


def test_multivariate_vs_univariate_separation():
    # perturbing an unchosen slate member moves the mnl loss but leaves the
    # other items' bl terms untouched
    params = zero_params(1, 4, 1, 1)
    params.item_intercepts[:] = [0.5, 0.1, -0.2, 0.3]
    ev = ChoiceEvent(0, Slate((0, 1, 2, 3), "uniform_a"), 0)
    mnl_before = event_loss(KIND_MNL, params, ev)
    bl_before = ref_bl_loss(params, ev)

    def bl_term(pos):
        x = ref_score(params, 0, ev.slate.items[pos]) + params.bl_offset
        p = 1.0 / (1.0 + math.exp(-x))
        y = 1.0 if pos == ev.chosen_index else 0.0
        return -(y * math.log(p) + (1 - y) * math.log(1 - p))

    terms_before = [bl_term(j) for j in range(4)]
    params.item_intercepts[2] += 1.0  # unchosen member
    assert abs(event_loss(KIND_MNL, params, ev) - mnl_before) > 1e-3
    terms_after = [bl_term(j) for j in range(4)]
    for j in (0, 1, 3):
        assert terms_after[j] == pytest.approx(terms_before[j], abs=1e-15)
    assert abs(event_loss(KIND_BL, params, ev) - bl_before) == pytest.approx(
        abs(terms_after[2] - terms_before[2]), rel=1e-9)


# ---------------------------------------------------------------------------
# loss_and_gradient (batch path)
# ---------------------------------------------------------------------------

def test_batch_loss_equals_mean_event_loss():
    nests = random_nests(12, 3, RngHandle(4))
    params = random_params(4, 12, 3, 3, seed=17)
    events = random_events(20, 4, 12, 4, seed=18)
    for kind in (KIND_MNL, KIND_GEV, KIND_BL):
        batch_loss, _ = loss_and_gradient(kind, params, events, reg=0.0, nests=nests)
        mean_loss = np.mean([event_loss(kind, params, ev, nests=nests) for ev in events])
        assert batch_loss == pytest.approx(mean_loss, rel=1e-12)


def test_batch_loss_includes_regularization():
    params = random_params(2, 6, 2, 1, seed=19)
    events = random_events(5, 2, 6, 3, seed=20)
    l0, _ = loss_and_gradient(KIND_MNL, params, events, reg=0.0)
    l1, _ = loss_and_gradient(KIND_MNL, params, events, reg=0.5)
    penalty = 0.5 * (np.sum(params.user_factors ** 2) + np.sum(params.item_factors ** 2))
    assert l1 - l0 == pytest.approx(penalty, rel=1e-12)


def test_zero_params_mnl_intercept_gradient_closed_form():
    # at the origin every slate is uniform, so the intercept gradient is
    # mean over events of (1/k per exposed slot minus 1 if chosen)
    params = zero_params(3, 8, 2, 1)
    events = random_events(40, 3, 8, 4, seed=21)
    _, grads = loss_and_gradient(KIND_MNL, params, events, reg=0.0)
    expected = np.zeros(8)
    for ev in events:
        for i in ev.slate.items:
            expected[i] += 0.25
        expected[ev.chosen_item] -= 1.0
    expected /= len(events)
    np.testing.assert_allclose(grads.item_intercepts, expected, atol=1e-12)


def test_saturated_softmax_loss_vanishes():
    params = zero_params(1, 4, 1, 1)
    params.item_intercepts[0] = 50.0
    ev = ChoiceEvent(0, Slate((0, 1, 2, 3), "uniform_a"), 0)
    loss, _ = loss_and_gradient(KIND_MNL, params, [ev], reg=0.0)
    assert loss < 1e-20


def test_gev_unit_scales_match_mnl_gradients():
    nests = random_nests(10, 4, RngHandle(2))
    params = random_params(3, 10, 3, 4, seed=22)
    params.nest_logits[:] = 40.0
    events = random_events(30, 3, 10, 4, seed=23)
    l_gev, g_gev = loss_and_gradient(KIND_GEV, params, events, reg=0.0, nests=nests)
    l_mnl, g_mnl = loss_and_gradient(KIND_MNL, params, events, reg=0.0)
    assert l_gev == pytest.approx(l_mnl, abs=1e-9)
    np.testing.assert_allclose(g_gev.user_factors, g_mnl.user_factors, atol=1e-9)
    np.testing.assert_allclose(g_gev.item_factors, g_mnl.item_factors, atol=1e-9)
    np.testing.assert_allclose(g_gev.item_intercepts, g_mnl.item_intercepts, atol=1e-9)
    # the scale gradient dies through the logistic chain at lambda = 1
    np.testing.assert_allclose(g_gev.nest_logits, 0.0, atol=1e-12)


def test_negative_candidates_exclude_chosen():
    events = random_events(30, 4, 10, 3, seed=24)
    arrays = event_arrays(events)
    cand, lengths = negative_candidates(arrays, 4, 10)
    chosen_by_user = {}
    for ev in events:
        chosen_by_user.setdefault(ev.user, set()).add(ev.chosen_item)
    for u in range(4):
        pool = set(cand[u, :lengths[u]].tolist())
        assert not pool & chosen_by_user.get(u, set())
        assert pool | chosen_by_user.get(u, set()) == set(range(10))


def test_propensity_is_exposure_frequency():
    events = random_events(50, 3, 8, 4, seed=25)
    prop = propensity_vector(event_arrays(events), 8)
    for i in range(8):
        freq = np.mean([i in ev.slate.items for ev in events])
        assert prop[i] == pytest.approx(freq)
