import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slatebias.core import (
    ChoiceEvent,
    ChoiceLog,
    ConfigurationError,
    ItemCatalog,
    RngHandle,
    Slate,
    UserSplit,
    build_catalog,
    event_arrays,
    events_from_arrays,
    make_stream,
    partition_users,
    read_context_json,
    read_events_jsonl,
    validate_slate,
    write_context_json,
    write_events_jsonl,
)


def test_build_catalog_default_sizes():
    cat = build_catalog(100, 50, 5, RngHandle(7))
    assert len(cat.set_a) == 50
    assert len(cat.set_b) == 50
    assert len(cat.bias_set) == 5
    assert set(cat.bias_set) <= set(cat.set_b)


def test_build_catalog_smallest_legal():
    cat = build_catalog(2, 1, 1, RngHandle(0))
    assert len(cat.set_a) == 1 and len(cat.set_b) == 1
    assert cat.bias_set == cat.set_b


def test_build_catalog_deterministic():
    assert build_catalog(100, 50, 5, RngHandle(7)) == build_catalog(100, 50, 5, RngHandle(7))
    a = build_catalog(100, 50, 5, RngHandle(7))
    b = build_catalog(100, 50, 5, RngHandle(8))
    assert a != b


@pytest.mark.parametrize("args", [(100, 100, 5), (100, 120, 5), (100, 50, 51), (100, 50, 0)])
def test_build_catalog_size_errors(args):
    with pytest.raises(ConfigurationError):
        build_catalog(*args, RngHandle(0))


@settings(max_examples=50, deadline=None)
@given(n_items=st.integers(2, 60), seed=st.integers(0, 2**32))
def test_catalog_partition_property(n_items, seed):
    size_a = max(1, n_items // 2)
    n_bias = max(1, (n_items - size_a) // 3)
    cat = build_catalog(n_items, size_a, n_bias, RngHandle(seed))
    assert sorted(cat.set_a + cat.set_b) == list(range(n_items))
    assert list(cat.set_a) == sorted(set(cat.set_a))
    assert list(cat.bias_set) == sorted(set(cat.bias_set))


def test_partition_users_counts():
    split = partition_users(300, 1.0 / 3.0, RngHandle(3))
    assert len(split.train_users) == 200
    assert len(split.eval_users) == 100
    assert not set(split.train_users) & set(split.eval_users)


def test_partition_users_smallest():
    split = partition_users(2, 0.5, RngHandle(1))
    assert len(split.train_users) == 1 and len(split.eval_users) == 1


def test_partition_users_deterministic():
    assert partition_users(50, 0.3, RngHandle(5)) == partition_users(50, 0.3, RngHandle(5))


@pytest.mark.parametrize("n,frac", [(10, 0.0), (10, 1.0), (10, 0.01), (3, 0.9)])
def test_partition_users_errors(n, frac):
    with pytest.raises(ConfigurationError):
        partition_users(n, frac, RngHandle(0))


# ---------------------------------------------------------------------------
# RNG contract
# ---------------------------------------------------------------------------

def test_rng_identical_handles_identical_draws():
    a = RngHandle(42, 7).generator().random(16)
    b = RngHandle(42, 7).generator().random(16)
    assert (a == b).all()


def test_rng_distinct_streams_differ():
    a = RngHandle(42, 7).generator().random(16)
    b = RngHandle(42, 8).generator().random(16)
    assert (a != b).any()


def test_rng_children_distinct_from_parent_and_siblings():
    base = RngHandle(42, 7)
    draws = [base.generator().random(8), base.child(0).generator().random(8),
             base.child(1).generator().random(8)]
    for i in range(len(draws)):
        for j in range(i + 1, len(draws)):
            assert (draws[i] != draws[j]).any()


def test_rng_stream_independence_under_call_order():
    # interleaving draws from two handles does not couple their sequences
    h1, h2 = RngHandle(9, 1), RngHandle(9, 2)
    g1, g2 = h1.generator(), h2.generator()
    first = (g1.random(4), g2.random(4))
    g1b, g2b = h1.generator(), h2.generator()
    second_b = g2b.random(4)
    second_a = g1b.random(4)
    assert (first[0] == second_a).all()
    assert (first[1] == second_b).all()


def test_make_stream_injective_on_fields():
    seen = set()
    for purpose in (1, 2):
        for exp in (0, 1, 2):
            for rep in (0, 1, 5):
                for member in (0, 1):
                    for model in (0, 3):
                        s = make_stream(purpose, exp, rep, member, model)
                        assert s not in seen
                        seen.add(s)


# ---------------------------------------------------------------------------
# Types and validation
# ---------------------------------------------------------------------------

def test_slate_rejects_duplicates_and_disorder():
    with pytest.raises(ConfigurationError):
        Slate(items=(1, 1, 2), policy_tag="uniform_a")
    with pytest.raises(ConfigurationError):
        Slate(items=(3, 1, 2), policy_tag="uniform_a")


def test_event_rejects_bad_chosen_index():
    slate = Slate(items=(1, 2, 3), policy_tag="uniform_a")
    with pytest.raises(ConfigurationError):
        ChoiceEvent(user=0, slate=slate, chosen_index=3)


def test_validate_slate_rejects_mixed_sides():
    cat = ItemCatalog(4, set_a=(0, 1), set_b=(2, 3), bias_set=(2,))
    with pytest.raises(ConfigurationError):
        validate_slate(Slate(items=(1, 2), policy_tag="uniform_a"), cat)


def test_catalog_invariant_violations():
    with pytest.raises(ConfigurationError):
        ItemCatalog(4, set_a=(0, 1), set_b=(1, 2, 3), bias_set=(2,))
    with pytest.raises(ConfigurationError):
        ItemCatalog(4, set_a=(0, 1), set_b=(2, 3), bias_set=(0,))


def test_user_split_invariants():
    with pytest.raises(ConfigurationError):
        UserSplit(train_users=(0, 1), eval_users=())
    with pytest.raises(ConfigurationError):
        UserSplit(train_users=(0, 2), eval_users=(3,))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _example_log():
    cat = ItemCatalog(6, set_a=(0, 1, 2), set_b=(3, 4, 5), bias_set=(4,))
    split = UserSplit(train_users=(0,), eval_users=(1,))
    events = (
        ChoiceEvent(0, Slate((0, 1, 2), "uniform_a"), 1),
        ChoiceEvent(1, Slate((3, 4, 5), "uniform_b"), 0),
    )
    return ChoiceLog(events=events, catalog=cat, split=split)


def test_events_jsonl_roundtrip(tmp_path):
    log = _example_log()
    path = tmp_path / "events.jsonl"
    write_events_jsonl(log.events, path)
    lines = path.read_text().strip().split("\n")
    assert json.loads(lines[0]) == {"user": 0, "slate": [0, 1, 2], "chosen": 1,
                                    "policy": "uniform_a"}
    assert read_events_jsonl(path) == log.events


def test_context_json_roundtrip(tmp_path):
    log = _example_log()
    path = tmp_path / "context.json"
    write_context_json(log.catalog, log.split, path)
    cat, split = read_context_json(path)
    assert cat == log.catalog and split == log.split


def test_event_arrays_roundtrip():
    log = _example_log()
    arrays = event_arrays(log.events)
    assert arrays.users.tolist() == [0, 1]
    assert arrays.chosen_items.tolist() == [1, 3]
    assert events_from_arrays(arrays) == log.events


def test_choice_log_validate():
    log = _example_log()
    log.validate()
    bad = ChoiceLog(events=(ChoiceEvent(5, Slate((0, 1, 2), "uniform_a"), 0),),
                    catalog=log.catalog, split=log.split)
    with pytest.raises(ConfigurationError):
        bad.validate()
