import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allocgap.lgbm_milp import (MU_FRACTION, EncodingError, audit_counts, encode, feasible_classes,
                                native_values, smallest_threshold_gap, verify_inference)
from allocgap.milp import ConstraintError
from allocgap.models import Ensemble, Node, argmax_lowest, class_scores

from conftest import random_ensemble

L, S = Node.leaf, Node.split


def test_fixture_counts(fixture_model):
    b = encode(fixture_model)
    assert b.family_counts() == audit_counts(fixture_model)
    # 3 + 4 + 3 internal nodes
    assert b.family_counts()["leaf_left"] == 10
    assert b.family_counts()["argmax"] == 6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(1, 3), st.integers(0, 4))
def test_counts_match_closed_form(seed, k, per_class, depth):
    ens = random_ensemble(seed, n_classes=k, trees_per_class=per_class, depth=depth)
    assert encode(ens).family_counts() == audit_counts(ens)


def test_single_leaf_model():
    ens = Ensemble(("f0",), ("a", "b"), ((L(0.2),), (L(0.7),)), ((0.0, 1.0),))
    b = encode(ens)
    counts = b.family_counts()
    assert counts["leaf_left"] == 0 and counts["one_leaf"] == 2 and counts["argmax"] == 2
    assert verify_inference(b, ens, (0.3,)) == []
    assert feasible_classes(b, ens, (0.3,)) == {1}


def test_two_class_argmax():
    ens = Ensemble(("f0",), ("a", "b"), ((S(0, 0.5, L(1.0), L(0.0)),), (L(0.5),)), ((0.0, 1.0),))
    b = encode(ens)
    assert b.family_counts()["argmax"] == 2
    assert feasible_classes(b, ens, (0.2,)) == {0}
    assert feasible_classes(b, ens, (0.8,)) == {1}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_native_inference_satisfies_encoding(seed, point):
    ens = random_ensemble(seed)
    b = encode(ens)
    if b.excluded_band(ens, point):
        return
    assert verify_inference(b, ens, point) == []


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_encoding_admits_only_the_native_class(seed, point):
    ens = random_ensemble(seed, trees_per_class=1, depth=2)
    b = encode(ens)
    if b.excluded_band(ens, point):
        return
    scores = class_scores(ens, point)
    got = feasible_classes(b, ens, point)
    top = max(scores)
    # ties admit every tied class; the lowest of them is the native choice
    assert got == {c for c, s in enumerate(scores) if abs(s - top) <= 1e-9} or got == {argmax_lowest(scores)}
    assert argmax_lowest(scores) in got


def test_threshold_point_routes_left_and_band_is_reported(fixture_model):
    b = encode(fixture_model)
    assert verify_inference(b, fixture_model, (0.5, 0.5, 0.5)) == []
    width = b.mu / b.epsilon
    assert width == pytest.approx(smallest_threshold_gap(fixture_model) * MU_FRACTION)
    inside = (0.5 + width / 4, 0.3, 0.3)
    assert (0, 0.5) in b.excluded_band(fixture_model, inside)
    assert verify_inference(b, fixture_model, inside) != []
    assert verify_inference(b, fixture_model, (0.5 + 2 * width, 0.3, 0.3)) == []


def test_corruptions_are_detected(fixture_model):
    b = encode(fixture_model)
    point = (0.3, 0.7, 0.2)
    good = native_values(b, fixture_model, point)
    assert b.check(good) == []

    wrong_leaf = dict(good)
    names = b.leaf_vars[(0, 0)]
    hit = next(n for n in names if good[n] == 1.0)
    other = next(n for n in names if n != hit)
    wrong_leaf[hit], wrong_leaf[other] = 0.0, 1.0
    assert {v.family for v in b.check(wrong_leaf)} & {"leaf_left", "leaf_right", "score"}

    wrong_class = dict(good)
    best = argmax_lowest(class_scores(fixture_model, point))
    wrong_class[b.x(best)] = 0.0
    wrong_class[b.x((best + 1) % 3)] = 1.0
    assert any(v.family == "argmax" for v in b.check(wrong_class))

    two_leaves = dict(good)
    two_leaves[other] = 1.0
    assert any(v.family == "one_leaf" for v in b.check(two_leaves))


def test_feasible_classes_limit(fixture_model):
    with pytest.raises(ConstraintError):
        feasible_classes(encode(fixture_model), fixture_model, (0.1, 0.1, 0.1), limit=8)


def test_unbounded_feature_rejected():
    ens = Ensemble(("f0",), ("a", "b"), ((L(0.0),), (L(1.0),)), ((0.0, float("inf")),))
    with pytest.raises(EncodingError):
        encode(ens)


@pytest.mark.parametrize("n_trees", [2, 30, 250])
def test_scales_linearly(n_trees):
    per_class = n_trees // 2
    ens = random_ensemble(7, n_classes=2, trees_per_class=per_class, n_features=5, depth=4)
    t0 = time.perf_counter()
    b = encode(ens)
    elapsed = time.perf_counter() - t0
    counts = b.family_counts()
    assert counts == audit_counts(ens)
    assert counts["one_leaf"] == 2 * per_class
    assert elapsed < 5.0
    rng = np.random.default_rng(n_trees)
    for _ in range(5):
        p = tuple(rng.uniform(0, 1, 5))
        if not b.excluded_band(ens, p):
            assert verify_inference(b, ens, p) == []


def test_lp_export(fixture_model):
    text = encode(fixture_model).to_lp("trees")
    assert "Binaries" in text and "one_class" in text
