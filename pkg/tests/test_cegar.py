import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allocgap.cegar import (BUDGET, SAT, UNSAT, Box, CegarError, FeatureSpace, Interval, abstract, check_witness,
                            enumerate_leaf_regions, feasibility, find_features, refine)
from allocgap.models import Ensemble, argmax_lowest, class_scores

from conftest import cegar_fixture, random_ensemble

GRID = [0.25, 0.5, 0.75, 1.0, 0.0]


def grid_points(n=3):
    return itertools.product(GRID, repeat=n)


def test_depth_one_abstraction_values(fixture_model):
    a = abstract([fixture_model], ["c1"], 1)[0]
    # c1 tree keeps the largest pruned leaf, competitors the smallest
    assert [[t.route((0.3, 0.7, 0.2)).value for t in g] for g in a.trees] == [[1.3], [0.2], [0.5]]
    assert [[t.route((0.8, 0.9, 0.2)).value for t in g] for g in a.trees] == [[0.6], [0.8], [0.5]]
    assert a.pruned_count() > 0


def test_depth_zero_collapses_each_tree(fixture_model):
    a = abstract([fixture_model], ["c2"], 0)[0]
    assert [g[0].value for g in a.trees] == [0.5, 1.1, 0.3]
    assert all(g[0].is_leaf for g in a.trees)


def test_full_depth_is_identity(fixture_model):
    a = abstract([fixture_model], ["c1"], 3)[0]
    assert a.pruned_count() == 0
    for p in grid_points():
        assert a.scores(p) == pytest.approx(class_scores(fixture_model, p))


def test_negative_depth_and_target_errors(fixture_model):
    with pytest.raises(CegarError):
        abstract([fixture_model], ["c1"], -1)
    with pytest.raises(CegarError):
        abstract([fixture_model], ["nope"], 1)
    with pytest.raises(CegarError):
        abstract([fixture_model], ["c1", "c2"], 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3), st.integers(0, 2),
       st.tuples(*[st.floats(0, 1)] * 3))
def test_abstraction_is_optimistic_for_target_and_pessimistic_for_rivals(seed, depth, target, point):
    ens = random_ensemble(seed)
    a = abstract([ens], [f"k{target}"], depth)[0]
    full = class_scores(ens, point)
    got = a.scores(point)
    for c in range(3):
        if c == target:
            assert got[c] >= full[c] - 1e-12
        else:
            assert got[c] <= full[c] + 1e-12


def test_interval_conventions():
    iv = Interval(0.0, 1.0)
    left, right = iv.at_most(0.5), iv.above(0.5)
    assert left.contains(0.5) and not right.contains(0.5)
    assert right.contains(0.5000001) and right.midpoint() == 0.75
    assert Interval(0.5, 0.5, False).empty and not Interval(0.5, 0.5, True).empty
    assert iv.above(1.0).empty


def test_feasibility_on_fixture(fixture_model):
    space = FeatureSpace.shared([fixture_model])
    for target in ("c1", "c2", "c3"):
        w = feasibility(abstract([fixture_model], [target], 3, space), space)
        assert w is not None and w.box.contains(w.point)
        assert check_witness([fixture_model], [target], w.point).passed


def test_check_witness_reports_failing_model(fixture_model):
    p = (0.25, 0.25, 0.75)
    assert check_witness([fixture_model], ["c1"], p).passed
    chk = check_witness([fixture_model, fixture_model], ["c1", "c3"], p)
    assert not chk.passed and chk.failing_model == 1 and chk.actual_class == 0


def test_refine_opens_disagreeing_leaf(fixture_model):
    space = FeatureSpace.shared([fixture_model])
    a = abstract([fixture_model], ["c1"], 1, space)
    point = (0.25, 0.75, 0.25)
    before = a[0].pruned_count()
    b = refine(a, point, space)
    assert b[0].pruned_count() < before
    full = abstract([fixture_model], ["c1"], 3, space)
    with pytest.raises(CegarError):
        refine(full, point, space)


@pytest.mark.parametrize("target", ["c1", "c2", "c3"])
@pytest.mark.parametrize("depth", [0, 1])
def test_find_features_sat(fixture_model, target, depth):
    res = find_features([fixture_model], [target], initial_depth=depth)
    assert res.status == SAT
    idx = fixture_model.class_index(target)
    assert argmax_lowest(class_scores(fixture_model, res.point)) == idx
    assert res.classes == (idx,)
    assert res.to_dict()["point"].keys() == {"f1", "f2", "f3"}


def test_contradictory_targets_unsat(fixture_model):
    res = find_features([fixture_model, fixture_model], ["c1", "c2"])
    assert res.status == UNSAT and res.point is None


def test_budget_exhausted_without_refinements(fixture_model):
    # the depth-0 witness for c1 fails the full check, so no refinement means no answer
    res = find_features([fixture_model], ["c1"], initial_depth=0, max_rounds=0)
    assert res.status == BUDGET and res.refinements == 0
    assert res.to_dict() == {"status": BUDGET, "refinements": 0, "pruned_nodes_at_end": res.pruned_nodes}


def test_unconstrained_model_is_free():
    a, b = random_ensemble(1), random_ensemble(2, names=("f0", "g1", "g2"))
    res = find_features([a, b], ["k1", None])
    assert res.status in (SAT, UNSAT)
    assert FeatureSpace.shared([a, b]).names == ("f0", "f1", "f2", "g1", "g2")


def test_disjoint_feature_bounds():
    a = random_ensemble(0)
    b = Ensemble(a.feature_names, a.classes, a.trees, ((2.0, 3.0),) * 3)
    with pytest.raises(CegarError, match="disjoint"):
        FeatureSpace.shared([a, b])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2), st.integers(0, 2))
def test_sat_iff_brute_force_regions(seed, target, depth):
    ens = random_ensemble(seed, trees_per_class=2, depth=2)
    res = find_features([ens], [f"k{target}"], initial_depth=depth)
    regions = enumerate_leaf_regions([ens], [f"k{target}"])
    assert (res.status == SAT) == bool(regions)
    if res.status == SAT:
        assert any(r.contains(res.point) for r in regions)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_two_model_conjunction_matches_oracle(seed):
    a = random_ensemble(seed, trees_per_class=1, depth=2)
    b = random_ensemble(seed + 1, trees_per_class=1, depth=2, names=("f0", "f1", "h"))
    res = find_features([a, b], ["k0", "k2"])
    regions = enumerate_leaf_regions([a, b], ["k0", "k2"])
    assert (res.status == SAT) == bool(regions)
    if res.status == SAT:
        assert check_witness([a, b], ["k0", "k2"], res.point).passed


def test_box_full_and_split():
    space = FeatureSpace(("x",), ((0.0, 1.0),))
    box = Box.full(space)
    assert box.split(0, 0.3, True).contains((0.0,))
    assert not box.split(0, 0.3, False).contains((0.3,))
