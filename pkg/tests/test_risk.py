import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allocgap.cegar import Box, FeatureSpace, Interval
from allocgap.risk import Region, RiskError, count_containing, feature_coverage, merge, region_of

from conftest import cegar_fixture, random_ensemble

SPACE2 = FeatureSpace(("x", "y"), ((0.0, 1.0), (0.0, 1.0)))


def box2(x, y):
    return Region(SPACE2, Box((Interval(*x, x[0] == 0.0), Interval(*y, y[0] == 0.0))), (0.0, 0.0))


def test_region_of_fixture_point(fixture_model):
    r = region_of([fixture_model], (0.3, 0.7, 0.2))
    # f1 <= .5 on all three trees, f2 > .5, f3 <= .5
    x, y, z = r.box.intervals
    assert (x.lo, x.hi, x.lo_closed) == (0.0, 0.5, True)
    assert (y.lo, y.hi, y.lo_closed) == (0.5, 1.0, False)
    assert (z.lo, z.hi) == (0.0, 0.5)


def test_region_of_boundary_point_is_left_side(fixture_model):
    r = region_of([fixture_model], (0.5, 0.5, 0.5))
    assert all(iv.hi == 0.5 for iv in r.box.intervals)


def test_region_of_validation(fixture_model):
    with pytest.raises(RiskError):
        region_of([fixture_model], (0.3, 0.7))
    with pytest.raises(RiskError, match="outside"):
        region_of([fixture_model], (0.3, 1.7, 0.2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.tuples(*[st.floats(0, 1)] * 3))
def test_region_contains_point_and_is_constant(seed, point):
    ens = random_ensemble(seed)
    r = region_of([ens], point, check_samples=20, rng_seed=seed)
    assert r.box.contains(point)


def test_merge_two_overlapping_boxes():
    s = merge([box2((0.0, 0.6), (0.0, 1.0)), box2((0.4, 1.0), (0.0, 0.5))], threshold=2)
    assert [list(b) for b in s.breakpoints] == [[0.0, 0.4, 0.6, 1.0], [0.0, 0.5, 1.0]]
    assert s.scores.tolist() == [[1, 1], [2, 1], [1, 0]]
    assert list(s.cells()) == [(((0.4, 0.6), (0.0, 0.5)), 2)]
    assert feature_coverage(s, "x") == (pytest.approx(0.2), True)
    assert feature_coverage(s, "y") == (pytest.approx(0.5), True)


def test_threshold_one_is_union_and_non_actionable():
    s = merge([box2((0.0, 0.6), (0.0, 1.0)), box2((0.4, 1.0), (0.0, 1.0))], threshold=1)
    assert s.kept.all()
    assert feature_coverage(s, "x") == (1.0, False)
    assert s.summary()["features"]["y"] == {"coverage": 1.0, "actionable": False}


def test_merge_errors():
    with pytest.raises(RiskError):
        merge([], 1)
    other = Region(FeatureSpace(("x",), ((0.0, 1.0),)), Box((Interval(0.0, 1.0),)), (0.0,))
    with pytest.raises(RiskError):
        merge([box2((0, 1), (0, 1)), other], 1)
    with pytest.raises(RiskError):
        feature_coverage(merge([box2((0, 1), (0, 1))], 1), "z")


def test_empty_surface_coverage():
    s = merge([box2((0.0, 0.5), (0.0, 0.5))], threshold=2)
    assert not s.kept.any()
    assert feature_coverage(s, "x") == (0.0, True)


def _random_regions(seed, n):
    rng = np.random.default_rng(seed)
    ens = random_ensemble(seed, n_features=3, depth=3)
    return [region_of([ens], tuple(rng.uniform(0, 1, 3)), check_samples=0) for _ in range(n)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_cell_scores_match_brute_force(seed, n):
    regions = _random_regions(seed, n)
    s = merge(regions, 1)
    for idx in np.ndindex(s.scores.shape):
        mid = tuple((s.breakpoints[d][k] + s.breakpoints[d][k + 1]) / 2 for d, k in enumerate(idx))
        assert s.scores[idx] == count_containing(regions, mid)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10))
def test_kept_cells_shrink_as_threshold_rises(seed, n):
    regions = _random_regions(seed, n)
    kept = [merge(regions, t).kept.sum() for t in range(1, n + 2)]
    assert kept == sorted(kept, reverse=True) and kept[-1] == 0
    covs = [feature_coverage(merge(regions, t), "f0")[0] for t in range(1, n + 2)]
    assert covs == sorted(covs, reverse=True)


def test_csv_export():
    s = merge([box2((0.0, 0.6), (0.0, 1.0)), box2((0.4, 1.0), (0.0, 0.5))], threshold=2)
    rows = list(csv.DictReader(io.StringIO(s.to_csv())))
    assert [(r["feature"], float(r["lo"]), float(r["hi"]), r["score"]) for r in rows] == [
        ("x", 0.4, 0.6, "2"), ("y", 0.0, 0.5, "2")]
    assert s.summary_json().endswith("\n")


def test_regions_of_same_point_overlap_fully(fixture_model):
    regs = [region_of([fixture_model], p) for p in [(0.1, 0.9, 0.1), (0.2, 0.8, 0.3)]]
    s = merge(regs, 2)
    assert s.kept.sum() == 1
    assert regs[0].box == regs[1].box
