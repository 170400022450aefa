import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from allocgap.bounds import (BoundError, CountBound, DistributionProfile, count_bounds, estimate_profile,
                             min_sequence_length, monte_carlo_coverage, partition_bounds)
from allocgap.search import CountConstraint, ConstraintSet


def test_min_sequence_length_examples():
    assert min_sequence_length(0.5) == 10
    assert min_sequence_length(0.7) == 17
    assert min_sequence_length(0.1) == 50
    for p in (0.0, 1.0):
        with pytest.raises(BoundError):
            min_sequence_length(p)


@given(st.floats(0.001, 0.999))
def test_min_sequence_length_is_smallest(p):
    n = min_sequence_length(p)
    assert n * p >= 5 - 1e-9 and n * (1 - p) >= 5 - 1e-9
    assert (n - 1) * p < 5 - 1e-9 or (n - 1) * (1 - p) < 5 - 1e-9


def test_count_bounds_examples():
    b = count_bounds(0.5, 100)
    assert (b.lower, b.upper) == (31, 69)
    assert count_bounds(0.99, 10_000).upper <= 10_000
    assert count_bounds(0.99, 600).upper == 600
    z0 = count_bounds(0.7, 200, z=0)
    assert z0.lower == z0.upper == 140


def test_count_bounds_rule_error_names_rule():
    with pytest.raises(BoundError, match="Np >= 5"):
        count_bounds(0.7, 5)


@settings(max_examples=200)
@given(st.floats(0.01, 0.99), st.integers(1, 5000), st.floats(0, 6))
def test_bounds_contain_center_and_widen_with_z(p, N, z):
    if N < min_sequence_length(p):
        return
    b = count_bounds(p, N, z)
    assert b.contains(math.floor(N * p + 0.5))
    wider = count_bounds(p, N, z + 0.5)
    assert wider.lower <= b.lower and wider.upper >= b.upper


def test_coverage_oracle_agrees_with_binomial_cdf():
    b = count_bounds(0.7, 200)
    exact = stats.binom.cdf(b.upper, 200, 0.7) - stats.binom.cdf(b.lower - 1, 200, 0.7)
    assert exact >= 0.999
    assert monte_carlo_coverage(0.7, 200, b, trials=100_000) == pytest.approx(exact, abs=0.002)


def test_coverage_degenerate_bounds():
    assert monte_carlo_coverage(0.7, 200, count_bounds(0.7, 200, z=0)) < 0.5
    assert monte_carlo_coverage(0.3, 50, CountBound("all", 50, 0, 50, 0.3, 1.0)) == 1.0


def test_partition_bounds_examples():
    g = count_bounds(0.7, 200)
    assert partition_bounds(g, [200]) == [g]
    one = count_bounds(1.0, 30)
    assert [(b.lower, b.upper) for b in partition_bounds(one, [10, 20])] == [(10, 10), (20, 20)]
    parts = partition_bounds(g, [20] * 10, rng_seed=3)
    assert all(b.contains(14) for b in parts)
    assert partition_bounds(g, [20] * 10, rng_seed=3) == parts


def test_partition_bounds_size_mismatch():
    with pytest.raises(BoundError):
        partition_bounds(count_bounds(0.5, 20), [5, 5])


def test_partition_bounds_compose_with_checker():
    # any per-partition assignment inside its bounds summing inside the global bound passes the checker
    g = count_bounds(0.6, 60)
    sizes = [15, 15, 15, 15]
    parts = partition_bounds(g, sizes, rng_seed=1)
    cell = frozenset([(1, 1)])
    members = [tuple(range(15 * q, 15 * q + 15)) for q in range(4)]
    cs = ConstraintSet([CountConstraint("global", "cpu", cell, g.lower, g.upper)] +
                       [CountConstraint(f"p{q}", "cpu", cell, b.lower, b.upper, members=m)
                        for q, (b, m) in enumerate(zip(parts, members))])
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(200):
        counts = [int(rng.integers(b.lower, b.upper + 1)) for b in parts]
        if not g.contains(sum(counts)):
            continue
        seq = []
        for c, size in zip(counts, sizes):
            seq += [(1, 1)] * c + [(0, 0)] * (size - c)
        assert cs.violations({"cpu": seq}) == []
        checked += 1
    assert checked > 50


def test_profile_round_trip_and_validation(tmp_path):
    prof = estimate_profile({"cpu": [(0, 0), (1, 1), (1, 0), (0, 0)]}, vm_types=[(2, 4)] * 4,
                            arrivals=[0, 0, 1, 3])
    assert prof.cells["cpu"] == {(0, 0): 0.5, (1, 0): 0.25, (1, 1): 0.25}
    assert prof.accuracy("cpu") == 0.75
    assert prof.arrival_rate == [0.5, 0.25, 0.0, 0.25]
    path = tmp_path / "p.json"
    prof.save(path)
    assert DistributionProfile.load(path) == prof
    with pytest.raises(BoundError):
        DistributionProfile.from_dict({"cells": {"cpu": {"0,0": 0.5}}})
