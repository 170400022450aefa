import numpy as np
import pytest

from allocgap.models import Ensemble, Node
from allocgap.workload import VmRequest, lifetime_label, sort_vms

L, S = Node.leaf, Node.split


def cegar_fixture() -> Ensemble:
    """Three classes, one depth-3 tree each, every threshold 0.5 (left iff <= 0.5)."""
    t1 = S(0, .5, S(1, .5, L(.9), S(2, .5, L(1.3), L(.5))), L(.6))
    t2 = S(0, .5, S(2, .5, S(1, .5, L(1.1), L(.4)), L(.2)), S(1, .5, L(.8), L(1.0)))
    t3 = S(1, .5, S(0, .5, L(.3), S(2, .5, L(1.4), L(.7))), L(.5))
    return Ensemble(("f1", "f2", "f3"), ("c1", "c2", "c3"), ((t1,), (t2,), (t3,)), ((0.0, 1.0),) * 3)


def random_tree(rng, n_features, depth, bounds=(0.0, 1.0), leaf_scale=1.0):
    if depth == 0 or rng.random() < 0.15:
        return L(round(float(rng.normal(0, leaf_scale)), 6))
    f = int(rng.integers(n_features))
    lo, hi = bounds
    thr = round(float(rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo))), 4)
    return S(f, thr, random_tree(rng, n_features, depth - 1, bounds, leaf_scale),
             random_tree(rng, n_features, depth - 1, bounds, leaf_scale))


def random_ensemble(seed, n_classes=3, trees_per_class=2, n_features=3, depth=3, names=None) -> Ensemble:
    rng = np.random.default_rng(seed)
    trees = tuple(tuple(random_tree(rng, n_features, depth) for _ in range(trees_per_class))
                  for _ in range(n_classes))
    names = names or tuple(f"f{k}" for k in range(n_features))
    return Ensemble(names, tuple(f"k{c}" for c in range(n_classes)), trees, ((0.0, 1.0),) * n_features)


def make_vm(i, cpu=4, mem=8, arrival=0, cpu_label=0, decile=10, life=3, features=None):
    return VmRequest(f"vm{i:03d}", cpu, mem, arrival, cpu_label, decile, life, lifetime_label(life), features)


def random_vms(rng, n, horizon, sizes=((2, 4), (4, 8), (8, 16), (16, 32))):
    vms = []
    for i in range(n):
        c, m = sizes[int(rng.integers(len(sizes)))]
        life = int(rng.integers(1, 9))
        vms.append(make_vm(i, c, m, int(rng.integers(0, max(horizon - 1, 1))), int(rng.integers(2)),
                           int(rng.integers(1, 11)), life))
    return sort_vms(vms)


@pytest.fixture
def fixture_model():
    return cegar_fixture()


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured detail each test recorded."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            name = rep.nodeid.split("::")[-1]
            num = int(name.split("_")[2])
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((num, f"criterion {num:2d} {'PASS' if outcome == 'passed' else 'FAIL'}  {name}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
