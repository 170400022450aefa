"""Mixed-integer encoding of tree-ensemble inference: leaf activation per tree and an argmax over class scores."""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field

from .milp import BINARY, EQ, LE, REAL, ConstraintError, ConstraintSystem, Violation
from .models import Ensemble, Node, argmax_lowest, class_scores

# mu as a fraction of eps * (smallest breakpoint gap); the band (T, T + mu/eps] is not representable
MU_FRACTION = 1e-6

FAMILIES = ("leaf_left", "leaf_right", "one_leaf", "score", "argmax", "one_class")


class EncodingError(ValueError):
    pass


@dataclass
class LgbmBundle(ConstraintSystem):
    n_features: int = 0
    n_classes: int = 0
    # (class, tree) -> leaf variable names in left-to-right order
    leaf_vars: dict[tuple[int, int], list[str]] = field(default_factory=dict)

    @staticmethod
    def f(k: int) -> str:
        return f"f_{k}"

    @staticmethod
    def x(c: int) -> str:
        return f"x_{c}"

    @staticmethod
    def P(c: int) -> str:
        return f"P_{c}"

    def excluded_band(self, model: Ensemble, point) -> list[tuple[int, float]]:
        """(feature, threshold) pairs where ``point`` lies strictly above the threshold but closer than mu/eps.

        Such points cannot be represented: the right-branch constraint needs eps * (f - T) >= mu.
        """
        width = self.mu / self.epsilon
        out = []
        for _, _, root in model.all_trees():
            for node in _internal_nodes(root):
                gap = point[node.feature] - node.threshold
                if 0 < gap < width - 1e-15:
                    out.append((node.feature, node.threshold))
        return out


def _internal_nodes(root: Node):
    if root.is_leaf:
        return
    yield root
    yield from _internal_nodes(root.left)
    yield from _internal_nodes(root.right)


def _leaf_index(root: Node):
    """Leaves in left-to-right order, plus for each internal node the ranges of its left and right leaves."""
    leaves: list[Node] = []
    spans: list[tuple[Node, range, range]] = []

    def visit(node: Node) -> range:
        if node.is_leaf:
            leaves.append(node)
            return range(len(leaves) - 1, len(leaves))
        left = visit(node.left)
        right = visit(node.right)
        spans.append((node, left, right))
        return range(left.start, right.stop)

    visit(root)
    return leaves, spans


def smallest_threshold_gap(model: Ensemble) -> float:
    """Smallest positive distance between consecutive distinct breakpoints (thresholds and bounds) of any feature."""
    gap = math.inf
    for k, (lo, hi) in enumerate(model.feature_bounds):
        pts = {lo, hi}
        for _, _, root in model.all_trees():
            pts.update(n.threshold for n in _internal_nodes(root) if n.feature == k)
        pts = sorted(pts)
        for a, b in zip(pts, pts[1:]):
            if b > a:
                gap = min(gap, b - a)
    return gap


def encode(model: Ensemble, mu: float | None = None) -> LgbmBundle:
    spans = [hi - lo for lo, hi in model.feature_bounds]
    if not all(math.isfinite(s) for s in spans):
        raise EncodingError("every feature needs finite bounds to size eps and M")
    eps = 1.0 / (2.0 * max(spans))
    gap = smallest_threshold_gap(model)
    mu = eps * (gap if math.isfinite(gap) else 1.0) * MU_FRACTION if mu is None else mu
    hi_total = [sum(max(t.leaf_values()) for t in group) for group in model.trees]
    lo_total = [sum(min(t.leaf_values()) for t in group) for group in model.trees]
    big_m = max(hi_total) - min(lo_total) + 1.0
    b = LgbmBundle(big_m=big_m, epsilon=eps, mu=mu, n_features=model.n_features, n_classes=model.n_classes)

    for k, (lo, hi) in enumerate(model.feature_bounds):
        b.var(b.f(k), REAL, lo, hi)
    for c in range(model.n_classes):
        b.var(b.x(c), BINARY)
        b.var(b.P(c), REAL, lo_total[c], hi_total[c])

    score_terms: dict[int, list[tuple[str, float]]] = {c: [] for c in range(model.n_classes)}
    for c, t, root in model.all_trees():
        leaves, node_spans = _leaf_index(root)
        names = [b.var(f"a_{c}_{t}_{i}", BINARY) for i in range(len(leaves))]
        b.leaf_vars[(c, t)] = names
        for node, left, right in node_spans:
            f = b.f(node.feature)
            # left leaves only when f <= T; right leaves only when f > T
            b.add("leaf_left", [(names[i], 1.0) for i in left] + [(f, eps)], LE, 1.0 + eps * node.threshold)
            b.add("leaf_right", [(names[i], 1.0) for i in right] + [(f, -eps)], LE, 1.0 - eps * node.threshold - mu)
        b.add("one_leaf", [(n, 1.0) for n in names], EQ, 1.0, name=f"one_leaf_{c}_{t}")
        score_terms[c].extend((n, leaf.value) for n, leaf in zip(names, leaves))

    for c in range(model.n_classes):
        b.add("score", score_terms[c] + [(b.P(c), -1.0)], EQ, 0.0, name=f"score_{c}")
    for i, j in itertools.permutations(range(model.n_classes), 2):
        # P_j - P_i <= M (1 - x_i)
        b.add("argmax", [(b.P(j), 1.0), (b.P(i), -1.0), (b.x(i), big_m)], LE, big_m, name=f"argmax_{i}_{j}")
    b.add("one_class", [(b.x(c), 1.0) for c in range(model.n_classes)], EQ, 1.0, name="one_class")
    return b


def audit_counts(model: Ensemble) -> Counter:
    """Closed-form per-family constraint counts."""
    internal = sum(root.internal_count() for _, _, root in model.all_trees())
    trees = sum(len(g) for g in model.trees)
    k = model.n_classes
    return Counter({"leaf_left": internal, "leaf_right": internal, "one_leaf": trees, "score": k,
                    "argmax": k * (k - 1), "one_class": 1})


def native_values(bundle: LgbmBundle, model: Ensemble, point) -> dict[str, float]:
    """Substitution from native inference: features, routed leaf activations, raw scores, predicted class."""
    values: dict[str, float] = {bundle.f(k): float(v) for k, v in enumerate(point)}
    for c, t, root in model.all_trees():
        leaves, _ = _leaf_index(root)
        hit = root.route(point)
        for name, leaf in zip(bundle.leaf_vars[(c, t)], leaves):
            values[name] = 1.0 if leaf is hit else 0.0
    scores = class_scores(model, point)
    best = argmax_lowest(scores)
    for c, s in enumerate(scores):
        values[bundle.P(c)] = s
        values[bundle.x(c)] = 1.0 if c == best else 0.0
    return values


def verify_inference(bundle: LgbmBundle, model: Ensemble, point, tol: float = 1e-9) -> list[Violation]:
    return bundle.check(native_values(bundle, model, point), tol)


def feasible_classes(bundle: LgbmBundle, model: Ensemble, point, tol: float = 1e-9, limit: int = 2**16) -> set[int]:
    """Classes selected by any binary assignment satisfying the bundle at ``point`` (exhaustive enumeration)."""
    leaf_names = [n for names in bundle.leaf_vars.values() for n in names]
    total = 2 ** (len(leaf_names) + model.n_classes)
    if total > limit:
        raise ConstraintError(f"{total} assignments exceed the enumeration limit {limit}")
    base = {bundle.f(k): float(v) for k, v in enumerate(point)}
    found = set()
    for bits in itertools.product((0.0, 1.0), repeat=len(leaf_names)):
        values = dict(base)
        values.update(zip(leaf_names, bits))
        for c in range(model.n_classes):
            values[bundle.P(c)] = sum(coef * values[v] for v, coef in bundle.by_family("score")[c].terms
                                      if v != bundle.P(c))
        for c in range(model.n_classes):
            for k in range(model.n_classes):
                values[bundle.x(k)] = 1.0 if k == c else 0.0
            if not bundle.check(values, tol):
                found.add(c)
        # assignments with zero or several x set violate one_class, so one-hot choices are exhaustive
    return found
