"""Find one feature vector that drives every ensemble to its target class.

Trees are truncated at a depth and the cut subtrees replaced by pessimistic leaves: the largest pruned
value for trees voting for the target, the smallest for competitors. A branch-and-bound over one leaf
per tree then searches for a box where every target wins. UNSAT on the abstraction is final; a SAT
witness is checked on the full trees and, if spurious, the abstract leaves it routes into are expanded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .models import Ensemble, ModelError, Node, argmax_lowest, class_scores


class CegarError(ValueError):
    pass


# -- feature space and boxes ---------------------------------------------------

@dataclass(frozen=True)
class FeatureSpace:
    names: tuple[str, ...]
    bounds: tuple[tuple[float, float], ...]

    @classmethod
    def shared(cls, ensembles: Sequence[Ensemble]) -> FeatureSpace:
        """Union of features by name; a feature used by several models gets the intersection of their bounds."""
        names: list[str] = []
        bounds: dict[str, tuple[float, float]] = {}
        for ens in ensembles:
            for name, (lo, hi) in zip(ens.feature_names, ens.feature_bounds):
                if name not in bounds:
                    names.append(name)
                    bounds[name] = (lo, hi)
                else:
                    a, b = bounds[name]
                    bounds[name] = (max(a, lo), min(b, hi))
        for name in names:
            lo, hi = bounds[name]
            if lo > hi:
                raise CegarError(f"feature {name!r} has disjoint bounds across models")
        return cls(tuple(names), tuple(bounds[n] for n in names))

    def index_map(self, ens: Ensemble) -> tuple[int, ...]:
        return tuple(self.names.index(n) for n in ens.feature_names)

    def project(self, ens: Ensemble, point: Sequence[float]) -> list[float]:
        return [point[g] for g in self.index_map(ens)]


@dataclass(frozen=True)
class Interval:
    """(lo, hi] with an optional closed lower end; the ≤/> split convention keeps upper ends closed."""

    lo: float
    hi: float
    lo_closed: bool = True

    @property
    def empty(self) -> bool:
        return self.lo > self.hi or (self.lo == self.hi and not self.lo_closed)

    def at_most(self, t: float) -> Interval:
        return Interval(self.lo, min(self.hi, t), self.lo_closed)

    def above(self, t: float) -> Interval:
        if t < self.lo or (t == self.lo and not self.lo_closed):
            return self
        return Interval(t, self.hi, False)

    def intersect(self, other: Interval) -> Interval:
        if self.lo > other.lo or (self.lo == other.lo and not self.lo_closed):
            lo, closed = self.lo, self.lo_closed
        else:
            lo, closed = other.lo, other.lo_closed
        return Interval(lo, min(self.hi, other.hi), closed)

    def midpoint(self) -> float:
        return self.lo if self.lo == self.hi else (self.lo + self.hi) / 2.0

    def contains(self, x: float) -> bool:
        return (x > self.lo or (x == self.lo and self.lo_closed)) and x <= self.hi


@dataclass(frozen=True)
class Box:
    intervals: tuple[Interval, ...]

    @classmethod
    def full(cls, space: FeatureSpace) -> Box:
        return cls(tuple(Interval(lo, hi, True) for lo, hi in space.bounds))

    @property
    def empty(self) -> bool:
        return any(iv.empty for iv in self.intervals)

    def split(self, feature: int, threshold: float, left: bool) -> Box:
        iv = self.intervals[feature]
        new = iv.at_most(threshold) if left else iv.above(threshold)
        return Box(self.intervals[:feature] + (new,) + self.intervals[feature + 1:])

    def intersect(self, other: Box) -> Box:
        return Box(tuple(a.intersect(b) for a, b in zip(self.intervals, other.intervals)))

    def midpoint(self) -> tuple[float, ...]:
        return tuple(iv.midpoint() for iv in self.intervals)

    def contains(self, point: Sequence[float]) -> bool:
        return all(iv.contains(x) for iv, x in zip(self.intervals, point))


# -- abstraction --------------------------------------------------------------------

@dataclass(frozen=True)
class ANode:
    """Abstract tree node over global feature indices; ``pruned`` is set on abstract leaves."""

    feature: int | None = None
    threshold: float | None = None
    left: ANode | None = None
    right: ANode | None = None
    value: float | None = None
    pruned: Node | None = None
    fmap: tuple[int, ...] = ()

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def is_abstract(self) -> bool:
        return self.pruned is not None

    def route(self, point: Sequence[float]) -> ANode:
        node = self
        while not node.is_leaf:
            node = node.left if point[node.feature] <= node.threshold else node.right
        return node

    def leaves(self) -> list[ANode]:
        if self.is_leaf:
            return [self]
        return self.left.leaves() + self.right.leaves()

    def pruned_count(self) -> int:
        """Nodes of the original tree hidden behind abstract leaves."""
        if self.is_leaf:
            return _size(self.pruned) - 1 if self.is_abstract else 0
        return self.left.pruned_count() + self.right.pruned_count()

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())


def _size(node: Node) -> int:
    return node.internal_count() + len(node.leaves())


def _leaf_of(node: Node, optimistic: bool, fmap: tuple[int, ...]) -> ANode:
    if node.is_leaf:
        return ANode(value=node.value)
    vals = node.leaf_values()
    return ANode(value=max(vals) if optimistic else min(vals), pruned=node, fmap=fmap)


def truncate(node: Node, depth: int, optimistic: bool, fmap: tuple[int, ...]) -> ANode:
    if node.is_leaf or depth == 0:
        return _leaf_of(node, optimistic, fmap)
    return ANode(fmap[node.feature], node.threshold,
                 truncate(node.left, depth - 1, optimistic, fmap),
                 truncate(node.right, depth - 1, optimistic, fmap))


@dataclass(frozen=True)
class AbstractEnsemble:
    model: Ensemble
    target: int | None  # class index, or None when any class is acceptable
    trees: tuple[tuple[ANode, ...], ...]
    fmap: tuple[int, ...]

    def pruned_count(self) -> int:
        return sum(t.pruned_count() for group in self.trees for t in group)

    def scores(self, point: Sequence[float]) -> list[float]:
        return [sum(t.route(point).value for t in group) for group in self.trees]


def _resolve_target(model: Ensemble, target) -> int | None:
    if target is None:
        return None
    try:
        return model.class_index(target)
    except ModelError as exc:
        raise CegarError(str(exc)) from None


def abstract(ensembles: Sequence[Ensemble], targets: Sequence, depth: int,
             space: FeatureSpace | None = None) -> list[AbstractEnsemble]:
    """Truncate every tree at ``depth``: pruned subtrees become their max leaf for target-class trees
    and their min leaf for competitor trees. ``targets[k]`` is a class label or None (any class)."""
    if depth < 0:
        raise CegarError("abstraction depth must be >= 0")
    if len(targets) != len(ensembles):
        raise CegarError(f"{len(ensembles)} models but {len(targets)} targets")
    space = space or FeatureSpace.shared(ensembles)
    out = []
    for ens, tgt in zip(ensembles, targets):
        t = _resolve_target(ens, tgt)
        fmap = space.index_map(ens)
        trees = tuple(tuple(truncate(root, depth, c == t, fmap) for root in group)
                      for c, group in enumerate(ens.trees))
        out.append(AbstractEnsemble(ens, t, trees, fmap))
    return out


# -- feasibility ----------------------------------------------------------------------

@dataclass(frozen=True)
class Witness:
    point: tuple[float, ...]
    box: Box
    selection: tuple[tuple[int, int, int, int], ...]  # (model, class, tree, leaf ordinal)


def _wins(scores: Sequence[float], target: int) -> bool:
    return argmax_lowest(scores) == target


def _compatible_leaves(node: ANode, box: Box, out: list, ordinal: list):
    if node.is_leaf:
        out.append((ordinal[0], node, box))
        ordinal[0] += 1
        return
    for left in (True, False):
        child = node.left if left else node.right
        sub = box.split(node.feature, node.threshold, left)
        if sub.empty:
            ordinal[0] += len(child.leaves())
            continue
        _compatible_leaves(child, sub, out, ordinal)


@dataclass
class SearchStats:
    nodes: int = 0
    pruned_box: int = 0
    pruned_bound: int = 0


def feasibility(abstracts: Sequence[AbstractEnsemble], space: FeatureSpace,
                stats: SearchStats | None = None) -> Witness | None:
    """Branch-and-bound over one leaf per tree across all constrained models; None means UNSAT."""
    stats = stats if stats is not None else SearchStats()
    active = [(k, a) for k, a in enumerate(abstracts) if a.target is not None]
    items = [(k, c, t, tree) for k, a in active for c, group in enumerate(a.trees) for t, tree in enumerate(group)]

    # suffix sums of per-tree leaf extremes, per (model, class)
    rem_max = [dict() for _ in range(len(items) + 1)]
    rem_min = [dict() for _ in range(len(items) + 1)]
    for k, a in active:
        for c in range(len(a.trees)):
            rem_max[len(items)][(k, c)] = 0.0
            rem_min[len(items)][(k, c)] = 0.0
    for idx in range(len(items) - 1, -1, -1):
        k, c, _, tree = items[idx]
        rem_max[idx] = dict(rem_max[idx + 1])
        rem_min[idx] = dict(rem_min[idx + 1])
        vals = [leaf.value for leaf in tree.leaves()]
        rem_max[idx][(k, c)] += max(vals)
        rem_min[idx][(k, c)] += min(vals)

    sums = {key: 0.0 for key in rem_max[len(items)]}

    def hopeless(k: int, idx: int) -> bool:
        a = abstracts[k]
        t = a.target
        opt = sums[(k, t)] + rem_max[idx][(k, t)]
        for c in range(len(a.trees)):
            if c == t:
                continue
            pess = sums[(k, c)] + rem_min[idx][(k, c)]
            if opt < pess or (c < t and opt <= pess):
                return True
        return False

    selection: list = []

    def dfs(idx: int, box: Box) -> Witness | None:
        stats.nodes += 1
        if idx == len(items):
            for k, a in active:
                if not _wins([sums[(k, c)] for c in range(len(a.trees))], a.target):
                    return None
            return Witness(box.midpoint(), box, tuple(selection))
        k, c, t, tree = items[idx]
        leaves: list = []
        _compatible_leaves(tree, box, leaves, [0])
        for ordinal, leaf, leaf_box in leaves:
            sums[(k, c)] += leaf.value
            selection.append((k, c, t, ordinal))
            if hopeless(k, idx + 1):
                stats.pruned_bound += 1
            else:
                found = dfs(idx + 1, leaf_box)
                if found is not None:
                    return found
            selection.pop()
            sums[(k, c)] -= leaf.value
        return None

    for k, _ in active:
        if hopeless(k, 0):
            return None
    root = Box.full(space)
    if root.empty:
        return None
    return dfs(0, root)


# -- witness check and refinement -------------------------------------------------------

@dataclass(frozen=True)
class WitnessCheck:
    passed: bool
    classes: tuple[int, ...]
    failing_model: int | None = None
    actual_class: int | None = None


def check_witness(ensembles: Sequence[Ensemble], targets: Sequence, point: Sequence[float],
                  space: FeatureSpace | None = None) -> WitnessCheck:
    """Full inference of every model at ``point``; reports the first model missing its target."""
    space = space or FeatureSpace.shared(ensembles)
    classes = []
    failing = None
    for k, (ens, tgt) in enumerate(zip(ensembles, targets)):
        got = argmax_lowest(class_scores(ens, space.project(ens, point)))
        classes.append(got)
        t = _resolve_target(ens, tgt)
        if failing is None and t is not None and got != t:
            failing = (k, got)
    if failing is None:
        return WitnessCheck(True, tuple(classes))
    return WitnessCheck(False, tuple(classes), failing[0], failing[1])


def _expand(node: ANode, point: Sequence[float], optimistic: bool) -> ANode:
    """Rebuild ``node`` with the abstract leaf that ``point`` reaches opened by one level."""
    if node.is_leaf:
        p = node.pruned
        return ANode(node.fmap[p.feature], p.threshold, _leaf_of(p.left, optimistic, node.fmap),
                     _leaf_of(p.right, optimistic, node.fmap))
    if point[node.feature] <= node.threshold:
        return ANode(node.feature, node.threshold, _expand(node.left, point, optimistic), node.right)
    return ANode(node.feature, node.threshold, node.left, _expand(node.right, point, optimistic))


def refine(abstracts: Sequence[AbstractEnsemble], point: Sequence[float],
           space: FeatureSpace) -> list[AbstractEnsemble]:
    """Expand, in every tree whose abstract value at ``point`` differs from its full value, the abstract
    leaf the point routes into."""
    out, expanded = [], 0
    for a in abstracts:
        local = space.project(a.model, point)
        groups = []
        for c, group in enumerate(a.trees):
            new_group = []
            for t, tree in enumerate(group):
                leaf = tree.route(point)
                full = a.model.trees[c][t].route(local).value
                if leaf.is_abstract and leaf.value != full:
                    tree = _expand(tree, point, c == a.target)
                    expanded += 1
                new_group.append(tree)
            groups.append(tuple(new_group))
        out.append(AbstractEnsemble(a.model, a.target, tuple(groups), a.fmap))
    if expanded == 0:
        raise CegarError("witness agrees with the abstraction everywhere; nothing to refine")
    return out


# -- driver ------------------------------------------------------------------------------

SAT, UNSAT, BUDGET = "sat", "unsat", "budget-exhausted"


@dataclass
class CegarResult:
    status: str
    point: tuple[float, ...] | None = None
    classes: tuple[int, ...] = ()
    refinements: int = 0
    pruned_nodes: int = 0
    feature_names: tuple[str, ...] = ()
    stats: SearchStats = field(default_factory=SearchStats)

    def to_dict(self) -> dict:
        d = {"status": self.status, "refinements": self.refinements, "pruned_nodes_at_end": self.pruned_nodes}
        if self.point is not None:
            d["point"] = dict(zip(self.feature_names, self.point))
            d["verified_classes"] = list(self.classes)
        return d


def find_features(ensembles: Sequence[Ensemble], targets: Sequence, initial_depth: int = 1,
                  max_rounds: int = 1000) -> CegarResult:
    """abstract -> feasibility -> check -> refine until a verified point, UNSAT, or ``max_rounds`` refinements."""
    space = FeatureSpace.shared(ensembles)
    abstracts = abstract(ensembles, targets, initial_depth, space)
    stats = SearchStats()
    rounds = 0
    while True:
        pruned = sum(a.pruned_count() for a in abstracts)
        w = feasibility(abstracts, space, stats)
        if w is None:
            return CegarResult(UNSAT, refinements=rounds, pruned_nodes=pruned, feature_names=space.names, stats=stats)
        check = check_witness(ensembles, targets, w.point, space)
        if check.passed:
            return CegarResult(SAT, w.point, check.classes, rounds, pruned, space.names, stats)
        if rounds >= max_rounds:
            return CegarResult(BUDGET, refinements=rounds, pruned_nodes=pruned, feature_names=space.names, stats=stats)
        abstracts = refine(abstracts, w.point, space)
        rounds += 1


def enumerate_leaf_regions(ensembles: Sequence[Ensemble], targets: Sequence, limit: int = 10**4) -> list[Box]:
    """Every non-empty box from one full-tree leaf per tree where all targets win (brute-force oracle)."""
    full = abstract(ensembles, targets, max((r.height() for e in ensembles for _, _, r in e.all_trees()), default=0))
    space = FeatureSpace.shared(ensembles)
    active = [a for a in full if a.target is not None]
    trees = [(k, c, tree) for k, a in enumerate(full) if a.target is not None
             for c, group in enumerate(a.trees) for tree in group]
    combos = math.prod(len(tree.leaves()) for _, _, tree in trees) if trees else 1
    if combos > limit:
        raise CegarError(f"{combos} leaf combinations exceed the enumeration limit {limit}")
    regions = []

    def leaf_boxes(tree: ANode, box: Box):
        out: list = []
        _compatible_leaves(tree, box, out, [0])
        return out

    def rec(i: int, box: Box, sums: dict):
        if i == len(trees):
            if all(_wins([sums.get((k, c), 0.0) for c in range(len(a.trees))], a.target)
                   for k, a in enumerate(full) if a.target is not None):
                regions.append(box)
            return
        k, c, tree = trees[i]
        for _, leaf, b in leaf_boxes(tree, box):
            sums[(k, c)] = sums.get((k, c), 0.0) + leaf.value
            rec(i + 1, b, sums)
            sums[(k, c)] -= leaf.value

    if active:
        rec(0, Box.full(space), {})
    return regions
