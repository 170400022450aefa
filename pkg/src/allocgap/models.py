"""Gradient-boosted tree ensembles, softmax-free inference and the memorizing reference model."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    """A tree node: internal when ``feature`` is set, leaf otherwise.

    Routing goes left iff ``x[feature] <= threshold``.
    """

    feature: int | None = None
    threshold: float | None = None
    left: Node | None = None
    right: Node | None = None
    value: float | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @classmethod
    def leaf(cls, value: float) -> Node:
        return cls(value=float(value))

    @classmethod
    def split(cls, feature: int, threshold: float, left: Node, right: Node) -> Node:
        return cls(feature=int(feature), threshold=float(threshold), left=left, right=right)

    def route(self, x: Sequence[float]) -> Node:
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node

    def leaves(self) -> list[Node]:
        if self.is_leaf:
            return [self]
        return self.left.leaves() + self.right.leaves()

    def leaf_values(self) -> list[float]:
        return [n.value for n in self.leaves()]

    def internal_count(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + self.left.internal_count() + self.right.internal_count()

    def height(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.height(), self.right.height())

    def features_used(self) -> set[int]:
        if self.is_leaf:
            return set()
        return {self.feature} | self.left.features_used() | self.right.features_used()


@dataclass(frozen=True)
class Ensemble:
    feature_names: tuple[str, ...]
    classes: tuple
    trees: tuple[tuple[Node, ...], ...]
    feature_bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "trees", tuple(tuple(group) for group in self.trees))
        object.__setattr__(self, "feature_bounds", tuple((float(lo), float(hi)) for lo, hi in self.feature_bounds))
        if not self.classes:
            raise ModelError("ensemble needs at least one class")
        if len(self.trees) != len(self.classes):
            raise ModelError(f"{len(self.classes)} classes but {len(self.trees)} tree groups")
        if len(self.feature_bounds) != len(self.feature_names):
            raise ModelError("one [min, max] bound per feature is required")
        for c, group in enumerate(self.trees):
            if not group:
                raise ModelError(f"class {self.classes[c]!r} has no trees")
            for tree in group:
                bad = [f for f in tree.features_used() if not 0 <= f < len(self.feature_names)]
                if bad:
                    raise ModelError(f"class {self.classes[c]!r}: unknown feature indices {bad}")
        for lo, hi in self.feature_bounds:
            if not lo < hi:
                raise ModelError(f"feature bound [{lo}, {hi}] is empty")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def all_trees(self):
        """Yield (class index, tree index within class, root)."""
        for c, group in enumerate(self.trees):
            for t, root in enumerate(group):
                yield c, t, root

    def total_nodes(self) -> int:
        return sum(root.internal_count() + len(root.leaves()) for _, _, root in self.all_trees())

    def class_index(self, label) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ModelError(f"unknown class {label!r}; classes are {list(self.classes)}") from None


@dataclass(frozen=True)
class Prediction:
    class_index: int
    raw_scores: tuple[float, ...]


def argmax_lowest(scores: Sequence[float]) -> int:
    """Index of the maximum score; ties go to the lowest index."""
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best]:
            best = i
    return best


def _check_input(model: Ensemble, x: Sequence[float]) -> None:
    if len(x) != model.n_features:
        raise ModelError(f"expected {model.n_features} features, got {len(x)}")
    if not all(math.isfinite(v) for v in x):
        raise ModelError("feature vector contains non-finite values")


def class_scores(model: Ensemble, x: Sequence[float]) -> list[float]:
    _check_input(model, x)
    return [sum(root.route(x).value for root in group) for group in model.trees]


def predict(model: Ensemble, x: Sequence[float]) -> Prediction:
    scores = class_scores(model, x)
    return Prediction(argmax_lowest(scores), tuple(scores))


def softmax(scores: Sequence[float]) -> np.ndarray:
    z = np.asarray(scores, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


# -- portable JSON ----------------------------------------------------------

def _flatten(root: Node) -> list[dict]:
    nodes: list[dict] = []

    def visit(node: Node) -> int:
        idx = len(nodes)
        if node.is_leaf:
            nodes.append({"value": node.value})
            return idx
        entry = {"feature": node.feature, "threshold": node.threshold, "left": None, "right": None}
        nodes.append(entry)
        entry["left"] = visit(node.left)
        entry["right"] = visit(node.right)
        return idx

    visit(root)
    return nodes


def _unflatten(nodes: list[dict], n_features: int, where: str) -> Node:
    if not nodes:
        raise ModelError(f"{where}: empty node list")
    seen: set[int] = set()

    def build(idx) -> Node:
        if not isinstance(idx, int) or not 0 <= idx < len(nodes):
            raise ModelError(f"{where}: child index {idx!r} out of range")
        if idx in seen:
            raise ModelError(f"{where}: node {idx} reached twice (not a tree)")
        seen.add(idx)
        entry = nodes[idx]
        if "value" in entry:
            return Node.leaf(entry["value"])
        for key in ("feature", "threshold", "left", "right"):
            if entry.get(key) is None:
                raise ModelError(f"{where}: node {idx} missing {key!r}")
        if not 0 <= entry["feature"] < n_features:
            raise ModelError(f"{where}: node {idx} uses unknown feature index {entry['feature']}")
        return Node.split(entry["feature"], entry["threshold"], build(entry["left"]), build(entry["right"]))

    root = build(0)
    if len(seen) != len(nodes):
        raise ModelError(f"{where}: {len(nodes) - len(seen)} unreachable nodes")
    return root


def model_to_dict(model: Ensemble) -> dict:
    return {
        "feature_names": list(model.feature_names),
        "classes": list(model.classes),
        "feature_bounds": [list(b) for b in model.feature_bounds],
        "trees": [[_flatten(root) for root in group] for group in model.trees],
    }


def model_from_dict(d: dict) -> Ensemble:
    for key in ("feature_names", "classes", "feature_bounds", "trees"):
        if key not in d:
            raise ModelError(f"model JSON missing {key!r}")
    if not d["classes"]:
        raise ModelError("model JSON has an empty class list")
    n_features = len(d["feature_names"])
    trees = []
    for c, group in enumerate(d["trees"]):
        trees.append(tuple(_unflatten(nodes, n_features, f"class {c} tree {t}") for t, nodes in enumerate(group)))
    return Ensemble(d["feature_names"], d["classes"], trees, d["feature_bounds"])


def dumps_model(model: Ensemble) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1) + "\n"


def save_model(model: Ensemble, path: str | Path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path: str | Path) -> Ensemble:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON ({exc})") from None
    return model_from_dict(data)


def bounds_from_data(X: np.ndarray, pad: float = 0.01) -> list[tuple[float, float]]:
    """Per-feature [min, max] of the data, widened by ``pad`` of the span on each side."""
    X = np.asarray(X, dtype=float)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return [(float(a - pad * s), float(b + pad * s)) for a, b, s in zip(lo, hi, span)]


# -- reference model --------------------------------------------------------

class ReferenceModel:
    """Memorizes a feature -> label map; unseen inputs fall back to the nearest training vector."""

    def __init__(self, X: np.ndarray, y: Sequence):
        self.X = np.asarray(X, dtype=float)
        self.y = list(y)
        self._lookup = {tuple(row): label for row, label in zip(self.X.tolist(), self.y)}

    def predict(self, x: Sequence[float]):
        key = tuple(float(v) for v in x)
        if key in self._lookup:
            return self._lookup[key]
        d = np.sum((self.X - np.asarray(key)) ** 2, axis=1)
        # argmin returns the first (lowest training index) minimum
        return self.y[int(np.argmin(d))]

    def classes(self) -> list:
        return sorted(set(self.y))

    def to_ensemble(self, feature_names: Sequence[str], feature_bounds=None, classes=None) -> Ensemble:
        """Tree-ensemble form: one fully grown tree, replicated per class with 0/1 leaf scores.

        Exact on every training vector, so it can join a CEGAR conjunction like any other model.
        """
        classes = list(classes) if classes is not None else self.classes()
        if feature_bounds is None:
            feature_bounds = bounds_from_data(self.X)
        idx = np.arange(len(self.y))
        labels = np.array([classes.index(v) for v in self.y])
        structure = _grow(self.X, labels, idx)
        trees = [(_relabel(structure, c),) for c in range(len(classes))]
        return Ensemble(tuple(feature_names), tuple(classes), trees, feature_bounds)


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return 1.0 - float(np.sum(p * p))


def _grow(X: np.ndarray, labels: np.ndarray, idx: np.ndarray):
    """Recursive pure-leaf splitter. Returns nested tuples: ("leaf", class) or (f, thr, left, right)."""
    classes_here = np.unique(labels[idx])
    if len(classes_here) == 1:
        return ("leaf", int(classes_here[0]))
    n_cls = int(labels.max()) + 1
    best = None
    for f in range(X.shape[1]):
        order = idx[np.argsort(X[idx, f], kind="stable")]
        vals = X[order, f]
        total = np.bincount(labels[order], minlength=n_cls)
        left = np.zeros(n_cls, dtype=int)
        for k in range(len(order) - 1):
            left[labels[order[k]]] += 1
            if vals[k] == vals[k + 1]:
                continue
            right = total - left
            n_l, n_r = k + 1, len(order) - k - 1
            cost = (n_l * _gini(left) + n_r * _gini(right)) / len(order)
            if best is None or cost < best[0] - 1e-12:
                best = (cost, f, (vals[k] + vals[k + 1]) / 2.0)
    if best is None:
        raise ModelError("cannot separate identical feature vectors with different labels")
    _, f, thr = best
    go_left = X[idx, f] <= thr
    return (f, thr, _grow(X, labels, idx[go_left]), _grow(X, labels, idx[~go_left]))


def _relabel(structure, target: int) -> Node:
    if structure[0] == "leaf":
        return Node.leaf(1.0 if structure[1] == target else 0.0)
    f, thr, left, right = structure
    return Node.split(f, thr, _relabel(left, target), _relabel(right, target))


def build_reference_model(dataset: Sequence[tuple[Sequence[float], object]]) -> ReferenceModel:
    if not dataset:
        raise ModelError("reference model needs at least one (features, label) pair")
    arity = {len(x) for x, _ in dataset}
    if len(arity) != 1:
        raise ModelError(f"inconsistent feature arity {sorted(arity)}")
    seen: dict[tuple, object] = {}
    conflicts: dict[tuple, set] = {}
    for x, label in dataset:
        key = tuple(float(v) for v in x)
        if key in seen and seen[key] != label:
            conflicts.setdefault(key, {seen[key]}).add(label)
        seen.setdefault(key, label)
    if conflicts:
        listing = "; ".join(f"{list(k)} -> {sorted(map(str, v))}" for k, v in conflicts.items())
        raise ModelError(f"conflicting labels for duplicate feature vectors: {listing}")
    X = np.array(list(seen.keys()), dtype=float)
    return ReferenceModel(X, list(seen.values()))


def perturb_labels(dataset: Sequence[tuple], p: float, rng_seed: int, classes: Sequence | None = None) -> list[tuple]:
    """Give exactly ceil(p * n) seeded-random records a different label, uniformly among the other classes."""
    if not 0 <= p <= 1:
        raise ModelError(f"drift fraction {p} outside [0, 1]")
    n = len(dataset)
    k = math.ceil(p * n - 1e-9) if p > 0 else 0
    if k == 0:
        return list(dataset)
    label_space = sorted(set(classes) if classes is not None else {label for _, label in dataset})
    if len(label_space) < 2:
        raise ModelError("cannot change labels in a single-class label space")
    rng = np.random.default_rng(rng_seed)
    chosen = set(rng.choice(n, size=k, replace=False).tolist())
    out = []
    for i, (x, label) in enumerate(dataset):
        if i in chosen:
            others = [c for c in label_space if c != label]
            label = others[int(rng.integers(len(others)))]
        out.append((x, label))
    return out
