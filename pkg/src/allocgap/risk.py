"""Per-VM adversarial regions, their overlap surface, and which features the surface actually constrains."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cegar import Box, FeatureSpace, Interval
from .models import Ensemble, argmax_lowest, class_scores

NON_ACTIONABLE_COVERAGE = 0.999


class RiskError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """Box in which every model routes through the same leaves as at ``point``."""

    space: FeatureSpace
    box: Box
    point: tuple[float, ...]


def _probe_points(box: Box, rng: np.random.Generator, samples: int) -> list[tuple[float, ...]]:
    """Midpoint, both extreme corners (nudged inside an open lower edge) and random interior points."""

    def low(iv: Interval) -> float:
        return iv.lo if iv.lo_closed else math.nextafter(iv.lo, iv.hi)

    pts = [box.midpoint(), tuple(low(iv) for iv in box.intervals), tuple(iv.hi for iv in box.intervals)]
    for _ in range(samples):
        pts.append(tuple(float(rng.uniform(low(iv), iv.hi)) if iv.hi > iv.lo else iv.lo for iv in box.intervals))
    return pts


def region_of(ensembles: Sequence[Ensemble], point: Sequence[float], check_samples: int = 10,
              rng_seed: int = 0) -> Region:
    """Intersect the threshold tests along every tree's routing path at ``point``."""
    space = FeatureSpace.shared(ensembles)
    point = tuple(float(v) for v in point)
    if len(point) != len(space.names):
        raise RiskError(f"expected {len(space.names)} features, got {len(point)}")
    for name, x, (lo, hi) in zip(space.names, point, space.bounds):
        if not lo <= x <= hi:
            raise RiskError(f"feature {name} = {x} outside its bounds [{lo}, {hi}]")
    box = Box.full(space)
    for ens in ensembles:
        fmap = space.index_map(ens)
        for _, _, root in ens.all_trees():
            node = root
            while not node.is_leaf:
                g = fmap[node.feature]
                left = point[g] <= node.threshold
                box = box.split(g, node.threshold, left)
                node = node.left if left else node.right
    region = Region(space, box, point)
    if check_samples:
        expected = _predictions(ensembles, space, point)
        for p in _probe_points(box, np.random.default_rng(rng_seed), check_samples):
            if _predictions(ensembles, space, p) != expected:
                raise RiskError(f"prediction changes inside the region at {p}")
    return region


def _predictions(ensembles, space, point):
    return tuple(argmax_lowest(class_scores(e, space.project(e, point))) for e in ensembles)


@dataclass
class RiskSurface:
    space: FeatureSpace
    breakpoints: list[np.ndarray]
    scores: np.ndarray  # one entry per grid cell; cell k on axis d is (breakpoints[d][k], breakpoints[d][k+1]]
    threshold: int

    @property
    def kept(self) -> np.ndarray:
        return self.scores >= self.threshold

    def cells(self):
        """Yield (per-feature (lo, hi) tuple, score) for every kept cell in C order."""
        for idx in zip(*np.nonzero(self.kept)):
            edges = tuple((float(self.breakpoints[d][k]), float(self.breakpoints[d][k + 1])) for d, k in enumerate(idx))
            yield edges, int(self.scores[idx])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "feature", "lo", "hi", "score"])
        for c, (edges, score) in enumerate(self.cells()):
            for name, (lo, hi) in zip(self.space.names, edges):
                w.writerow([c, name, repr(lo), repr(hi), score])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"threshold": self.threshold, "kept_cells": int(self.kept.sum()), "features": {}}
        for name in self.space.names:
            cov, actionable = feature_coverage(self, name)
            out["features"][name] = {"coverage": cov, "actionable": actionable}
        return out

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True) + "\n"


def merge(regions: Sequence[Region], threshold: int) -> RiskSurface:
    """Score each cell of the breakpoint grid by how many regions contain it; keep cells at or above ``threshold``."""
    if not regions:
        raise RiskError("cannot merge an empty list of regions")
    space = regions[0].space
    if any(r.space != space for r in regions):
        raise RiskError("regions are over different feature spaces")
    dims = len(space.names)
    breakpoints = []
    for d in range(dims):
        lo, hi = space.bounds[d]
        edges = {lo, hi}
        for r in regions:
            iv = r.box.intervals[d]
            edges.update((min(max(iv.lo, lo), hi), min(max(iv.hi, lo), hi)))
        breakpoints.append(np.array(sorted(edges)))
    shape = tuple(max(len(b) - 1, 1) for b in breakpoints)
    # difference array over the grid, prefix-summed along each axis
    diff = np.zeros(tuple(s + 1 for s in shape), dtype=np.int64)
    for r in regions:
        spans = []
        for d in range(dims):
            iv = r.box.intervals[d]
            b = breakpoints[d]
            if len(b) == 1:
                spans.append((0, 1))
                continue
            spans.append((int(np.searchsorted(b, iv.lo)), int(np.searchsorted(b, iv.hi))))
        if any(a >= z for a, z in spans):
            continue  # zero-volume region covers no cell
        for corner in range(1 << dims):
            idx, sign = [], 1
            for d in range(dims):
                if corner >> d & 1:
                    idx.append(spans[d][1])
                    sign = -sign
                else:
                    idx.append(spans[d][0])
            diff[tuple(idx)] += sign
    for d in range(dims):
        diff = np.cumsum(diff, axis=d)
    scores = diff[tuple(slice(0, s) for s in shape)]
    return RiskSurface(space, breakpoints, scores, int(threshold))


def feature_coverage(surface: RiskSurface, feature: str) -> tuple[float, bool]:
    """Length of the kept cells' projection on ``feature`` over the feature's span; coverage >= 0.999 means
    the surface spreads over the whole range and the feature is not actionable."""
    try:
        d = surface.space.names.index(feature)
    except ValueError:
        raise RiskError(f"unknown feature {feature!r}") from None
    lo, hi = surface.space.bounds[d]
    kept = surface.kept
    if not kept.any() or hi <= lo:
        return 0.0, True
    axes = tuple(a for a in range(kept.ndim) if a != d)
    used = kept.any(axis=axes) if axes else kept
    b = surface.breakpoints[d]
    length = float(np.sum(np.diff(b)[used]))
    cov = length / (hi - lo)
    return cov, cov < NON_ACTIONABLE_COVERAGE


def count_containing(regions: Sequence[Region], point: Sequence[float]) -> int:
    """Brute-force containment count (oracle for cell scores)."""
    return sum(1 for r in regions if r.box.contains(point))
