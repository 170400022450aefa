"""Joint prediction/label distributions and count bounds that hold with high probability on finite sequences."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_Z = 3.89
RULE_OF_THUMB = 5


class BoundError(ValueError):
    pass


@dataclass(frozen=True)
class CountBound:
    property_id: str
    N: int
    lower: int
    upper: int
    p: float
    confidence: float

    def __post_init__(self):
        if not 0 <= self.lower <= self.upper <= self.N:
            raise BoundError(f"{self.property_id}: invalid bound [{self.lower}, {self.upper}] for N={self.N}")

    def contains(self, count: int) -> bool:
        return self.lower <= count <= self.upper


def two_sided_confidence(z: float) -> float:
    return math.erf(z / math.sqrt(2.0))


def min_sequence_length(p: float) -> int:
    """Smallest N with N*p >= 5 and N*(1-p) >= 5."""
    if not 0 < p < 1:
        raise BoundError(f"the Np >= 5 and N(1-p) >= 5 rule is undefined for p = {p}")
    smaller = min(p, 1 - p)
    n = max(1, math.ceil(RULE_OF_THUMB / smaller - 1e-9))
    while n * p < RULE_OF_THUMB - 1e-9 or n * (1 - p) < RULE_OF_THUMB - 1e-9:
        n += 1
    return n


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def count_bounds(p: float, N: int, z: float = DEFAULT_Z, property_id: str = "") -> CountBound:
    """Integer interval around N*p of half-width z standard deviations of the sample proportion."""
    if not 0 <= p <= 1:
        raise BoundError(f"p = {p} outside [0, 1]")
    if N < 0:
        raise BoundError("N must be non-negative")
    if z < 0:
        raise BoundError("z must be non-negative")
    conf = two_sided_confidence(z)
    if p in (0.0, 1.0):
        k = int(round(N * p))
        return CountBound(property_id, N, k, k, p, conf)
    need = min_sequence_length(p)
    if N < need:
        raise BoundError(
            f"{property_id or 'bound'}: N = {N} violates the Np >= 5 and N(1-p) >= 5 rule for p = {p} (need N >= {need})"
        )
    sigma = math.sqrt(p * (1 - p) / N)
    lower = max(0, math.ceil(N * (p - z * sigma) - 1e-9))
    upper = min(N, math.floor(N * (p + z * sigma) + 1e-9))
    center = _round_half_up(N * p)
    lower, upper = min(lower, center), max(upper, center)
    return CountBound(property_id, N, lower, upper, p, conf)


def partition_bounds(bound: CountBound, partition_sizes: Sequence[int], rng_seed: int = 0,
                     trials: int = 10_000) -> list[CountBound]:
    """Per-partition [min, max] observed counts over seeded Bernoulli(p) draws, tightened against the global bound."""
    sizes = [int(s) for s in partition_sizes]
    if sum(sizes) != bound.N:
        raise BoundError(f"partition sizes sum to {sum(sizes)}, expected {bound.N}")
    if len(sizes) == 1:
        return [bound]
    rng = np.random.default_rng(rng_seed)
    lows, highs = [], []
    for size in sizes:
        draws = rng.binomial(size, bound.p, size=trials)
        lows.append(int(draws.min()))
        highs.append(int(draws.max()))
    total_low, total_high = sum(lows), sum(highs)
    if total_low > bound.upper or total_high < bound.lower:
        raise BoundError(
            f"{bound.property_id}: partition bounds sum to [{total_low}, {total_high}], "
            f"incompatible with the global [{bound.lower}, {bound.upper}]; partitions too small for the confidence"
        )
    out = []
    for k, size in enumerate(sizes):
        lo = max(lows[k], bound.lower - (total_high - highs[k]))
        hi = min(highs[k], bound.upper - (total_low - lows[k]))
        out.append(CountBound(f"{bound.property_id}#{k}", size, max(lo, 0), min(hi, size), bound.p, bound.confidence))
    return out


def monte_carlo_coverage(p: float, N: int, bound: CountBound, trials: int = 100_000, rng_seed: int = 0) -> float:
    """Fraction of Binomial(N, p) draws landing inside the bound."""
    rng = np.random.default_rng(rng_seed)
    draws = rng.binomial(N, p, size=trials)
    return float(np.mean((draws >= bound.lower) & (draws <= bound.upper)))


# -- distribution profile ---------------------------------------------------

def _cell_key(cell) -> str:
    return ",".join(str(v) for v in cell)


def _parse_cell(key: str) -> tuple[int, ...]:
    return tuple(int(v) for v in key.split(","))


def _normalize(counts: Counter) -> dict:
    total = sum(counts.values())
    return {k: v / total for k, v in sorted(counts.items())} if total else {}


@dataclass
class DistributionProfile:
    """Categorical distributions observed in data.

    ``cells[model]`` maps a (label, prediction) pair to its probability; ``label_mix[model]`` the label
    marginal; ``vm_types`` maps (req_cpu, req_mem) to probability; ``arrival_rate`` is the fraction of
    arrivals falling in each epoch window.
    """

    cells: dict[str, dict[tuple[int, int], float]] = field(default_factory=dict)
    label_mix: dict[str, dict[int, float]] = field(default_factory=dict)
    vm_types: dict[tuple[int, int], float] = field(default_factory=dict)
    arrival_rate: list[float] = field(default_factory=list)
    window_epochs: int = 1

    def validate(self, tol: float = 1e-9) -> None:
        dists = [(f"cells[{m}]", d) for m, d in self.cells.items()]
        dists += [(f"label_mix[{m}]", d) for m, d in self.label_mix.items()]
        if self.vm_types:
            dists.append(("vm_types", self.vm_types))
        if self.arrival_rate:
            dists.append(("arrival_rate", dict(enumerate(self.arrival_rate))))
        for name, d in dists:
            total = sum(d.values())
            if abs(total - 1.0) > tol:
                raise BoundError(f"{name} sums to {total}, not 1")
            if any(v < 0 for v in d.values()):
                raise BoundError(f"{name} has negative probabilities")

    def accuracy(self, model: str) -> float:
        return sum(v for (lab, pred), v in self.cells[model].items() if lab == pred)

    def to_dict(self) -> dict:
        return {
            "cells": {m: {_cell_key(c): v for c, v in d.items()} for m, d in self.cells.items()},
            "label_mix": {m: {str(k): v for k, v in d.items()} for m, d in self.label_mix.items()},
            "vm_types": {_cell_key(t): v for t, v in self.vm_types.items()},
            "arrival_rate": list(self.arrival_rate),
            "window_epochs": self.window_epochs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DistributionProfile:
        prof = cls(
            cells={m: {_parse_cell(k): float(v) for k, v in cd.items()} for m, cd in d.get("cells", {}).items()},
            label_mix={m: {int(k): float(v) for k, v in ld.items()} for m, ld in d.get("label_mix", {}).items()},
            vm_types={_parse_cell(k): float(v) for k, v in d.get("vm_types", {}).items()},
            arrival_rate=[float(v) for v in d.get("arrival_rate", [])],
            window_epochs=int(d.get("window_epochs", 1)),
        )
        prof.validate()
        return prof

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> DistributionProfile:
        return cls.from_dict(json.loads(Path(path).read_text()))


def estimate_profile(pairs: dict[str, Sequence[tuple[int, int]]], vm_types: Sequence[tuple[int, int]] = (),
                     arrivals: Sequence[int] = (), window_epochs: int = 1) -> DistributionProfile:
    """Frequency-count estimate. ``pairs[model]`` lists (label, prediction) per VM."""
    prof = DistributionProfile(window_epochs=window_epochs)
    for model, seq in pairs.items():
        prof.cells[model] = _normalize(Counter(tuple(int(v) for v in c) for c in seq))
        prof.label_mix[model] = _normalize(Counter(int(c[0]) for c in seq))
    if vm_types:
        prof.vm_types = _normalize(Counter(tuple(int(v) for v in t) for t in vm_types))
    if arrivals:
        windows = Counter(a // window_epochs for a in arrivals)
        n_windows = max(windows) + 1
        total = len(arrivals)
        prof.arrival_rate = [windows.get(w, 0) / total for w in range(n_windows)]
    prof.validate()
    return prof
