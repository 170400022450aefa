"""Flow-graph consistency check between an existing binary model and a hypothetical one.

Each VM follows one path through three layers: the offset of model 1 (prediction minus label), the
offset of model 2, and their relative difference R = offset2 - offset1. Node capacities are the
observed (or targeted) fractions; a non-negative path flow meeting every capacity exists iff the
targets are jointly achievable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .bounds import BoundError, CountBound, min_sequence_length

OFFSETS = (0, 1, -1)  # node order within a layer: 0, +, -
LAYERS = ("m1", "m2", "r")

# (model-1 offset, model-2 offset, R); R = offset2 - offset1 and opposite signs never co-occur
PATHS = ((0, 0, 0), (0, 1, 1), (0, -1, -1), (1, 0, -1), (1, 1, 0), (-1, 0, 1), (-1, -1, 0))


class FlowError(ValueError):
    pass


def _frac(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (list, tuple)) and len(x) == 2:
        return Fraction(int(x[0]), int(x[1]))
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


@dataclass(frozen=True)
class CapacityProfile:
    m1: tuple[Fraction, Fraction, Fraction]
    m2: tuple[Fraction, Fraction, Fraction]
    r: tuple[Fraction, Fraction, Fraction]

    @classmethod
    def of(cls, m1: Sequence, m2: Sequence, r: Sequence) -> CapacityProfile:
        prof = cls(tuple(map(_frac, m1)), tuple(map(_frac, m2)), tuple(map(_frac, r)))
        prof.validate()
        return prof

    def layer(self, name: str) -> tuple[Fraction, ...]:
        return getattr(self, name)

    def validate(self, tol: float = 1e-9) -> None:
        for name in LAYERS:
            caps = self.layer(name)
            if len(caps) != 3:
                raise FlowError(f"layer {name} needs capacities for offsets (0, +, -), got {len(caps)}")
            if any(c < 0 or c > 1 for c in caps):
                raise FlowError(f"layer {name} has a capacity outside [0, 1]")
            if abs(float(sum(caps)) - 1.0) > tol:
                raise FlowError(f"layer {name} capacities sum to {float(sum(caps))}, not 1")

    def to_dict(self) -> dict:
        return {name: [float(c) for c in self.layer(name)] for name in LAYERS}

    @classmethod
    def from_dict(cls, d: dict) -> CapacityProfile:
        missing = [k for k in LAYERS if k not in d]
        if missing:
            raise FlowError(f"profile lacks layers {missing}")
        return cls.of(d["m1"], d["m2"], d["r"])


def node_equations(profile: CapacityProfile):
    """Rows (layer, offset, coefficient vector over PATHS, capacity)."""
    rows = []
    for li, name in enumerate(LAYERS):
        for k, off in enumerate(OFFSETS):
            coeffs = [Fraction(int(path[li] == off)) for path in PATHS]
            rows.append((name, off, coeffs, profile.layer(name)[k]))
    return rows


@dataclass(frozen=True)
class FlowSolution:
    flows: tuple[Fraction, ...]

    def residuals(self, profile: CapacityProfile) -> list[Fraction]:
        return [sum(c * p for c, p in zip(coeffs, self.flows)) - cap for _, _, coeffs, cap in node_equations(profile)]

    def to_dict(self) -> dict:
        return {"paths": [list(p) for p in PATHS], "flows": [[f.numerator, f.denominator] for f in self.flows]}

    @classmethod
    def from_dict(cls, d: dict) -> FlowSolution:
        return cls(tuple(_frac(f) for f in d["flows"]))


@dataclass(frozen=True)
class Infeasible:
    """Farkas certificate: weights y with y.A >= 0 on every path column and y.b < 0."""

    weights: tuple[Fraction, ...]

    def verify(self, profile: CapacityProfile) -> bool:
        rows = node_equations(profile)
        for j in range(len(PATHS)):
            if sum(y * coeffs[j] for y, (_, _, coeffs, _) in zip(self.weights, rows)) < 0:
                return False
        return sum(y * cap for y, (_, _, _, cap) in zip(self.weights, rows)) < 0

    def describe(self) -> str:
        terms = []
        for y, (layer, off) in zip(self.weights, LAYERS_NODES):
            if y:
                terms.append(f"{y}*C({layer}{'0+-'[OFFSETS.index(off)]})")
        return " + ".join(terms) + " < 0 while every path contributes >= 0"

    def to_dict(self) -> dict:
        return {"infeasible": True, "certificate": [[y.numerator, y.denominator] for y in self.weights],
                "explanation": self.describe()}


LAYERS_NODES = [(name, off) for name in LAYERS for off in OFFSETS]


def phase_one(A: list[list[Fraction]], b: list[Fraction]):
    """Exact phase-1 simplex (Bland's rule) for A x = b, x >= 0.

    Returns ("feasible", x) or ("infeasible", y) with y.A >= 0 and y.b < 0.
    """
    m, n = len(A), len(A[0]) if A else 0
    sign = [Fraction(-1) if bi < 0 else Fraction(1) for bi in b]
    # tableau over original columns plus one artificial per row
    T = [[sign[i] * a for a in A[i]] + [Fraction(int(i == k)) for k in range(m)] + [sign[i] * b[i]]
         for i in range(m)]
    basis = [n + i for i in range(m)]
    cost = [Fraction(0)] * n + [Fraction(1)] * m

    def reduced(j):
        return cost[j] - sum(cost[basis[i]] * T[i][j] for i in range(m))

    while True:
        entering = next((j for j in range(n + m) if j not in basis and reduced(j) < 0), None)
        if entering is None:
            break
        ratios = [(T[i][-1] / T[i][entering], basis[i], i) for i in range(m) if T[i][entering] > 0]
        _, _, row = min(ratios)
        piv = T[row][entering]
        T[row] = [v / piv for v in T[row]]
        for i in range(m):
            if i != row and T[i][entering] != 0:
                f = T[i][entering]
                T[i] = [a - f * c for a, c in zip(T[i], T[row])]
        basis[row] = entering
    value = sum(cost[basis[i]] * T[i][-1] for i in range(m))
    if value == 0:
        x = [Fraction(0)] * n
        for i, j in enumerate(basis):
            if j < n:
                x[j] = T[i][-1]
        return "feasible", x
    # dual of the phase-1 optimum: reduced cost of artificial k is 1 - y'_k
    y_flipped = [1 - reduced(n + k) for k in range(m)]
    return "infeasible", [-sign[k] * y_flipped[k] for k in range(m)]


def solve_flows(profile: CapacityProfile) -> FlowSolution | Infeasible:
    profile.validate()
    rows = node_equations(profile)
    status, vec = phase_one([r[2] for r in rows], [r[3] for r in rows])
    if status == "feasible":
        sol = FlowSolution(tuple(vec))
        if any(r != 0 for r in sol.residuals(profile)):
            raise FlowError("internal error: simplex returned a point with nonzero residual")
        return sol
    cert = Infeasible(tuple(vec))
    if not cert.verify(profile):
        raise FlowError("internal error: infeasibility certificate does not verify")
    return cert


# -- flows to per-VM constraints --------------------------------------------------

def largest_remainder(fractions: Sequence[Fraction], N: int) -> list[int]:
    """Integer counts summing to N, each floor(N*f) or one more; remainders break ties by position."""
    quotas = [N * _frac(f) for f in fractions]
    counts = [int(q) for q in quotas]  # floor for non-negative rationals
    short = N - sum(counts)
    order = sorted(range(len(quotas)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[:short]:
        counts[k] += 1
    return counts


def path_cells(path: tuple[int, int, int]) -> tuple[frozenset, frozenset]:
    """Admissible (label, prediction) pairs for model 1 and model 2 on a VM following ``path``."""
    o1, o2, _ = path
    labels = [lab for lab in (0, 1) if 0 <= lab + o1 <= 1 and 0 <= lab + o2 <= 1]
    return (frozenset((lab, lab + o1) for lab in labels), frozenset((lab, lab + o2) for lab in labels))


@dataclass
class FlowAssignment:
    paths: list[tuple[int, int, int]]
    counts: list[int]
    bounds: list[CountBound]

    def m1_prediction(self, i: int, label: int) -> int:
        return label + self.paths[i][0]

    def pins(self, model_key: str = "cpu", which: int = 2) -> dict[tuple[int, str], frozenset]:
        """Per-VM pins for the search: which=2 pins the hypothetical model, which=1 the current one."""
        return {(i, model_key): path_cells(p)[which - 1] for i, p in enumerate(self.paths)}


def flows_to_constraints(sol: FlowSolution, N: int, seed: int = 0, check_rule: bool = True) -> FlowAssignment:
    """Seeded per-VM path assignment whose path counts are the largest-remainder rounding of N*P."""
    nonzero = [f for f in sol.flows if 0 < f < 1] if check_rule else []
    for f in nonzero:
        need = min_sequence_length(float(f))
        if N < need:
            raise BoundError(f"N = {N} is too small for path fraction {f} (Np >= 5 and N(1-p) >= 5 need N >= {need})")
    counts = largest_remainder(sol.flows, N)
    labels = [k for k, c in enumerate(counts) for _ in range(c)]
    order = np.random.default_rng(seed).permutation(N)
    paths = [PATHS[labels[int(k)]] for k in order]
    bounds = [CountBound(f"path{PATHS[k]}", N, c, c, float(sol.flows[k]), 1.0) for k, c in enumerate(counts)]
    return FlowAssignment(paths, counts, bounds)


def load_profile(path: str | Path) -> CapacityProfile:
    return CapacityProfile.from_dict(json.loads(Path(path).read_text()))


def dumps_result(result: FlowSolution | Infeasible) -> str:
    d = result.to_dict() if isinstance(result, Infeasible) else {"infeasible": False, **result.to_dict()}
    return json.dumps(d, indent=1) + "\n"
