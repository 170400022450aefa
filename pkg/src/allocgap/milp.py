"""A small linear / indicator constraint IR with substitution checking and LP-format export."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping

BINARY, INTEGER, REAL = "binary", "integer", "real"
LE, EQ, GE = "<=", "=", ">="


class ConstraintError(ValueError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str = REAL
    lb: float = -math.inf
    ub: float = math.inf


@dataclass(frozen=True)
class Constraint:
    name: str
    family: str
    terms: tuple[tuple[str, float], ...]
    sense: str
    rhs: float

    def lhs(self, values: Mapping[str, float]) -> float:
        return sum(coef * values[var] for var, coef in self.terms)

    def residual(self, values: Mapping[str, float]) -> float:
        """Amount by which the constraint is violated (0 when satisfied)."""
        diff = self.lhs(values) - self.rhs
        if self.sense == LE:
            return max(diff, 0.0)
        if self.sense == GE:
            return max(-diff, 0.0)
        return abs(diff)


@dataclass(frozen=True)
class Violation:
    constraint: str
    family: str
    residual: float


@dataclass
class ConstraintSystem:
    big_m: float = 1e6
    epsilon: float = 1e-3
    mu: float = 1e-6
    variables: dict[str, Variable] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)

    def var(self, name: str, kind: str = REAL, lb: float | None = None, ub: float | None = None) -> str:
        if name in self.variables:
            raise ConstraintError(f"variable {name!r} declared twice")
        if kind == BINARY:
            lb, ub = 0.0, 1.0
        self.variables[name] = Variable(
            name, kind, -math.inf if lb is None else lb, math.inf if ub is None else ub
        )
        return name

    def add(self, family: str, terms: Mapping[str, float] | list[tuple[str, float]], sense: str, rhs: float,
            name: str | None = None) -> Constraint:
        if sense not in (LE, EQ, GE):
            raise ConstraintError(f"unknown sense {sense!r}")
        merged: dict[str, float] = {}
        items = terms.items() if isinstance(terms, Mapping) else terms
        for var, coef in items:
            if var not in self.variables:
                raise ConstraintError(f"constraint in family {family!r} references undeclared variable {var!r}")
            merged[var] = merged.get(var, 0.0) + float(coef)
        c = Constraint(name or f"{family}_{len(self.constraints)}", family,
                       tuple((v, k) for v, k in merged.items() if k != 0.0), sense, float(rhs))
        self.constraints.append(c)
        return c

    def family_counts(self) -> Counter:
        return Counter(c.family for c in self.constraints)

    def by_family(self, family: str) -> list[Constraint]:
        return [c for c in self.constraints if c.family == family]

    def check(self, values: Mapping[str, float], tol: float = 1e-9) -> list[Violation]:
        """Substitute ``values`` into every constraint and bound; return what is violated."""
        missing = [name for name in self.variables if name not in values]
        if missing:
            head = ", ".join(missing[:5])
            raise ConstraintError(f"{len(missing)} variables lack a substitution value (e.g. {head})")
        out = []
        for v in self.variables.values():
            x = values[v.name]
            if x < v.lb - tol or x > v.ub + tol:
                out.append(Violation(f"bound:{v.name}", "bounds", max(v.lb - x, x - v.ub)))
            elif v.kind in (BINARY, INTEGER) and abs(x - round(x)) > tol:
                out.append(Violation(f"integrality:{v.name}", "integrality", abs(x - round(x))))
        for c in self.constraints:
            r = c.residual(values)
            if r > tol:
                out.append(Violation(c.name, c.family, r))
        return out

    def to_lp(self, title: str = "feasibility") -> str:
        """CPLEX LP text with an empty objective."""

        def clean(name: str) -> str:
            return re.sub(r"[^A-Za-z0-9_.]", "_", name)

        def fmt(x: float) -> str:
            return repr(float(x))

        lines = [f"\\ {title}", f"\\ M = {fmt(self.big_m)}, eps = {fmt(self.epsilon)}, mu = {fmt(self.mu)}",
                 "Minimize", " obj:", "Subject To"]
        for c in self.constraints:
            parts = []
            for var, coef in c.terms:
                sign = "-" if coef < 0 else "+"
                parts.append(f"{sign} {fmt(abs(coef))} {clean(var)}")
            body = " ".join(parts) if parts else "0 " + clean(next(iter(self.variables)))
            if body.startswith("+ "):
                body = body[2:]
            lines.append(f" {clean(c.name)}: {body} {c.sense} {fmt(c.rhs)}")
        lines.append("Bounds")
        for v in self.variables.values():
            if v.kind == BINARY:
                continue
            lo = "-inf" if math.isinf(v.lb) else fmt(v.lb)
            hi = "+inf" if math.isinf(v.ub) else fmt(v.ub)
            lines.append(f" {lo} <= {clean(v.name)} <= {hi}")
        binaries = [clean(v.name) for v in self.variables.values() if v.kind == BINARY]
        generals = [clean(v.name) for v in self.variables.values() if v.kind == INTEGER]
        if binaries:
            lines.append("Binaries")
            lines.extend(f" {b}" for b in binaries)
        if generals:
            lines.append("Generals")
            lines.extend(f" {g}" for g in generals)
        lines.append("End")
        return "\n".join(lines) + "\n"
