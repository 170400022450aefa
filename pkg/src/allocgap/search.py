"""Search over label/prediction scenarios for the largest gap between the ML-driven allocator and ground truth.

DPBFR is deterministic given its inputs, so both inner problems are evaluated by simulation and the
outer maximization runs directly over per-VM (label, prediction) pairs.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .bounds import DEFAULT_Z, BoundError, CountBound, DistributionProfile, count_bounds, partition_bounds
from .dpbfr import Allocator, AllocatorConfig, run_metrics
from .workload import MetricsReport, Scenario, VmPredictions, VmRequest, sort_vms

MODELS = ("cpu", "mem", "life")
RISK, SERVERS = "risk_of_migration", "servers_used"

_BINARY = tuple((lab, pred) for lab in (0, 1) for pred in (0, 1))
_DECILES = tuple((lab, pred) for lab in range(1, 11) for pred in range(1, 11))


class SearchError(ValueError):
    pass


class InfeasibleError(SearchError):
    pass


@dataclass(frozen=True)
class Template:
    """The fixed skeleton of a search: VM sizes, arrivals, lifetimes and default labels."""

    vms: tuple[VmRequest, ...]
    horizon: int
    with_mem: bool = False

    def __post_init__(self):
        object.__setattr__(self, "vms", tuple(sort_vms(self.vms)))
        late = [vm.id for vm in self.vms if vm.arrival >= self.horizon]
        if late:
            raise SearchError(f"VMs {late} arrive at or after the horizon {self.horizon}")

    def __len__(self):
        return len(self.vms)

    def domain(self, i: int, model: str) -> tuple[tuple[int, int], ...]:
        """All (label, prediction) pairs VM ``i`` may take for ``model`` when that model is free."""
        if model == "cpu":
            return _BINARY
        if model == "mem":
            return _DECILES
        if model == "life":
            lab = self.vms[i].true_lifetime_label
            return ((lab, 0), (lab, 1))
        raise SearchError(f"unknown model {model!r}")

    def default_pair(self, i: int, model: str) -> tuple[int, int]:
        vm = self.vms[i]
        lab = {"cpu": vm.true_cpu_label, "mem": vm.true_mem_decile, "life": vm.true_lifetime_label}[model]
        return (lab, lab)


@dataclass(frozen=True)
class CountConstraint:
    """Number of in-scope VMs whose (label, prediction) pair for ``model`` lies in ``cells`` is in [lower, upper]."""

    name: str
    model: str
    cells: frozenset
    lower: int
    upper: int
    p: float | None = None
    members: tuple[int, ...] | None = None

    def in_scope(self, i: int) -> bool:
        return self.members is None or i in self._member_set

    @property
    def _member_set(self) -> frozenset:
        return frozenset(self.members or ())


@dataclass
class ConstraintSet:
    counts: list[CountConstraint] = field(default_factory=list)
    # (vm index, model) -> allowed (label, prediction) pairs
    pins: dict[tuple[int, str], frozenset] = field(default_factory=dict)

    def models(self) -> set[str]:
        return {c.model for c in self.counts} | {m for _, m in self.pins}

    def restricted_to(self, models: Iterable[str]) -> ConstraintSet:
        keep = set(models)
        return ConstraintSet([c for c in self.counts if c.model in keep],
                             {k: v for k, v in self.pins.items() if k[1] in keep})

    def count(self, c: CountConstraint, pairs: dict[str, list]) -> int:
        seq = pairs.get(c.model)
        if seq is None:
            return 0
        members = range(len(seq)) if c.members is None else c.members
        return sum(1 for i in members if seq[i] in c.cells)

    def violations(self, pairs: dict[str, list]) -> list[str]:
        out = []
        for c in self.counts:
            if c.model not in pairs:
                continue
            n = self.count(c, pairs)
            if not c.lower <= n <= c.upper:
                out.append(f"{c.name}: count {n} outside [{c.lower}, {c.upper}]")
        for (i, model), allowed in self.pins.items():
            if model in pairs and pairs[model][i] not in allowed:
                out.append(f"pin vm{i}/{model}: {pairs[model][i]} not in {sorted(allowed)}")
        return out

    def allowed(self, i: int, model: str, pair) -> bool:
        allowed = self.pins.get((i, model))
        return allowed is None or pair in allowed


@dataclass
class ScenarioVar:
    """A point of the search space: per free model, the (label, prediction) pair of every VM."""

    template: Template
    pairs: dict[str, list[tuple[int, int]]]
    arrivals: list[int] | None = None

    def copy(self) -> ScenarioVar:
        return ScenarioVar(self.template, {m: list(v) for m, v in self.pairs.items()},
                           None if self.arrivals is None else list(self.arrivals))

    def widened(self, models: Iterable[str]) -> ScenarioVar:
        """Same scenario with extra models made explicit at their ground-truth (label, label) pairs."""
        pairs = {m: list(self.pairs[m]) if m in self.pairs else
                 [self.template.default_pair(i, m) for i in range(len(self.template))] for m in models}
        return ScenarioVar(self.template, pairs, None if self.arrivals is None else list(self.arrivals))

    def pair(self, i: int, model: str) -> tuple[int, int]:
        seq = self.pairs.get(model)
        return seq[i] if seq is not None else self.template.default_pair(i, model)

    def vm(self, i: int) -> VmRequest:
        base = self.template.vms[i]
        changes = {}
        cpu_lab = self.pair(i, "cpu")[0]
        mem_lab = self.pair(i, "mem")[0]
        if cpu_lab != base.true_cpu_label:
            changes["true_cpu_label"] = cpu_lab
        if mem_lab != base.true_mem_decile:
            changes["true_mem_decile"] = mem_lab
        if self.arrivals is not None and self.arrivals[i] != base.arrival:
            changes["arrival"] = self.arrivals[i]
        return replace(base, **changes) if changes else base

    def prediction(self, i: int) -> VmPredictions:
        return VmPredictions(
            cpu=self.pair(i, "cpu")[1],
            life=self.pair(i, "life")[1],
            mem=self.pair(i, "mem")[1] if self.template.with_mem else None,
        )

    def order(self, indices: Sequence[int] | None = None) -> list[int]:
        idx = range(len(self.template)) if indices is None else indices
        if self.arrivals is None:
            return list(idx)
        return sorted(idx, key=lambda i: (self.arrivals[i], self.template.vms[i].id))

    def to_scenario(self) -> Scenario:
        order = self.order()
        return Scenario(tuple(self.vm(i) for i in order), tuple(self.prediction(i) for i in order),
                        self.template.horizon)

    def to_dict(self) -> dict:
        sc = self.to_scenario()
        return {
            "horizon": sc.horizon,
            "with_mem": self.template.with_mem,
            "vms": [
                {
                    "id": vm.id, "req_cpu": vm.req_cpu, "req_mem": vm.req_mem, "arrival": vm.arrival,
                    "true_cpu_label": vm.true_cpu_label, "true_mem_decile": vm.true_mem_decile,
                    "true_lifetime_epochs": vm.true_lifetime_epochs, "true_lifetime_label": vm.true_lifetime_label,
                    "pred_cpu": p.cpu, "pred_life": p.life, "pred_mem": p.mem,
                }
                for vm, p in zip(sc.vms, sc.predictions)
            ],
        }


def scenario_from_dict(d: dict) -> Scenario:
    from .workload import vm_from_dict

    vms, preds = [], []
    for rec in d["vms"]:
        vms.append(vm_from_dict({**rec, "features": None}))
        preds.append(VmPredictions(cpu=rec["pred_cpu"], life=rec["pred_life"], mem=rec.get("pred_mem")))
    return Scenario(tuple(vms), tuple(preds), d["horizon"])


def dumps_scenario(var: ScenarioVar) -> str:
    return json.dumps(var.to_dict(), indent=1, sort_keys=True) + "\n"


# -- gap evaluation ---------------------------------------------------------

def metric_value(report: MetricsReport, metric: str) -> float:
    if metric == RISK:
        return report.risk_of_migration
    if metric == SERVERS:
        return report.mean_servers_used
    raise SearchError(f"unknown metric {metric!r}")


class Evaluator:
    """Gap evaluation with a cache of baseline (ground-truth) runs keyed by labels."""

    def __init__(self, template: Template, cfg: AllocatorConfig, metric: str = RISK, cache_size: int = 4096):
        self.template = template
        self.cfg = cfg
        self.metric = metric
        self.cache_size = cache_size
        self._baseline: OrderedDict = OrderedDict()
        self._full: OrderedDict = OrderedDict()  # whole-scenario gaps; annealing revisits states often
        self.evaluations = 0

    def _run(self, var: ScenarioVar, indices: Sequence[int], truth: bool, start: Allocator | None,
             first_index: int):
        vms = [var.vm(i) for i in indices]
        if truth:
            preds = [VmPredictions(vm.true_cpu_label, vm.true_lifetime_label,
                                   vm.true_mem_decile if self.template.with_mem else None) for vm in vms]
        else:
            preds = [var.prediction(i) for i in indices]
        return run_metrics(vms, preds, self.cfg, self.template.horizon, start, first_index)

    def baseline(self, var: ScenarioVar, indices: Sequence[int], start: Allocator | None = None,
                 first_index: int = 0, key_extra=None):
        key = (key_extra, tuple(indices), tuple((var.vm(i).true_cpu_label, var.vm(i).true_mem_decile,
                                                 var.vm(i).arrival) for i in indices))
        hit = self._baseline.get(key)
        if hit is not None:
            self._baseline.move_to_end(key)
            return hit
        result = self._run(var, indices, True, start, first_index)
        self._baseline[key] = result
        if len(self._baseline) > self.cache_size:
            self._baseline.popitem(last=False)
        return result

    def gap(self, var: ScenarioVar, indices: Sequence[int] | None = None, starts=None, first_index: int = 0,
            key_extra=None) -> float:
        """System metric minus baseline metric for the VMs in ``indices`` (default: all, in arrival order)."""
        self.evaluations += 1
        memo_key = None
        if indices is None and starts is None and key_extra is None:
            memo_key = (tuple(tuple(var.pairs[m]) for m in sorted(var.pairs)), tuple(sorted(var.pairs)),
                        None if var.arrivals is None else tuple(var.arrivals))
            hit = self._full.get(memo_key)
            if hit is not None:
                self._full.move_to_end(memo_key)
                return hit
        indices = var.order(indices)
        base_start, sys_start = starts if starts is not None else (None, None)
        base_report, _ = self.baseline(var, indices, base_start, first_index, key_extra)
        sys_report, _ = self._run(var, indices, False, sys_start, first_index)
        value = metric_value(sys_report, self.metric) - metric_value(base_report, self.metric)
        if memo_key is not None:
            self._full[memo_key] = value
            if len(self._full) > self.cache_size:
                self._full.popitem(last=False)
        return value

    def advance(self, var: ScenarioVar, indices: Sequence[int], starts, first_index: int):
        """Allocators after placing ``indices`` on top of ``starts`` (carry-forward state)."""
        indices = var.order(indices)
        base_start, sys_start = starts
        _, base_alloc = self._run(var, indices, True, base_start, first_index)
        _, sys_alloc = self._run(var, indices, False, sys_start, first_index)
        return base_alloc, sys_alloc


def gap(var: ScenarioVar, cfg: AllocatorConfig, metric: str = RISK, constraints: ConstraintSet | None = None) -> float:
    if constraints is not None:
        bad = constraints.violations(var.pairs)
        if bad:
            raise InfeasibleError("scenario violates its constraints: " + "; ".join(bad))
    if len(var.template) == 0:
        return 0.0
    return Evaluator(var.template, cfg, metric).gap(var)


def scenario_gap(scenario: Scenario, cfg: AllocatorConfig, metric: str = RISK) -> float:
    """Gap of a concrete scenario: DPBFR on its predictions minus DPBFR on its labels."""
    from .dpbfr import simulate

    _, system = simulate(scenario, cfg)
    _, base = simulate(scenario.ground_truth(), cfg)
    return metric_value(system, metric) - metric_value(base, metric)


# -- constraint construction --------------------------------------------------

def _offset_classes():
    exact = frozenset(c for c in _DECILES if c[0] == c[1])
    under = frozenset(c for c in _DECILES if c[1] < c[0])
    over = frozenset(c for c in _DECILES if c[1] > c[0])
    return {"exact": exact, "under": under, "over": over}


def constraints_from_profile(profile: DistributionProfile, N: int, models: Iterable[str],
                             z: float = DEFAULT_Z) -> ConstraintSet:
    """Count bounds per joint (label, prediction) cell for the CPU model, per offset class for memory,
    and on accuracy for the lifetime model (whose labels are fixed by the skeleton)."""
    cs = ConstraintSet()
    for model in models:
        cells = profile.cells.get(model)
        if not cells:
            continue
        if model == "cpu":
            for cell in _BINARY:
                p = cells.get(cell, 0.0)
                b = count_bounds(p, N, z, f"cpu{cell}")
                cs.counts.append(CountConstraint(f"cpu cell {cell}", "cpu", frozenset([cell]), b.lower, b.upper, p))
        elif model == "mem":
            for name, group in _offset_classes().items():
                p = sum(v for c, v in cells.items() if c in group)
                b = count_bounds(min(max(p, 0.0), 1.0), N, z, f"mem {name}")
                cs.counts.append(CountConstraint(f"mem {name}", "mem", group, b.lower, b.upper, p))
        elif model == "life":
            p = sum(v for (lab, pred), v in cells.items() if lab == pred)
            b = count_bounds(p, N, z, "life accuracy")
            correct = frozenset([(0, 0), (1, 1)])
            cs.counts.append(CountConstraint("life accuracy", "life", correct, b.lower, b.upper, p))
    return cs


def accuracy_constraint(model: str, lower: int, upper: int, p: float | None = None) -> CountConstraint:
    correct = frozenset([(0, 0), (1, 1)]) if model != "mem" else _offset_classes()["exact"]
    return CountConstraint(f"{model} accuracy", model, correct, lower, upper, p)


# -- initialization and repair -------------------------------------------------

class _Counts:
    """Incremental bookkeeping of constraint counts for fast feasibility checks of single moves."""

    def __init__(self, cs: ConstraintSet, pairs: dict[str, list], scope: Sequence[int]):
        self.cs = cs
        self.by_model: dict[str, list[tuple[int, CountConstraint, frozenset | None]]] = {}
        self.values = []
        for k, c in enumerate(cs.counts):
            members = None if c.members is None else frozenset(c.members)
            self.by_model.setdefault(c.model, []).append((k, c, members))
            self.values.append(cs.count(c, pairs) if c.model in pairs else 0)

    def violation(self) -> int:
        return sum(max(0, c.lower - v) + max(0, v - c.upper) for c, v in zip(self.cs.counts, self.values))

    def deltas(self, i: int, model: str, old, new) -> list[tuple[int, int]]:
        out = []
        for k, c, members in self.by_model.get(model, ()):
            if members is not None and i not in members:
                continue
            d = (new in c.cells) - (old in c.cells)
            if d:
                out.append((k, d))
        return out

    def violation_after(self, changes: list[tuple[int, int]]) -> int:
        if not changes:
            return self.violation()
        vals = list(self.values)
        for k, d in changes:
            vals[k] += d
        return sum(max(0, c.lower - v) + max(0, v - c.upper) for c, v in zip(self.cs.counts, vals))

    def feasible_after(self, changes: list[tuple[int, int]]) -> bool:
        for k, d in changes:
            c = self.cs.counts[k]
            v = self.values[k] + d
            if v < c.lower or v > c.upper:
                return False
        return True

    def apply(self, changes: list[tuple[int, int]]):
        for k, d in changes:
            self.values[k] += d


def _sample_pair(template: Template, i: int, model: str, profile: DistributionProfile | None,
                 rng: np.random.Generator, cs: ConstraintSet):
    domain = [p for p in template.domain(i, model) if cs.allowed(i, model, p)]
    if not domain:
        raise InfeasibleError(f"vm{i}/{model}: pins leave no admissible (label, prediction) pair")
    weights = None
    if profile is not None and model in profile.cells:
        w = np.array([profile.cells[model].get(p, 0.0) for p in domain])
        if w.sum() > 0:
            weights = w / w.sum()
    return domain[int(rng.choice(len(domain), p=weights))]


def repair(var: ScenarioVar, cs: ConstraintSet, scope: Sequence[int], rng: np.random.Generator,
           max_rounds: int = 10_000) -> ScenarioVar:
    """Greedy reassignment of single pairs toward the nearest bound until every constraint holds."""
    counts = _Counts(cs, var.pairs, scope)
    models = [m for m in var.pairs]
    rounds = 0
    while counts.violation() > 0:
        if rounds >= max_rounds:
            raise InfeasibleError("no feasible scenario found after bounded repair: " + "; ".join(cs.violations(var.pairs)))
        rounds += 1
        best = None
        current = counts.violation()
        order = list(scope)
        rng.shuffle(order)
        for i in order:
            for model in models:
                old = var.pairs[model][i]
                for new in var.template.domain(i, model):
                    if new == old or not cs.allowed(i, model, new):
                        continue
                    ch = counts.deltas(i, model, old, new)
                    if not ch:
                        continue
                    v = counts.violation_after(ch)
                    if v < current and (best is None or v < best[0]):
                        best = (v, i, model, new, ch)
            if best is not None and best[0] == 0:
                break
        if best is None:
            raise InfeasibleError("repair is stuck: " + "; ".join(cs.violations(var.pairs)))
        _, i, model, new, ch = best
        var.pairs[model][i] = new
        counts.apply(ch)
    return var


def initial_scenario(template: Template, free_models: Iterable[str], cs: ConstraintSet,
                     rng: np.random.Generator, profile: DistributionProfile | None = None) -> ScenarioVar:
    free = [m for m in MODELS if m in set(free_models)]
    if "mem" in free and not template.with_mem:
        raise SearchError("memory model is not in play for this template")
    pairs = {m: [_sample_pair(template, i, m, profile, rng, cs) for i in range(len(template))] for m in free}
    var = ScenarioVar(template, pairs)
    return repair(var, cs, range(len(template)), rng)


# -- exhaustive oracle ------------------------------------------------------------

@dataclass
class SearchResult:
    best: ScenarioVar
    gap: float
    trace: list[tuple[int, float, float]] = field(default_factory=list)  # (iteration, seconds, incumbent gap)
    evaluations: int = 0
    stage_gaps: list[float] = field(default_factory=list)


def exhaustive_search(template: Template, constraints: ConstraintSet, cfg: AllocatorConfig,
                      free_models: Iterable[str] = ("cpu",), metric: str = RISK, cap: int = 10**6) -> SearchResult:
    """Enumerate every admissible (label, prediction) assignment; returns the first maximizer."""
    free = [m for m in MODELS if m in set(free_models)]
    slots = [(i, m) for m in free for i in range(len(template))]
    domains = [[p for p in template.domain(i, m) if constraints.allowed(i, m, p)] for i, m in slots]
    size = math.prod(len(d) for d in domains) if domains else 1
    if size > cap:
        raise SearchError(f"search space has {size} assignments, above the cap of {cap}")
    ev = Evaluator(template, cfg, metric)
    best, best_gap, evaluated = None, -math.inf, 0
    for combo in itertools.product(*domains):
        pairs = {m: [None] * len(template) for m in free}
        for (i, m), p in zip(slots, combo):
            pairs[m][i] = p
        if constraints.violations(pairs):
            continue
        var = ScenarioVar(template, pairs)
        g = ev.gap(var) if len(template) else 0.0
        evaluated += 1
        if g > best_gap:
            best, best_gap = var, g
    if best is None:
        raise InfeasibleError("no assignment satisfies the constraints")
    return SearchResult(best, best_gap, evaluations=evaluated)


# -- simulated annealing ----------------------------------------------------------

@dataclass(frozen=True)
class SearchBudget:
    iterations: int | None = 10_000
    seconds: float | None = None
    seed: int = 0
    cooling: float = 0.98
    cooling_every: int = 100
    t0_samples: int = 100
    vary_arrivals: bool = False

    def exhausted(self, it: int, elapsed: float) -> bool:
        if self.iterations is not None and it >= self.iterations:
            return True
        return self.seconds is not None and elapsed >= self.seconds


class _Annealer:
    def __init__(self, var: ScenarioVar, cs: ConstraintSet, scope: Sequence[int], evaluate, rng, budget: SearchBudget):
        self.var = var
        self.cs = cs
        self.scope = list(scope)
        self.evaluate = evaluate
        self.rng = rng
        self.budget = budget
        self.models = list(var.pairs)
        self.counts = _Counts(cs, var.pairs, scope)

    def propose(self):
        """Returns an undo closure after applying a feasible move in place, or None."""
        rng, var = self.rng, self.var
        if len(self.scope) == 0 or (not self.models and not self.budget.vary_arrivals):
            return None
        kinds = ["swap", "flip"] if self.models else []
        if self.budget.vary_arrivals and len(self.scope) > 1:
            kinds.append("arrivals")
        kind = kinds[int(rng.integers(len(kinds)))]
        if kind == "arrivals":
            i, j = rng.choice(self.scope, size=2, replace=False)
            if var.arrivals is None:
                var.arrivals = [vm.arrival for vm in var.template.vms]
            a = var.arrivals
            if a[i] == a[j]:
                return None
            a[i], a[j] = a[j], a[i]
            return lambda: a.__setitem__(slice(None), _swapped(a, i, j))
        model = self.models[int(rng.integers(len(self.models)))]
        seq = var.pairs[model]
        if kind == "swap" and len(self.scope) > 1:
            i, j = (int(v) for v in rng.choice(self.scope, size=2, replace=False))
            pi, pj = seq[i], seq[j]
            if pi == pj or not (self.cs.allowed(i, model, pj) and self.cs.allowed(j, model, pi)):
                return None
            ch = self.counts.deltas(i, model, pi, pj) + self.counts.deltas(j, model, pj, pi)
            if not self.counts.feasible_after(_merge(ch)):
                return None
            seq[i], seq[j] = pj, pi
            self.counts.apply(ch)

            def undo():
                seq[i], seq[j] = pi, pj
                self.counts.apply([(k, -d) for k, d in ch])
            return undo
        i = int(self.scope[int(rng.integers(len(self.scope)))])
        domain = var.template.domain(i, model)
        new = domain[int(rng.integers(len(domain)))]
        old = seq[i]
        if new == old or not self.cs.allowed(i, model, new):
            return None
        ch = self.counts.deltas(i, model, old, new)
        if not self.counts.feasible_after(ch):
            return None
        seq[i] = new
        self.counts.apply(ch)

        def undo():
            seq[i] = old
            self.counts.apply([(k, -d) for k, d in ch])
        return undo

    def initial_temperature(self, current: float) -> float:
        samples = []
        tries = 0
        n = min(self.budget.t0_samples, self.budget.iterations or self.budget.t0_samples)
        while len(samples) < n and tries < 20 * max(n, 1):
            tries += 1
            undo = self.propose()
            if undo is None:
                continue
            samples.append(self.evaluate(self.var))
            undo()
        std = float(np.std(samples + [current])) if samples else 0.0
        return std if std > 0 else 1.0 / max(self.var.template.horizon, 1)

    def run(self, current: float, on_improve) -> tuple[ScenarioVar, float]:
        best, best_gap = self.var.copy(), current
        start = time.perf_counter()
        temp = self.initial_temperature(current) if not self.budget.exhausted(0, 0.0) else 0.0
        it = 0
        while not self.budget.exhausted(it, time.perf_counter() - start):
            it += 1
            if it % self.budget.cooling_every == 0:
                temp *= self.budget.cooling
            undo = self.propose()
            if undo is None:
                continue
            g = self.evaluate(self.var)
            delta = g - current
            if delta >= 0 or (temp > 0 and self.rng.random() < math.exp(delta / temp)):
                current = g
                if g > best_gap:
                    best, best_gap = self.var.copy(), g
                    on_improve(it, g)
            else:
                undo()
        return best, best_gap


def _swapped(a, i, j):
    b = list(a)
    b[i], b[j] = b[j], b[i]
    return b


def _merge(changes):
    acc: dict[int, int] = {}
    for k, d in changes:
        acc[k] = acc.get(k, 0) + d
    return list(acc.items())


def anneal_search(template: Template, constraints: ConstraintSet, cfg: AllocatorConfig, budget: SearchBudget,
                  free_models: Iterable[str] = ("cpu",), metric: str = RISK,
                  profile: DistributionProfile | None = None, initial: ScenarioVar | None = None,
                  seeds: Sequence[ScenarioVar] = ()) -> SearchResult:
    """Simulated annealing whose moves keep every constraint satisfied.

    ``seeds`` are injected incumbents (warm start); the best feasible one becomes the starting point.
    """
    rng = np.random.default_rng(budget.seed)
    ev = Evaluator(template, cfg, metric)
    var = initial.copy() if initial is not None else initial_scenario(template, free_models, constraints, rng, profile)
    var = repair(var, constraints, range(len(template)), rng)
    evaluate = (lambda v: ev.gap(v)) if len(template) else (lambda v: 0.0)
    current = evaluate(var)
    for s in seeds:
        if not constraints.violations(s.pairs) and set(s.pairs) == set(var.pairs):
            g = evaluate(s)
            if g > current:
                var, current = s.copy(), g
    t0 = time.perf_counter()
    trace = [(0, 0.0, current)]
    annealer = _Annealer(var, constraints, range(len(template)), evaluate, rng, budget)
    best, best_gap = annealer.run(current, lambda it, g: trace.append((it, time.perf_counter() - t0, g)))
    return SearchResult(best, best_gap, trace, ev.evaluations)


def random_search(template: Template, constraints: ConstraintSet, cfg: AllocatorConfig, budget: SearchBudget,
                  free_models: Iterable[str] = ("cpu",), metric: str = RISK,
                  profile: DistributionProfile | None = None) -> SearchResult:
    """Best of ``budget.iterations`` independently sampled feasible scenarios (simulation baseline)."""
    rng = np.random.default_rng(budget.seed)
    ev = Evaluator(template, cfg, metric)
    best, best_gap, trace = None, -math.inf, []
    t0 = time.perf_counter()
    for it in range(max(budget.iterations or 1, 1)):
        var = initial_scenario(template, free_models, constraints, rng, profile)
        g = ev.gap(var) if len(template) else 0.0
        if g > best_gap:
            best, best_gap = var, g
            trace.append((it, time.perf_counter() - t0, g))
    return SearchResult(best, best_gap, trace, ev.evaluations)


# -- time partitioning --------------------------------------------------------------

@dataclass
class PartitionStage:
    k: int
    partitions: list[list[int]]
    constraints: list[ConstraintSet]


@dataclass
class PartitionPlan:
    schedule: list[int]
    stages: list[PartitionStage]


def split_by_arrival(n: int, k: int) -> list[list[int]]:
    """Contiguous, near-equal chunks of the arrival-ordered VM indices."""
    if not 1 <= k <= max(n, 1):
        raise SearchError(f"cannot split {n} VMs into {k} partitions")
    sizes = [n // k + (1 if q < n % k else 0) for q in range(k)]
    out, start = [], 0
    for s in sizes:
        out.append(list(range(start, start + s)))
        start += s
    return out


def make_plan(template: Template, constraints: ConstraintSet, schedule: Sequence[int], rng_seed: int = 0,
              trials: int = 10_000) -> PartitionPlan:
    """Per-stage partitions with per-partition count bounds derived from the global ones."""
    n = len(template)
    stages = []
    for k in schedule:
        parts = split_by_arrival(n, k)
        per_part = [ConstraintSet(pins={key: v for key, v in constraints.pins.items() if key[0] in set(p)})
                    for p in parts]
        for c in constraints.counts:
            if k == 1:
                per_part[0].counts.append(c)
                continue
            if c.p is None:
                raise SearchError(f"constraint {c.name} lacks a target fraction; cannot derive partition bounds")
            global_bound = CountBound(c.name, n, c.lower, c.upper, c.p, 0.0)
            try:
                pbs = partition_bounds(global_bound, [len(p) for p in parts], rng_seed, trials)
            except BoundError as exc:
                raise InfeasibleError(str(exc)) from None
            for q, (part, pb) in enumerate(zip(parts, pbs)):
                per_part[q].counts.append(replace(c, name=f"{c.name} part{q}", lower=pb.lower, upper=pb.upper,
                                                  members=tuple(part)))
        stages.append(PartitionStage(k, parts, per_part))
    return PartitionPlan(list(schedule), stages)


def partitioned_search(template: Template, constraints: ConstraintSet, plan: PartitionPlan, cfg: AllocatorConfig,
                       budget: SearchBudget, free_models: Iterable[str] = ("cpu",), metric: str = RISK,
                       profile: DistributionProfile | None = None, seeds: Sequence[ScenarioVar] = ()) -> SearchResult:
    """Solve partitions in arrival order with carried-forward cluster state, then re-solve with coarser
    partitions seeded from the concatenated incumbent. The global incumbent never regresses."""
    if plan.schedule == [1]:
        return anneal_search(template, constraints, cfg, budget, free_models, metric, profile, seeds=seeds)
    if budget.vary_arrivals:
        raise SearchError("arrival moves are not supported with time partitioning")
    rng = np.random.default_rng(budget.seed)
    ev = Evaluator(template, cfg, metric)
    n = len(template)
    current = initial_scenario(template, free_models, constraints, rng, profile)
    best, best_gap = current.copy(), ev.gap(current) if n else 0.0
    for sd in seeds:
        if not constraints.violations(sd.pairs) and set(sd.pairs) == set(current.pairs):
            g = ev.gap(sd) if n else 0.0
            if g > best_gap:
                best, best_gap = sd.copy(), g
    t0 = time.perf_counter()
    trace = [(0, 0.0, best_gap)]
    stage_gaps = []
    total = budget.iterations or 0
    per_stage = [total // len(plan.stages) + (1 if s < total % len(plan.stages) else 0) for s in range(len(plan.stages))]
    done = 0

    for stage, stage_iters in zip(plan.stages, per_stage):
        var = best.copy()
        if stage.k == 1:
            sub = SearchBudget(stage_iters, budget.seconds, int(rng.integers(2**31)), budget.cooling,
                               budget.cooling_every, budget.t0_samples)
            res = anneal_search(template, constraints, cfg, sub, free_models, metric, profile, initial=var)
            if res.gap > best_gap:
                best, best_gap = res.best.copy(), res.gap
                trace.append((done + res.trace[-1][0], time.perf_counter() - t0, best_gap))
            done += stage_iters
            stage_gaps.append(best_gap)
            continue
        starts = (None, None)
        part_iters = [stage_iters * len(p) // n for p in stage.partitions]
        part_iters[-1] += stage_iters - sum(part_iters)
        for q, (part, cs_q, iters) in enumerate(zip(stage.partitions, stage.constraints, part_iters)):
            first = part[0]
            var = repair(var, cs_q, part, rng)

            def evaluate(v, part=part, starts=starts, first=first, q=q):
                return ev.gap(v, part, starts, first, key_extra=(stage.k, q, _prefix_key(v, first)))

            sub = SearchBudget(iters, None, int(rng.integers(2**31)), budget.cooling, budget.cooling_every,
                               budget.t0_samples)
            annealer = _Annealer(var, cs_q, part, evaluate, rng, sub)
            var_best, _ = annealer.run(evaluate(var), lambda it, g: None)
            var = var_best
            starts = ev.advance(var, part, starts, first)
        done += stage_iters
        try:
            var = repair(var, constraints, range(n), rng)
        except InfeasibleError:
            stage_gaps.append(best_gap)
            continue
        g = ev.gap(var)
        if g > best_gap:
            best, best_gap = var.copy(), g
            trace.append((done, time.perf_counter() - t0, best_gap))
        stage_gaps.append(best_gap)
    return SearchResult(best, best_gap, trace, ev.evaluations, stage_gaps)


def _prefix_key(var: ScenarioVar, first: int):
    return tuple(tuple(var.pairs[m][:first]) for m in sorted(var.pairs))


# -- ablation ----------------------------------------------------------------------------

def ablation(template: Template, which_models: Iterable[str], constraints: ConstraintSet, cfg: AllocatorConfig,
             budget: SearchBudget | None = None, metric: str = RISK, profile: DistributionProfile | None = None,
             exhaustive: bool = False, plan: PartitionPlan | None = None,
             seeds: Sequence[ScenarioVar] = ()) -> SearchResult:
    """Search with only ``which_models`` free; every other model's predictions are pinned to ground truth.

    ``seeds`` (typically incumbents of smaller subsets) are widened to this subset and injected.
    """
    chosen = [m for m in MODELS if m in set(which_models)]
    if not chosen:
        empty = ScenarioVar(template, {})
        return SearchResult(empty, gap(empty, cfg, metric))
    cs = constraints.restricted_to(chosen)
    if exhaustive:
        return exhaustive_search(template, cs, cfg, chosen, metric)
    budget = budget or SearchBudget()
    widened = [sd.widened(chosen) for sd in seeds if set(sd.pairs) <= set(chosen)]
    if plan is not None:
        return partitioned_search(template, cs, plan, cfg, budget, chosen, metric, profile, widened)
    return anneal_search(template, cs, cfg, budget, chosen, metric, profile, seeds=widened)
