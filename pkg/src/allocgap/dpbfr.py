"""Dynamic preferred best-fit placement (DPBFR) with oversubscription driven by model predictions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .workload import (
    CAPACITY_TOL,
    ClusterState,
    MetricsReport,
    Scenario,
    Server,
    VmPredictions,
    VmRequest,
    metrics_for,
)

ROUND_ROBIN, SEEDED_RANDOM = "round_robin", "seeded_random"
FIXED, UNBOUNDED = "fixed", "unbounded"
MEAN, MAX = "mean", "max"

# scores are rounded so bucket membership does not hinge on float noise at boundaries
SCORE_DECIMALS = 10


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class AllocatorConfig:
    oversub_fraction: float = 0.65
    short_buckets: int = 3
    long_buckets: int = 5
    selection_mode: str = ROUND_ROBIN
    pool_mode: str = UNBOUNDED
    num_servers: int = 4
    server_capacity: tuple[float, float] = (32.0, 128.0)
    lifetime_threshold_epochs: int = 6
    score_aggregation: str = MEAN
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.oversub_fraction <= 1:
            raise AllocationError("oversub_fraction must lie in (0, 1]")
        if self.short_buckets < 1 or self.long_buckets < 1:
            raise AllocationError("bucket counts must be >= 1")
        if self.selection_mode not in (ROUND_ROBIN, SEEDED_RANDOM):
            raise AllocationError(f"unknown selection mode {self.selection_mode!r}")
        if self.pool_mode not in (FIXED, UNBOUNDED):
            raise AllocationError(f"unknown pool mode {self.pool_mode!r}")
        if self.pool_mode == FIXED and self.num_servers < 1:
            raise AllocationError("a fixed pool needs at least one server")
        if self.score_aggregation not in (MEAN, MAX):
            raise AllocationError(f"unknown score aggregation {self.score_aggregation!r}")
        if any(c <= 0 for c in self.server_capacity):
            raise AllocationError("server capacities must be positive")
        object.__setattr__(self, "server_capacity", tuple(float(c) for c in self.server_capacity))

    def bucket_count(self, lifetime_pred: int) -> int:
        return self.long_buckets if lifetime_pred else self.short_buckets

    def bucket_boundaries(self, lifetime_pred: int) -> list[float]:
        """Lower edges of buckets 1..n-1 of the equal-width partition of [0, 1]."""
        n = self.bucket_count(lifetime_pred)
        return [k / n for k in range(1, n)]

    def initial_servers(self) -> list[Server]:
        if self.pool_mode == FIXED:
            return [Server(j, self.server_capacity) for j in range(self.num_servers)]
        return []

    def to_dict(self) -> dict:
        return {
            "oversub_fraction": self.oversub_fraction,
            "short_buckets": self.short_buckets,
            "long_buckets": self.long_buckets,
            "selection_mode": self.selection_mode,
            "pool_mode": self.pool_mode,
            "num_servers": self.num_servers,
            "server_capacity": list(self.server_capacity),
            "lifetime_threshold_epochs": self.lifetime_threshold_epochs,
            "score_aggregation": self.score_aggregation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> AllocatorConfig:
        d = dict(d)
        if "server_capacity" in d:
            d["server_capacity"] = tuple(d["server_capacity"])
        return cls(**d)


def reserved_sizes(vm: VmRequest, preds: VmPredictions, cfg: AllocatorConfig) -> tuple[float, float]:
    cpu = vm.req_cpu * (cfg.oversub_fraction if preds.cpu == 0 else 1.0)
    if preds.mem is None:
        mem = float(vm.req_mem)
    else:
        if not 1 <= preds.mem <= 10:
            raise AllocationError(f"VM {vm.id}: predicted memory decile {preds.mem} outside 1..10")
        mem = vm.req_mem * preds.mem / 10.0
    return (float(cpu), mem)


def actual_sizes(vm: VmRequest, cfg: AllocatorConfig) -> tuple[float, float]:
    # label-0 usage follows the oversubscription fraction so ground-truth predictions reserve exactly what is used
    return vm.actual_usage(cfg.oversub_fraction)


def best_fit_score(residual: Sequence[float], reserved: Sequence[float], capacity: Sequence[float],
                   cfg: AllocatorConfig) -> float:
    """Normalized leftover capacity after a hypothetical placement; lower is a tighter fit."""
    after = np.asarray(residual, float) - np.asarray(reserved, float)
    if np.any(after < -CAPACITY_TOL):
        raise AllocationError("VM does not fit; check fits() before scoring")
    per_dim = after / np.asarray(capacity, float)
    agg = per_dim.mean() if cfg.score_aggregation == MEAN else per_dim.max()
    return round(float(agg), SCORE_DECIMALS)


def fits(residual: Sequence[float], reserved: Sequence[float]) -> bool:
    return bool(np.all(np.asarray(residual, float) - np.asarray(reserved, float) >= -CAPACITY_TOL))


def bucket(score: float, lifetime_pred: int, cfg: AllocatorConfig) -> int:
    """Equal-width bucket index; a score of exactly 1.0 lands in the last bucket."""
    return sum(1 for edge in cfg.bucket_boundaries(lifetime_pred) if score >= edge)


def selection_order(index: int, n_servers: int, cfg: AllocatorConfig) -> list[int]:
    """Order in which candidate servers are tried for the ``index``-th VM of the sequence."""
    if n_servers == 0:
        return []
    if cfg.selection_mode == ROUND_ROBIN:
        start = index % n_servers
        return [(start + k) % n_servers for k in range(n_servers)]
    rng = np.random.default_rng([cfg.seed, index])
    return [int(j) for j in rng.permutation(n_servers)]


@dataclass(frozen=True)
class VmDecision:
    vm_id: str
    index: int
    server: int | None
    candidates: tuple[int, ...]
    scores: tuple[float, ...]
    buckets: tuple[int, ...]
    fits: tuple[bool, ...]
    order: tuple[int, ...]
    min_bucket: int
    reserved: tuple[float, float]
    opened_server: bool = False


@dataclass
class PlacementTrace:
    decisions: list[VmDecision] = field(default_factory=list)
    state: ClusterState | None = None

    @property
    def rejected(self) -> list[str]:
        return [d.vm_id for d in self.decisions if d.server is None]

    def chosen(self) -> dict[str, int | None]:
        return {d.vm_id: d.server for d in self.decisions}

    def to_dict(self) -> dict:
        return {
            "decisions": [
                {
                    "vm_id": d.vm_id, "index": d.index, "server": d.server,
                    "candidates": list(d.candidates), "scores": list(d.scores),
                    "buckets": list(d.buckets), "fits": list(d.fits), "order": list(d.order),
                    "min_bucket": d.min_bucket, "reserved": list(d.reserved),
                }
                for d in self.decisions
            ],
            "assignments": {k: list(v) for k, v in (self.state.assignments if self.state else {}).items()},
        }


class Allocator:
    """Mutable cluster occupancy that DPBFR places VMs into, one at a time."""

    def __init__(self, cfg: AllocatorConfig, horizon: int, servers: Sequence[Server] | None = None):
        self.cfg = cfg
        self.horizon = horizon
        servers = list(cfg.initial_servers() if servers is None else servers)
        self.n_open = len(servers)
        size = max(self.n_open, 4)
        self.capacity = np.zeros((size, 2))
        if servers:
            self.capacity[: self.n_open] = [s.capacity for s in servers]
        self.reserved = np.zeros((size, horizon, 2))
        self.actual = np.zeros((size, horizon, 2))
        self.vm_count = np.zeros((size, horizon), dtype=int)
        self.assignments: dict[str, tuple[int, int, int]] = {}
        self.rejected = 0

    @classmethod
    def from_state(cls, state: ClusterState, cfg: AllocatorConfig) -> Allocator:
        alloc = cls(cfg, state.horizon, state.servers)
        n = len(state.servers)
        alloc.reserved[:n] = state.reserved
        alloc.actual[:n] = state.actual
        alloc.vm_count[:n] = state.vm_count
        alloc.assignments = dict(state.assignments)
        return alloc

    def copy(self) -> Allocator:
        other = Allocator.__new__(Allocator)
        other.cfg, other.horizon, other.n_open = self.cfg, self.horizon, self.n_open
        other.capacity = self.capacity.copy()
        other.reserved = self.reserved.copy()
        other.actual = self.actual.copy()
        other.vm_count = self.vm_count.copy()
        other.assignments = dict(self.assignments)
        other.rejected = self.rejected
        return other

    def _grow(self):
        extra = self.capacity.shape[0]
        self.capacity = np.concatenate([self.capacity, np.zeros((extra, 2))])
        self.reserved = np.concatenate([self.reserved, np.zeros((extra, self.horizon, 2))])
        self.actual = np.concatenate([self.actual, np.zeros((extra, self.horizon, 2))])
        self.vm_count = np.concatenate([self.vm_count, np.zeros((extra, self.horizon), dtype=int)])

    def _open_server(self) -> int:
        if self.n_open == self.capacity.shape[0]:
            self._grow()
        j = self.n_open
        self.capacity[j] = self.cfg.server_capacity
        self.n_open += 1
        return j

    def _evaluate(self, epoch: int, need: np.ndarray, life_pred: int, n: int):
        cap = self.capacity[:n]
        after = cap - self.reserved[:n, epoch, :] - need
        ok = np.all(after >= -CAPACITY_TOL, axis=1)
        per_dim = after / cap
        agg = per_dim.mean(axis=1) if self.cfg.score_aggregation == MEAN else per_dim.max(axis=1)
        scores = np.round(agg, SCORE_DECIMALS)
        edges = np.asarray(self.cfg.bucket_boundaries(life_pred))
        buckets = (scores[:, None] >= edges[None, :]).sum(axis=1) if len(edges) else np.zeros(n, dtype=int)
        return ok, scores, buckets

    def place(self, vm: VmRequest, preds: VmPredictions, index: int, record: bool = True) -> VmDecision | int | None:
        if vm.arrival >= self.horizon:
            raise AllocationError(f"VM {vm.id} arrives at epoch {vm.arrival}, beyond horizon {self.horizon}")
        if vm.id in self.assignments:
            raise AllocationError(f"VM {vm.id} is already placed")
        need = np.asarray(reserved_sizes(vm, preds, self.cfg))
        n = self.n_open
        ok, scores, buckets = self._evaluate(vm.arrival, need, preds.life, n)
        opened = False
        if not ok.any() and self.cfg.pool_mode == UNBOUNDED and np.all(need <= np.asarray(self.cfg.server_capacity) + CAPACITY_TOL):
            self._open_server()
            opened = True
            n = self.n_open
            ok, scores, buckets = self._evaluate(vm.arrival, need, preds.life, n)
        order = selection_order(index, n, self.cfg)
        chosen = None
        z = 0
        cands: list[int] = []
        if ok.any():
            z = int(buckets[ok].min())
            cand_mask = ok & (buckets == z)
            cands = [int(j) for j in np.flatnonzero(cand_mask)]
            chosen = next(j for j in order if cand_mask[j])
            start, end = vm.arrival, min(vm.departure, self.horizon)
            self.reserved[chosen, start:end] += need
            self.actual[chosen, start:end] += actual_sizes(vm, self.cfg)
            self.vm_count[chosen, start:end] += 1
            self.assignments[vm.id] = (chosen, vm.arrival, vm.departure)
        else:
            self.rejected += 1
        if not record:
            return chosen
        return VmDecision(
            vm_id=vm.id, index=index, server=chosen, candidates=tuple(cands),
            scores=tuple(float(s) for s in scores), buckets=tuple(int(b) for b in buckets),
            fits=tuple(bool(f) for f in ok), order=tuple(order), min_bucket=z,
            reserved=(float(need[0]), float(need[1])), opened_server=opened,
        )

    def state(self) -> ClusterState:
        n = self.n_open
        servers = tuple(Server(j, (float(self.capacity[j, 0]), float(self.capacity[j, 1]))) for j in range(n))
        return ClusterState(
            servers=servers,
            reserved=self.reserved[:n].copy(),
            actual=self.actual[:n].copy(),
            vm_count=self.vm_count[:n].copy(),
            assignments=dict(self.assignments),
        )

    def metrics(self) -> MetricsReport:
        n = self.n_open
        cap = self.capacity[:n, None, :]
        occupied = self.vm_count[:n] > 0
        over = (np.any(self.actual[:n] > cap + CAPACITY_TOL, axis=2) & occupied).sum(axis=0)
        used = occupied.sum(axis=0)
        return MetricsReport(
            over_utilized_per_epoch=tuple(int(c) for c in over),
            risk_of_migration=float(over.mean()),
            servers_used_per_epoch=tuple(int(c) for c in used),
            rejected=self.rejected,
        )


def place(state: ClusterState, vm: VmRequest, preds: VmPredictions, cfg: AllocatorConfig,
          index: int = 0) -> tuple[int | None, ClusterState]:
    """Functional single placement: returns the chosen server (None if rejected) and a new state."""
    alloc = Allocator.from_state(state, cfg)
    decision = alloc.place(vm, preds, index)
    return decision.server, alloc.state()


def _check_order(scenario: Scenario):
    keys = [(vm.arrival, vm.id) for vm in scenario.vms]
    if keys != sorted(keys):
        raise AllocationError("scenario VMs must be sorted by (arrival, id)")


def simulate(scenario: Scenario, cfg: AllocatorConfig) -> tuple[PlacementTrace, MetricsReport]:
    _check_order(scenario)
    alloc = Allocator(cfg, scenario.horizon)
    trace = PlacementTrace()
    for i, (vm, preds) in enumerate(zip(scenario.vms, scenario.predictions)):
        trace.decisions.append(alloc.place(vm, preds, i))
    trace.state = alloc.state()
    report = metrics_for(trace.state, rejected=alloc.rejected)
    return trace, report


def run_metrics(vms: Sequence[VmRequest], preds: Sequence[VmPredictions], cfg: AllocatorConfig, horizon: int,
                start: Allocator | None = None, first_index: int = 0) -> tuple[MetricsReport, Allocator]:
    """Trace-free simulation used inside search loops; optionally continues from an existing allocator."""
    alloc = start.copy() if start is not None else Allocator(cfg, horizon)
    for k, (vm, p) in enumerate(zip(vms, preds)):
        alloc.place(vm, p, first_index + k, record=False)
    return alloc.metrics(), alloc


def baseline_scenario(scenario: Scenario) -> Scenario:
    return scenario.ground_truth()
