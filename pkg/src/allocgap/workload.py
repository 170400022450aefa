"""VM requests, servers, cluster occupancy and the metrics reported against them."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CPU, MEM = 0, 1
DIMENSIONS = ("cpu", "mem")

EPOCH_MINUTES = 10
DEFAULT_HORIZON = 144
DEFAULT_LIFETIME_THRESHOLD = 6
DEFAULT_CPU_FRACTION = 0.65

# tolerance used when comparing float resource totals against capacity
CAPACITY_TOL = 1e-9


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class VmRequest:
    id: str
    req_cpu: int
    req_mem: int
    arrival: int
    true_cpu_label: int
    true_mem_decile: int
    true_lifetime_epochs: int
    true_lifetime_label: int
    features: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.req_cpu < 0 or self.req_mem < 0:
            raise WorkloadError(f"VM {self.id}: negative request size")
        if self.arrival < 0:
            raise WorkloadError(f"VM {self.id}: arrival must be >= 0")
        if self.true_cpu_label not in (0, 1):
            raise WorkloadError(f"VM {self.id}: cpu label must be 0 or 1")
        if not 1 <= self.true_mem_decile <= 10:
            raise WorkloadError(f"VM {self.id}: memory decile {self.true_mem_decile} outside 1..10")
        if self.true_lifetime_epochs < 1:
            raise WorkloadError(f"VM {self.id}: lifetime must be positive")
        if self.true_lifetime_label not in (0, 1):
            raise WorkloadError(f"VM {self.id}: lifetime label must be 0 or 1")
        if self.features is not None:
            object.__setattr__(self, "features", tuple(float(v) for v in self.features))

    @property
    def request(self) -> tuple[float, float]:
        return (float(self.req_cpu), float(self.req_mem))

    @property
    def departure(self) -> int:
        """First epoch in which the VM is no longer alive."""
        return self.arrival + self.true_lifetime_epochs

    def alive(self, epoch: int) -> bool:
        return self.arrival <= epoch < self.departure

    def actual_usage(self, cpu_fraction: float = DEFAULT_CPU_FRACTION) -> tuple[float, float]:
        """Resources the VM really consumes, derived from its ground-truth labels."""
        cpu = self.req_cpu * (1.0 if self.true_cpu_label else cpu_fraction)
        mem = self.req_mem * self.true_mem_decile / 10.0
        return (cpu, mem)


def lifetime_label(lifetime_epochs: int, threshold: int = DEFAULT_LIFETIME_THRESHOLD) -> int:
    return int(lifetime_epochs >= threshold)


def check_lifetime_labels(vms: Iterable[VmRequest], threshold: int = DEFAULT_LIFETIME_THRESHOLD):
    bad = [vm.id for vm in vms if vm.true_lifetime_label != lifetime_label(vm.true_lifetime_epochs, threshold)]
    if bad:
        raise WorkloadError(f"lifetime labels inconsistent with threshold {threshold} for VMs {bad}")


def sort_vms(vms: Iterable[VmRequest]) -> list[VmRequest]:
    return sorted(vms, key=lambda vm: (vm.arrival, vm.id))


@dataclass(frozen=True)
class Server:
    id: int
    capacity: tuple[float, float]

    def __post_init__(self):
        if any(c <= 0 for c in self.capacity):
            raise WorkloadError(f"server {self.id}: capacities must be positive")


@dataclass(frozen=True)
class VmPredictions:
    """Per-VM model outputs. ``mem`` is None when no memory model is in play."""

    cpu: int
    life: int
    mem: int | None = None


def ground_truth_predictions(vm: VmRequest, with_mem: bool = False) -> VmPredictions:
    return VmPredictions(
        cpu=vm.true_cpu_label,
        life=vm.true_lifetime_label,
        mem=vm.true_mem_decile if with_mem else None,
    )


@dataclass(frozen=True)
class Scenario:
    """An ordered VM sequence together with the predictions the allocator sees."""

    vms: tuple[VmRequest, ...]
    predictions: tuple[VmPredictions, ...]
    horizon: int = DEFAULT_HORIZON

    def __post_init__(self):
        if len(self.vms) != len(self.predictions):
            raise WorkloadError("one prediction record per VM is required")
        keys = [(vm.arrival, vm.id) for vm in self.vms]
        if keys != sorted(keys):
            raise WorkloadError("scenario VMs must be sorted by (arrival, id)")
        if len({vm.id for vm in self.vms}) != len(self.vms):
            raise WorkloadError("duplicate VM ids in scenario")
        if self.horizon < 1:
            raise WorkloadError("horizon must be >= 1")

    def __len__(self):
        return len(self.vms)

    @property
    def uses_mem_model(self) -> bool:
        return any(p.mem is not None for p in self.predictions)

    def ground_truth(self) -> Scenario:
        """Same skeleton with every prediction replaced by the matching label."""
        with_mem = self.uses_mem_model
        preds = tuple(ground_truth_predictions(vm, with_mem) for vm in self.vms)
        return replace(self, predictions=preds)


@dataclass(frozen=True)
class ClusterState:
    """Per-server, per-epoch occupancy; arrays are indexed [server, epoch, dimension]."""

    servers: tuple[Server, ...]
    reserved: np.ndarray
    actual: np.ndarray
    vm_count: np.ndarray
    assignments: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.reserved.shape[1]

    @property
    def capacities(self) -> np.ndarray:
        return np.array([s.capacity for s in self.servers], dtype=float).reshape(len(self.servers), 2)

    @classmethod
    def empty(cls, servers: Sequence[Server], horizon: int) -> ClusterState:
        n = len(servers)
        return cls(
            servers=tuple(servers),
            reserved=np.zeros((n, horizon, 2)),
            actual=np.zeros((n, horizon, 2)),
            vm_count=np.zeros((n, horizon), dtype=int),
        )


@dataclass(frozen=True)
class MetricsReport:
    over_utilized_per_epoch: tuple[int, ...]
    risk_of_migration: float
    servers_used_per_epoch: tuple[int, ...]
    excess_servers_per_epoch: tuple[int, ...] | None = None
    rejected: int = 0

    @property
    def horizon_epochs(self) -> int:
        return len(self.over_utilized_per_epoch)

    @property
    def mean_servers_used(self) -> float:
        if not self.servers_used_per_epoch:
            return 0.0
        return float(np.mean(self.servers_used_per_epoch))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["horizon_epochs"] = self.horizon_epochs
        return d


def over_utilized_servers(state: ClusterState) -> list[int]:
    """Count, per epoch, the occupied servers whose actual usage exceeds capacity in any dimension."""
    if not state.servers:
        return [0] * state.horizon
    cap = state.capacities[:, None, :]
    over = np.any(state.actual > cap + CAPACITY_TOL, axis=2) & (state.vm_count > 0)
    return [int(c) for c in over.sum(axis=0)]


def servers_used(state: ClusterState) -> list[int]:
    if not state.servers:
        return [0] * state.horizon
    return [int(c) for c in (state.vm_count > 0).sum(axis=0)]


def risk_of_migration(counts: Sequence[float], normalizer: float | None = None) -> float:
    if len(counts) == 0:
        raise WorkloadError("risk of migration needs a horizon of at least one epoch")
    if normalizer is not None and normalizer == 0:
        raise WorkloadError("normalizer must be non-zero")
    value = float(np.mean(counts))
    return value / normalizer if normalizer is not None else value


def excess_servers(system: MetricsReport, baseline: MetricsReport) -> list[int]:
    if system.horizon_epochs != baseline.horizon_epochs:
        raise WorkloadError(
            f"horizon mismatch: system {system.horizon_epochs} vs baseline {baseline.horizon_epochs}"
        )
    return [s - b for s, b in zip(system.servers_used_per_epoch, baseline.servers_used_per_epoch)]


def metrics_for(state: ClusterState, rejected: int = 0) -> MetricsReport:
    over = over_utilized_servers(state)
    return MetricsReport(
        over_utilized_per_epoch=tuple(over),
        risk_of_migration=risk_of_migration(over),
        servers_used_per_epoch=tuple(servers_used(state)),
        rejected=rejected,
    )


# -- workload files ---------------------------------------------------------

_FIELDS = (
    "id", "req_cpu", "req_mem", "arrival", "true_cpu_label", "true_mem_decile",
    "true_lifetime_epochs", "true_lifetime_label", "features",
)


def vm_to_dict(vm: VmRequest) -> dict:
    d = {name: getattr(vm, name) for name in _FIELDS}
    if d["features"] is not None:
        d["features"] = list(d["features"])
    return d


def vm_from_dict(d: dict) -> VmRequest:
    missing = [k for k in _FIELDS[:-1] if k not in d]
    if missing:
        raise WorkloadError(f"workload record missing fields {missing}")
    return VmRequest(
        id=str(d["id"]),
        req_cpu=int(d["req_cpu"]),
        req_mem=int(d["req_mem"]),
        arrival=int(d["arrival"]),
        true_cpu_label=int(d["true_cpu_label"]),
        true_mem_decile=int(d["true_mem_decile"]),
        true_lifetime_epochs=int(d["true_lifetime_epochs"]),
        true_lifetime_label=int(d["true_lifetime_label"]),
        features=None if d.get("features") is None else tuple(d["features"]),
    )


def dump_workload(vms: Iterable[VmRequest], path: str | Path):
    records = [vm_to_dict(vm) for vm in sort_vms(vms)]
    Path(path).write_text(json.dumps(records, indent=1) + "\n")


def load_workload(path: str | Path, lifetime_threshold: int | None = DEFAULT_LIFETIME_THRESHOLD) -> list[VmRequest]:
    records = json.loads(Path(path).read_text())
    if not isinstance(records, list):
        raise WorkloadError("workload file must hold a JSON array")
    vms = sort_vms(vm_from_dict(r) for r in records)
    if lifetime_threshold is not None:
        check_lifetime_labels(vms, lifetime_threshold)
    return vms
