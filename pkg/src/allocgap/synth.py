"""Seeded synthetic workloads and stand-in prediction models for desk-scale runs."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .models import Ensemble, bounds_from_data, build_reference_model, perturb_labels
from .workload import DEFAULT_LIFETIME_THRESHOLD, VmRequest, lifetime_label, sort_vms

# (cpu cores, memory GB) catalogue and its default mix; CPU-heavy relative to a 32 core / 128 GB server
# so that CPU, the dimension the oversubscription model acts on, is the binding one
VM_TYPES = ((2, 4), (4, 8), (8, 16), (16, 32))
TYPE_MIX = (0.3, 0.3, 0.25, 0.15)


def generate_workload(n: int, horizon: int, seed: int = 0, n_features: int = 3,
                      arrival_span: float = 0.75, type_mix: Sequence[float] = TYPE_MIX,
                      cpu_high_rate: float = 0.5, max_lifetime: int | None = None,
                      lifetime_threshold: int = DEFAULT_LIFETIME_THRESHOLD) -> list[VmRequest]:
    """VMs with seeded types, uniform arrivals in the first ``arrival_span`` of the horizon, and labels.

    Features are noisy views of the labels so that tree models have something to learn: feature 0
    tracks the CPU label, feature 1 the lifetime, the rest are noise.
    """
    rng = np.random.default_rng(seed)
    last_arrival = max(1, int(horizon * arrival_span))
    max_lifetime = max_lifetime or 2 * lifetime_threshold
    vms = []
    for i in range(n):
        req_cpu, req_mem = VM_TYPES[int(rng.choice(len(VM_TYPES), p=np.asarray(type_mix) / sum(type_mix)))]
        cpu_label = int(rng.random() < cpu_high_rate)
        life = int(rng.integers(1, max_lifetime + 1))
        feats = None
        if n_features:
            noise = rng.normal(0.0, 0.35, size=n_features)
            base = np.zeros(n_features)
            base[0] = cpu_label
            if n_features > 1:
                base[1] = life / max_lifetime
            feats = tuple(round(float(v), 6) for v in base + noise)
        vms.append(VmRequest(
            id=f"vm{i:04d}", req_cpu=req_cpu, req_mem=req_mem, arrival=int(rng.integers(0, last_arrival)),
            true_cpu_label=cpu_label, true_mem_decile=int(rng.integers(3, 11)),
            true_lifetime_epochs=life, true_lifetime_label=lifetime_label(life, lifetime_threshold),
            features=feats,
        ))
    return sort_vms(vms)


def noisy_model(vms: Sequence[VmRequest], target: str = "cpu", error_rate: float = 0.3, seed: int = 0) -> Ensemble:
    """A tree model that reproduces the workload labels except on a seeded ``error_rate`` fraction."""
    attr = {"cpu": "true_cpu_label", "life": "true_lifetime_label"}[target]
    data = [(vm.features, getattr(vm, attr)) for vm in vms if vm.features is not None]
    flipped = perturb_labels(data, error_rate, seed, classes=(0, 1))
    ref = build_reference_model(flipped)
    X = np.array([x for x, _ in data], dtype=float)
    names = tuple(f"f{k}" for k in range(X.shape[1]))
    return ref.to_ensemble(names, bounds_from_data(X), classes=(0, 1))
