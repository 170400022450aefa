"""Mixed-integer encoding of DPBFR and a checker that substitutes simulator decisions into it.

Variable families (i: VM in processing order, j: server, t: epoch, d: dimension):

    alpha[i,j,t]   VM i sits on server j at epoch t
    rej[i]         VM i was rejected (fixed pool, nothing fits)
    x[i,j,t,d]     reserved space VM i occupies on server j
    r[i,j,d]       residual of server j in dimension d if VM i were placed at its arrival
    m[i,j], s[i,j,d]   min over dimensions of r and its selector
    f[i,j]         VM i fits server j
    score[i,j]     best-fit score; g[i,j,d] selects the max dimension under max aggregation
    beta[i,j,k], b[i,j]   bucket one-hot and bucket index
    z[i]           minimum bucket over fitting servers
    cand[i,j]      server j is a candidate for VM i
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .dpbfr import FIXED, MAX, AllocatorConfig, PlacementTrace, reserved_sizes, selection_order
from .milp import BINARY, EQ, GE, INTEGER, LE, REAL, ConstraintSystem, Violation
from .workload import Scenario

D = 2


@dataclass
class DpbfrEncoding(ConstraintSystem):
    vm_ids: list[str] = field(default_factory=list)
    arrivals: list[int] = field(default_factory=list)
    lifetimes: list[int] = field(default_factory=list)
    reserved: list[tuple[float, float]] = field(default_factory=list)
    bucket_counts: list[int] = field(default_factory=list)
    capacity: tuple[float, float] = (1.0, 1.0)
    n_servers: int = 0
    horizon: int = 0
    aggregation: str = "mean"


def _a(i, j, t):
    return f"alpha[{i},{j},{t}]"


def _x(i, j, t, d):
    return f"x[{i},{j},{t},{d}]"


def encode_constraints(scenario: Scenario, cfg: AllocatorConfig) -> DpbfrEncoding:
    if cfg.pool_mode != FIXED:
        raise ValueError("the DPBFR encoding needs a finite server pool; use pool_mode='fixed' with num_servers=J")
    N, J = len(scenario.vms), cfg.num_servers
    T = max([scenario.horizon] + [vm.departure for vm in scenario.vms])
    C = cfg.server_capacity
    kmax = max(cfg.short_buckets, cfg.long_buckets)
    sysm = DpbfrEncoding(
        big_m=J * sum(C) + 1.0,
        epsilon=1.0 / (2.0 * max(kmax - 1, 1)),
        mu=1e-6,
        capacity=C, n_servers=J, horizon=T, aggregation=cfg.score_aggregation,
    )
    M, eps, mu = sysm.big_m, sysm.epsilon, sysm.mu

    for vm, p in zip(scenario.vms, scenario.predictions):
        sysm.vm_ids.append(vm.id)
        sysm.arrivals.append(vm.arrival)
        sysm.lifetimes.append(vm.true_lifetime_epochs)
        sysm.reserved.append(reserved_sizes(vm, p, cfg))
        sysm.bucket_counts.append(cfg.bucket_count(p.life))

    for i in range(N):
        sysm.var(f"rej[{i}]", BINARY)
        sysm.var(f"z[{i}]", INTEGER, 0, kmax - 1)
        for j in range(J):
            for t in range(T):
                sysm.var(_a(i, j, t), BINARY)
                for d in range(D):
                    sysm.var(_x(i, j, t, d), REAL, 0.0)
            for d in range(D):
                sysm.var(f"r[{i},{j},{d}]")
                sysm.var(f"s[{i},{j},{d}]", BINARY)
            sysm.var(f"m[{i},{j}]")
            sysm.var(f"f[{i},{j}]", BINARY)
            sysm.var(f"score[{i},{j}]")
            if cfg.score_aggregation == MAX:
                for d in range(D):
                    sysm.var(f"g[{i},{j},{d}]", BINARY)
            for k in range(sysm.bucket_counts[i]):
                sysm.var(f"beta[{i},{j},{k}]", BINARY)
            sysm.var(f"b[{i},{j}]", INTEGER, 0, kmax - 1)
            sysm.var(f"cand[{i},{j}]", BINARY)

    for i in range(N):
        a, life, Y, K = sysm.arrivals[i], sysm.lifetimes[i], sysm.reserved[i], sysm.bucket_counts[i]
        rej = f"rej[{i}]"

        # placement over time
        for j in range(J):
            for t in range(a):
                sysm.add("eq11", {_a(i, j, t): 1}, EQ, 0)
        sysm.add("eq12", [(_a(i, j, a), 1) for j in range(J)] + [(rej, 1)], EQ, 1)
        for j in range(J):
            for t in range(a, T - 1):
                sysm.add("eq13", {_a(i, j, t + 1): 1, _a(i, j, t): -1}, LE, 0)
        held = [(_a(i, j, t), 1) for j in range(J) for t in range(a, T)]
        sysm.add("eq14", held + [(rej, life)], GE, life)
        sysm.add("eq14", held + [(rej, life + 1 - mu)], LE, life + 1 - mu)

        # occupied space, linearized x = Y * alpha
        for t in range(T):
            for d in range(D):
                for j in range(J):
                    sysm.add("eq21", {_x(i, j, t, d): 1, _a(i, j, t): -M}, LE, 0)
                sysm.add("eq22", {_x(i, j, t, d): 1 for j in range(J)}, LE, Y[d])
                terms = [(_x(i, j, t, d), 1) for j in range(J)] + [(_a(i, j, t), -M) for j in range(J)]
                sysm.add("eq23", terms, GE, Y[d] - M)

        for j in range(J):
            # residual capacity at arrival, after hypothetically adding VM i
            for d in range(D):
                terms = {f"r[{i},{j},{d}]": 1}
                for u in range(i):
                    terms[_x(u, j, a, d)] = 1
                sysm.add("residual", terms, EQ, C[d] - Y[d])
            # m = min_d r
            m = f"m[{i},{j}]"
            for d in range(D):
                sysm.add("min_residual", {m: 1, f"r[{i},{j},{d}]": -1}, LE, 0)
                sysm.add("min_residual", {m: 1, f"r[{i},{j},{d}]": -1, f"s[{i},{j},{d}]": -M}, GE, -M)
            sysm.add("min_residual", {f"s[{i},{j},{d}]": 1 for d in range(D)}, EQ, 1)
            # min r + mu <= M f <= M + min r
            f = f"f[{i},{j}]"
            sysm.add("fit", {m: 1, f: -M}, LE, -mu)
            sysm.add("fit", {f: M, m: -1}, LE, M)
            # best-fit score
            score = f"score[{i},{j}]"
            if cfg.score_aggregation == MAX:
                for d in range(D):
                    sysm.add("score", {score: 1, f"r[{i},{j},{d}]": -1.0 / C[d]}, GE, 0)
                    sysm.add("score", {score: 1, f"r[{i},{j},{d}]": -1.0 / C[d], f"g[{i},{j},{d}]": M}, LE, M)
                sysm.add("score", {f"g[{i},{j},{d}]": 1 for d in range(D)}, EQ, 1)
            else:
                terms = {score: 1}
                for d in range(D):
                    terms[f"r[{i},{j},{d}]"] = -1.0 / (D * C[d])
                sysm.add("score", terms, EQ, 0)
            # quantization into K equal-width buckets
            beta = [f"beta[{i},{j},{k}]" for k in range(K)]
            bvar = f"b[{i},{j}]"
            sysm.add("bucket", {v: 1 for v in beta}, EQ, 1)
            sysm.add("bucket", [(bvar, 1)] + [(beta[k], -k) for k in range(K)], EQ, 0)
            for k in range(1, K):
                sysm.add("bucket", {score: 1, beta[k]: -M}, GE, k / K - M)
            for k in range(K - 1):
                sysm.add("bucket", {score: 1, beta[k]: M}, LE, (k + 1) / K - mu + M)
            # candidates: servers whose bucket equals the minimum bucket z
            z, cand = f"z[{i}]", f"cand[{i},{j}]"
            sysm.add("eq31", {z: 1, bvar: -1, f: M}, LE, M)
            sysm.add("eq32", {cand: 1, f: -1}, LE, 0)
            sysm.add("eq33", {cand: 1, z: -eps, bvar: eps}, LE, 1)
            sysm.add("eq34", {cand: 1, f: -M, z: -eps, bvar: eps}, GE, -M + eps)
            sysm.add("reject", {rej: 1, f: 1}, LE, 1)

        # first candidate in the selection order wins
        order = selection_order(i, J, cfg)
        for pos, j in enumerate(order, start=1):
            terms = {_a(i, j, a): pos, f"cand[{i},{j}]": -1}
            for k in order[: pos - 1]:
                terms[f"cand[{i},{k}]"] = terms.get(f"cand[{i},{k}]", 0) + 1
            sysm.add("selection", terms, LE, pos - 1)
    return sysm


def audit_counts(enc: DpbfrEncoding) -> Counter:
    """Closed-form constraint tally per family, computed from the encoding's metadata alone."""
    N, J, T = len(enc.vm_ids), enc.n_servers, enc.horizon
    arr, K = enc.arrivals, enc.bucket_counts
    out = Counter({
        "eq11": J * sum(arr),
        "eq12": N,
        "eq13": J * sum(max(0, T - 1 - a) for a in arr),
        "eq14": 2 * N,
        "eq21": N * J * T * D,
        "eq22": N * T * D,
        "eq23": N * T * D,
        "residual": N * J * D,
        "min_residual": N * J * (2 * D + 1),
        "fit": 2 * N * J,
        "score": N * J * ((2 * D + 1) if enc.aggregation == MAX else 1),
        "bucket": J * sum(2 + 2 * (k - 1) for k in K),
        "eq31": N * J, "eq32": N * J, "eq33": N * J, "eq34": N * J,
        "reject": N * J,
        "selection": N * J,
    })
    return +out


def _intervals(entry):
    if entry is None:
        return []
    if isinstance(entry, tuple) and len(entry) == 3 and all(isinstance(v, int) for v in entry):
        return [entry]
    return [tuple(e) for e in entry]


def trace_values(enc: DpbfrEncoding, trace: PlacementTrace) -> dict[str, float]:
    """Variable assignment implied by a simulator trace."""
    J, T = enc.n_servers, enc.horizon
    C = enc.capacity
    assignments = trace.state.assignments if trace.state is not None else {}
    by_id = {d.vm_id: d for d in trace.decisions}
    vals: dict[str, float] = {}
    for i, vm_id in enumerate(enc.vm_ids):
        occupancy = set()
        for server, start, end in _intervals(assignments.get(vm_id)):
            for t in range(max(start, 0), min(end, T)):
                occupancy.add((server, t))
        for j in range(J):
            for t in range(T):
                a = 1.0 if (j, t) in occupancy else 0.0
                vals[_a(i, j, t)] = a
                for d in range(D):
                    vals[_x(i, j, t, d)] = enc.reserved[i][d] * a
    for i, vm_id in enumerate(enc.vm_ids):
        dec = by_id[vm_id]
        a = enc.arrivals[i]
        vals[f"rej[{i}]"] = 1.0 if dec.server is None else 0.0
        vals[f"z[{i}]"] = float(dec.min_bucket)
        for j in range(J):
            r = []
            for d in range(D):
                rd = C[d] - enc.reserved[i][d] - sum(vals[_x(u, j, a, d)] for u in range(i))
                vals[f"r[{i},{j},{d}]"] = rd
                r.append(rd)
            lo = min(range(D), key=lambda d: r[d])
            vals[f"m[{i},{j}]"] = r[lo]
            for d in range(D):
                vals[f"s[{i},{j},{d}]"] = 1.0 if d == lo else 0.0
            if enc.aggregation == MAX:
                hi = max(range(D), key=lambda d: r[d] / C[d])
                for d in range(D):
                    vals[f"g[{i},{j},{d}]"] = 1.0 if d == hi else 0.0
            vals[f"f[{i},{j}]"] = 1.0 if dec.fits[j] else 0.0
            vals[f"score[{i},{j}]"] = dec.scores[j]
            vals[f"b[{i},{j}]"] = float(dec.buckets[j])
            for k in range(enc.bucket_counts[i]):
                vals[f"beta[{i},{j},{k}]"] = 1.0 if dec.buckets[j] == k else 0.0
            vals[f"cand[{i},{j}]"] = 1.0 if j in dec.candidates else 0.0
    return vals


def verify_trace(enc: DpbfrEncoding, trace: PlacementTrace, tol: float = 1e-9) -> list[Violation]:
    """Empty list when every constraint holds for the simulator's decisions."""
    return enc.check(trace_values(enc, trace), tol)
