"""Query configs (Q1 gap, Q2 ablation, Q3 drift, Q4 risk surface, Q5 hypothetical model) and their reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from . import cegar, hypo, risk
from .bounds import BoundError, DistributionProfile, min_sequence_length
from .dpbfr import AllocatorConfig, simulate
from .models import Ensemble, ModelError, build_reference_model, load_model, perturb_labels, predict
from .search import (MODELS, RISK, SERVERS, ConstraintSet, InfeasibleError, ScenarioVar, SearchBudget, SearchError,
                     SearchResult, Template, ablation, accuracy_constraint, anneal_search, constraints_from_profile,
                     exhaustive_search, make_plan, metric_value, partitioned_search, random_search)
from .workload import Scenario, VmPredictions, WorkloadError, load_workload

QUERIES = ("Q1", "Q2", "Q3", "Q4", "Q5")
METHODS = ("anneal", "exhaustive", "partitioned", "random")

OK, CONFIG_ERROR, INFEASIBLE, BUDGET_EXHAUSTED = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class QueryConfig:
    query: str
    workload: str
    N: int
    horizon: int
    metric: str = RISK
    seed: int = 0
    profile: str | None = None
    free_models: list[str] = field(default_factory=lambda: ["cpu", "life"])
    with_mem: bool | None = None
    accuracy: dict[str, list[int]] = field(default_factory=dict)
    z: float = 3.89
    allocator: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    models: dict[str, str] = field(default_factory=dict)
    ablation: list[list[str]] | None = None
    drift_p: float | None = None
    capacity_profile: dict | str | None = None
    risk_threshold: int | None = None
    cegar_depth: int = 1
    cegar_rounds: int = 1000
    record_time: bool = False
    output_dir: str = "out"
    base_dir: str = "."

    @property
    def raw(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "base_dir"}
        return d

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def allocator_config(self) -> AllocatorConfig:
        return AllocatorConfig.from_dict(self.allocator) if self.allocator else AllocatorConfig()

    def budget(self) -> SearchBudget:
        s = self.search
        return SearchBudget(iterations=int(s.get("iterations", 2000)), seconds=s.get("seconds"), seed=self.seed,
                            vary_arrivals=bool(s.get("vary_arrivals", False)))


def config_from_dict(d: dict, base_dir: str = ".") -> QueryConfig:
    known = set(QueryConfig.__dataclass_fields__) - {"base_dir"}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config fields {unknown}")
    missing = [k for k in ("query", "workload", "N", "horizon") if k not in d]
    if missing:
        raise ConfigError(f"config lacks required fields {missing}")
    try:
        return QueryConfig(**d, base_dir=base_dir)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> QueryConfig:
    p = Path(path)
    try:
        d = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(d, str(p.parent))


# -- validation ----------------------------------------------------------------

def validate(cfg: QueryConfig) -> list[str]:
    """Schema, file, bound-feasibility and sequence-length checks; no simulation. Empty list means ok."""
    diags: list[str] = []
    if cfg.query not in QUERIES:
        diags.append(f"query must be one of {QUERIES}, got {cfg.query!r}")
    if cfg.metric not in (RISK, SERVERS):
        diags.append(f"metric must be {RISK!r} or {SERVERS!r}")
    if not isinstance(cfg.N, int) or cfg.N < 1:
        diags.append("N must be a positive integer")
        return diags
    if not isinstance(cfg.horizon, int) or cfg.horizon < 1:
        diags.append("horizon must be a positive integer")
    bad_models = [m for m in cfg.free_models if m not in MODELS]
    if bad_models:
        diags.append(f"unknown free models {bad_models}")
    method = cfg.search.get("method", "anneal")
    if method not in METHODS:
        diags.append(f"search method must be one of {METHODS}")
    for k in cfg.search.get("schedule", []):
        if not 1 <= int(k) <= cfg.N:
            diags.append(f"partition count {k} outside [1, N]")
    try:
        cfg.allocator_config()
    except (ValueError, TypeError) as exc:
        diags.append(f"allocator: {exc}")

    if not cfg.path(cfg.workload).is_file():
        diags.append(f"workload file not found: {cfg.workload}")
    else:
        try:
            vms = [vm for vm in load_workload(cfg.path(cfg.workload)) if vm.arrival < cfg.horizon]
            if len(vms) < cfg.N:
                diags.append(f"workload has {len(vms)} VMs arriving before the horizon, N = {cfg.N} requested")
            if cfg.query in ("Q3", "Q4") and any(vm.features is None for vm in vms[:cfg.N]):
                diags.append(f"{cfg.query} needs feature vectors on every VM")
        except (WorkloadError, ValueError, KeyError) as exc:
            diags.append(f"workload: {exc}")

    needs = {"Q3": ["cpu"], "Q4": ["cpu"]}.get(cfg.query, [])
    for m in needs:
        if m not in cfg.models:
            diags.append(f"{cfg.query} needs a model path for {m!r}")
    for m, p in cfg.models.items():
        if not cfg.path(p).is_file():
            diags.append(f"model file not found for {m!r}: {p}")
        else:
            try:
                load_model(cfg.path(p))
            except (ModelError, ValueError, KeyError) as exc:
                diags.append(f"model {m!r}: {exc}")

    if cfg.profile is not None:
        if not cfg.path(cfg.profile).is_file():
            diags.append(f"profile file not found: {cfg.profile}")
        else:
            try:
                prof = DistributionProfile.load(cfg.path(cfg.profile))
                constraints_from_profile(prof, cfg.N, cfg.free_models, cfg.z)
            except BoundError as exc:
                diags.append(f"constraints: {exc}")
            except (ValueError, KeyError) as exc:
                diags.append(f"profile: {exc}")
    for m, bounds in cfg.accuracy.items():
        if m not in MODELS or len(bounds) != 2 or not 0 <= bounds[0] <= bounds[1] <= cfg.N:
            diags.append(f"accuracy bound for {m!r} must be [lo, hi] with 0 <= lo <= hi <= N")

    if cfg.query == "Q3":
        if cfg.drift_p is None:
            diags.append("Q3 needs drift_p")
        elif not 0 <= cfg.drift_p <= 1:
            diags.append("drift_p must lie in [0, 1]")
        elif 0 < cfg.drift_p < 1 and cfg.N < min_sequence_length(cfg.drift_p):
            diags.append(f"N = {cfg.N} violates the Np >= 5 and N(1-p) >= 5 rule for drift_p = {cfg.drift_p} "
                         f"(need N >= {min_sequence_length(cfg.drift_p)})")
    if cfg.query == "Q4" and cfg.risk_threshold is None:
        diags.append("Q4 needs risk_threshold")
    if cfg.query == "Q5":
        if cfg.capacity_profile is None:
            diags.append("Q5 needs capacity_profile")
        else:
            try:
                _capacity_profile(cfg)
            except (hypo.FlowError, OSError, ValueError, KeyError) as exc:
                diags.append(f"capacity profile: {exc}")
    return diags


def _capacity_profile(cfg: QueryConfig) -> hypo.CapacityProfile:
    cp = cfg.capacity_profile
    if isinstance(cp, str):
        return hypo.load_profile(cfg.path(cp))
    return hypo.CapacityProfile.from_dict(cp)


# -- shared pieces -------------------------------------------------------------------

@dataclass
class Report:
    code: int
    files: dict[str, str]
    summary: dict[str, Any]


def _template(cfg: QueryConfig) -> Template:
    vms = [vm for vm in load_workload(cfg.path(cfg.workload)) if vm.arrival < cfg.horizon][:cfg.N]
    with_mem = cfg.with_mem if cfg.with_mem is not None else "mem" in cfg.free_models
    return Template(tuple(vms), cfg.horizon, with_mem)


def _constraints(cfg: QueryConfig, models) -> tuple[ConstraintSet, DistributionProfile | None]:
    prof = DistributionProfile.load(cfg.path(cfg.profile)) if cfg.profile else None
    cs = constraints_from_profile(prof, cfg.N, models, cfg.z) if prof else ConstraintSet()
    for m, (lo, hi) in cfg.accuracy.items():
        if m in models:
            p = prof.accuracy(m) if prof and m in prof.cells else None
            cs.counts.append(accuracy_constraint(m, int(lo), int(hi), p))
    return cs, prof


def _search(cfg: QueryConfig, template: Template, cs: ConstraintSet, models, prof, seeds=()) -> SearchResult:
    alloc = cfg.allocator_config()
    method = cfg.search.get("method", "anneal")
    budget = cfg.budget()
    if method == "exhaustive":
        return exhaustive_search(template, cs, alloc, models, cfg.metric, int(cfg.search.get("cap", 10**6)))
    if method == "random":
        return random_search(template, cs, alloc, budget, models, cfg.metric, prof)
    if method == "partitioned":
        plan = make_plan(template, cs, cfg.search.get("schedule", [1]), cfg.seed)
        return partitioned_search(template, cs, plan, alloc, budget, models, cfg.metric, prof)
    return anneal_search(template, cs, alloc, budget, models, cfg.metric, prof, seeds=seeds)


def _replay(scenario: Scenario, alloc: AllocatorConfig, metric: str) -> dict:
    """Every reported number comes from simulating the emitted scenario."""
    _, system = simulate(scenario, alloc)
    _, base = simulate(scenario.ground_truth(), alloc)
    return {"gap": metric_value(system, metric) - metric_value(base, metric),
            "system": system.to_dict(), "baseline": base.to_dict()}


def _trace_csv(result: SearchResult, with_time: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "seconds", "gap"] if with_time else ["iteration", "gap"])
    for it, sec, g in result.trace:
        w.writerow([it, f"{sec:.6f}", repr(g)] if with_time else [it, repr(g)])
    return buf.getvalue()


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _provenance(cfg: QueryConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "query": cfg.query}


# -- queries -----------------------------------------------------------------------------

def _q1(cfg: QueryConfig) -> Report:
    template = _template(cfg)
    models = [m for m in MODELS if m in cfg.free_models]
    cs, prof = _constraints(cfg, models)
    res = _search(cfg, template, cs, models, prof)
    scenario = res.best.to_scenario()
    replay = _replay(scenario, cfg.allocator_config(), cfg.metric)
    summary = {**_provenance(cfg), "metric": cfg.metric, "gap": replay["gap"], "evaluations": res.evaluations,
               "stage_gaps": res.stage_gaps, "system": replay["system"], "baseline": replay["baseline"]}
    files = {"scenario.json": _dump(res.best.to_dict()), "gap_trace.csv": _trace_csv(res, cfg.record_time),
             "report.json": _dump(summary)}
    return Report(OK, files, summary)


def _q2(cfg: QueryConfig) -> Report:
    template = _template(cfg)
    models = [m for m in MODELS if m in cfg.free_models]
    cs, prof = _constraints(cfg, models)
    subsets = cfg.ablation if cfg.ablation is not None else [[m] for m in models] + [models]
    alloc = cfg.allocator_config()
    method = cfg.search.get("method", "anneal")
    plan_schedule = cfg.search.get("schedule")
    rows, files, incumbents = [], {}, []
    # smaller subsets first so their incumbents can seed the larger ones
    for subset in sorted(subsets, key=len):
        chosen = [m for m in MODELS if m in subset]
        plan = make_plan(template, cs.restricted_to(chosen), plan_schedule, cfg.seed) \
            if method == "partitioned" and plan_schedule else None
        res = ablation(template, chosen, cs, alloc, cfg.budget(), cfg.metric, prof,
                       exhaustive=method == "exhaustive", plan=plan, seeds=incumbents)
        incumbents.append(res.best)
        name = "+".join(chosen) or "none"
        replay = _replay(res.best.to_scenario(), alloc, cfg.metric)
        rows.append({"models": name, "gap": replay["gap"]})
        files[f"scenario_{name}.json"] = _dump(res.best.to_dict())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["models", "gap"])
    for r in rows:
        w.writerow([r["models"], repr(r["gap"])])
    summary = {**_provenance(cfg), "metric": cfg.metric, "ablation": rows}
    files.update({"ablation.csv": buf.getvalue(), "report.json": _dump(summary)})
    return Report(OK, files, summary)


def _predicted_scenario(cfg: QueryConfig, vms, labels, cpu_model: Ensemble, life_model: Ensemble | None) -> Scenario:
    out_vms, preds = [], []
    for vm, lab in zip(vms, labels):
        x = list(vm.features)
        cpu = cpu_model.classes[predict(cpu_model, x).class_index]
        life = life_model.classes[predict(life_model, x).class_index] if life_model else vm.true_lifetime_label
        out_vms.append(replace(vm, true_cpu_label=int(lab)))
        preds.append(VmPredictions(int(cpu), int(life)))
    return Scenario(tuple(out_vms), tuple(preds), cfg.horizon)


def _q3(cfg: QueryConfig) -> Report:
    template = _template(cfg)
    vms = list(template.vms)
    cpu_model = load_model(cfg.path(cfg.models["cpu"]))
    life_model = load_model(cfg.path(cfg.models["life"])) if "life" in cfg.models else None
    dataset = [(vm.features, vm.true_cpu_label) for vm in vms]
    alloc = cfg.allocator_config()

    ref = build_reference_model(dataset)
    base_labels = [ref.predict(x) for x, _ in dataset]
    no_drift = _replay(_predicted_scenario(cfg, vms, base_labels, cpu_model, life_model), alloc, cfg.metric)

    drifted = build_reference_model(perturb_labels(dataset, cfg.drift_p, cfg.seed, classes=(0, 1)))
    drift_labels = [drifted.predict(x) for x, _ in dataset]
    drift = _replay(_predicted_scenario(cfg, vms, drift_labels, cpu_model, life_model), alloc, cfg.metric)

    changed = sum(a != b for a, b in zip(base_labels, drift_labels))
    summary = {**_provenance(cfg), "metric": cfg.metric, "drift_p": cfg.drift_p, "labels_changed": changed,
               "gap_no_drift": no_drift["gap"], "gap_drift": drift["gap"],
               "delta": drift["gap"] - no_drift["gap"]}
    return Report(OK, {"report.json": _dump(summary)}, summary)


def _q4(cfg: QueryConfig) -> Report:
    q1 = _q1(cfg)
    template = _template(cfg)
    cpu_model = load_model(cfg.path(cfg.models["cpu"]))
    all_vms = [vm for vm in load_workload(cfg.path(cfg.workload)) if vm.features is not None]
    ref = build_reference_model([(vm.features, vm.true_cpu_label) for vm in all_vms])
    ref_model = ref.to_ensemble(cpu_model.feature_names, cpu_model.feature_bounds, classes=(0, 1))
    scenario = json.loads(q1.files["scenario.json"])
    by_id = {vm.id: vm for vm in template.vms}

    points, regions, statuses = [], [], []
    cache: dict[tuple[int, int], cegar.CegarResult] = {}
    ensembles = [cpu_model, ref_model]
    for rec in scenario["vms"]:
        pair = (rec["pred_cpu"], rec["true_cpu_label"])
        targets = [pair[0], pair[1]]
        own = by_id[rec["id"]].features
        if cegar.check_witness(ensembles, targets, own).passed:
            point, status = tuple(own), cegar.SAT
        else:
            if pair not in cache:
                cache[pair] = cegar.find_features(ensembles, targets, cfg.cegar_depth, cfg.cegar_rounds)
            res = cache[pair]
            point, status = res.point, res.status
        statuses.append(status)
        points.append({"id": rec["id"], "pred_cpu": pair[0], "true_cpu_label": pair[1], "status": status,
                       "point": list(point) if point is not None else None})
        if point is not None:
            regions.append(risk.region_of(ensembles, point))

    summary = {**_provenance(cfg), "gap": q1.summary["gap"], "vms": len(points),
               "sat": statuses.count(cegar.SAT), "unsat": statuses.count(cegar.UNSAT),
               "budget_exhausted": statuses.count(cegar.BUDGET)}
    files = dict(q1.files)
    files["features.json"] = _dump(points)
    if regions:
        surface = risk.merge(regions, int(cfg.risk_threshold))
        files["risk_surface.csv"] = surface.to_csv()
        files["risk_summary.json"] = surface.summary_json()
        summary["risk"] = surface.summary()
        code = OK
    else:
        code = BUDGET_EXHAUSTED if summary["budget_exhausted"] else INFEASIBLE
    files["report.json"] = _dump(summary)
    return Report(code, files, summary)


def _q5(cfg: QueryConfig) -> Report:
    profile = _capacity_profile(cfg)
    sol = hypo.solve_flows(profile)
    if isinstance(sol, hypo.Infeasible):
        summary = {**_provenance(cfg), "feasible": False, "certificate": sol.to_dict()}
        return Report(INFEASIBLE, {"flows.json": hypo.dumps_result(sol), "report.json": _dump(summary)}, summary)
    template = _template(cfg)
    assignment = hypo.flows_to_constraints(sol, cfg.N, cfg.seed)
    alloc = cfg.allocator_config()
    budget = cfg.budget()
    others = [m for m in ("mem", "life") if m in cfg.free_models]
    models = ["cpu"] + others
    base_cs, prof = _constraints(cfg, models)

    # hypothetical model (M2) on the path-consistent labels
    hypo_cs = ConstraintSet([c for c in base_cs.counts if c.model != "cpu"], assignment.pins("cpu", which=2))
    hyp = anneal_search(template, hypo_cs, alloc, budget, models, cfg.metric, prof)

    # current model on the same scenario: same labels, predictions shifted by the model-1 offsets
    cur_pairs = {m: list(v) for m, v in hyp.best.pairs.items()}
    cur_pairs["cpu"] = [(lab, assignment.m1_prediction(i, lab)) for i, (lab, _) in enumerate(cur_pairs["cpu"])]
    current_same = ScenarioVar(template, cur_pairs)

    # unconstrained-by-flows search for the current model, seeded with the hypothetical incumbent
    cur = anneal_search(template, base_cs, alloc, budget, models, cfg.metric, prof, seeds=[hyp.best])

    hyp_replay = _replay(hyp.best.to_scenario(), alloc, cfg.metric)
    same_replay = _replay(current_same.to_scenario(), alloc, cfg.metric)
    cur_replay = _replay(cur.best.to_scenario(), alloc, cfg.metric)
    summary = {**_provenance(cfg), "feasible": True, "metric": cfg.metric,
               "path_counts": assignment.counts,
               "gap_hypothetical": hyp_replay["gap"],
               "gap_current_same_scenario": same_replay["gap"],
               "gap_current": cur_replay["gap"],
               "improvement": cur_replay["gap"] - hyp_replay["gap"]}
    files = {"flows.json": hypo.dumps_result(sol), "scenario_hypothetical.json": _dump(hyp.best.to_dict()),
             "scenario_current.json": _dump(cur.best.to_dict()), "report.json": _dump(summary)}
    return Report(OK, files, summary)


RUNNERS = {"Q1": _q1, "Q2": _q2, "Q3": _q3, "Q4": _q4, "Q5": _q5}


def run(cfg: QueryConfig) -> Report:
    """Validate then execute; module errors map to exit codes and never leave partial files."""
    diags = validate(cfg)
    if diags:
        return Report(CONFIG_ERROR, {}, {"errors": diags})
    try:
        return RUNNERS[cfg.query](cfg)
    except InfeasibleError as exc:
        return Report(INFEASIBLE, {}, {"errors": [f"search: {exc}"]})
    except BoundError as exc:
        return Report(CONFIG_ERROR, {}, {"errors": [f"constraints: {exc}"]})
    except (SearchError, ModelError, WorkloadError, hypo.FlowError, cegar.CegarError, risk.RiskError) as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        return Report(CONFIG_ERROR, {}, {"errors": [f"{module}: {exc}"]})


def write_report(report: Report, out_dir: str | Path) -> None:
    """Write every file of the bundle or none: stage in a sibling temp dir, then move into place."""
    out = Path(out_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".staging-", dir=out.parent))
    try:
        for name, text in report.files.items():
            (stage / name).write_text(text)
        out.mkdir(exist_ok=True)
        for name in report.files:
            os.replace(stage / name, out / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
