"""Command-line entry point: run, validate, gen-workload, encode, flows."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import hypo, queries
from .dpbfr import AllocatorConfig, simulate
from .dpbfr_milp import encode_constraints
from .lgbm_milp import encode as encode_lgbm
from .models import ModelError, load_model, save_model
from .search import scenario_from_dict
from .synth import generate_workload, noisy_model
from .workload import Scenario, WorkloadError, dump_workload, ground_truth_predictions, load_workload

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_BUDGET = 0, 2, 3, 4


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_run(args) -> int:
    try:
        cfg = queries.load_config(args.config)
    except queries.ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed
    report = queries.run(cfg)
    for line in report.summary.get("errors", []):
        _err(line)
    if report.files:
        out = Path(args.out) if args.out else cfg.path(cfg.output_dir)
        queries.write_report(report, out)
        print(json.dumps({k: v for k, v in report.summary.items() if k not in ("system", "baseline", "risk")},
                         sort_keys=True))
    return report.code


def cmd_validate(args) -> int:
    try:
        cfg = queries.load_config(args.config)
    except queries.ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    diags = queries.validate(cfg)
    for d in diags:
        print(d)
    if diags:
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


def cmd_gen_workload(args) -> int:
    vms = generate_workload(args.n, args.horizon, args.seed, n_features=args.features)
    dump_workload(vms, args.out)
    if args.model_out:
        save_model(noisy_model(vms, "cpu", args.model_error, args.seed), args.model_out)
    return EXIT_OK


def _allocator(path: str | None) -> AllocatorConfig:
    if not path:
        return AllocatorConfig(pool_mode="fixed")
    return AllocatorConfig.from_dict(json.loads(Path(path).read_text()))


def cmd_encode(args) -> int:
    try:
        if args.kind == "lgbm":
            if not args.model:
                _err("encode lgbm needs --model")
                return EXIT_CONFIG
            text = encode_lgbm(load_model(args.model)).to_lp("lgbm inference")
        else:
            cfg = _allocator(args.allocator)
            if args.scenario:
                scenario = scenario_from_dict(json.loads(Path(args.scenario).read_text()))
            elif args.workload:
                vms = load_workload(args.workload)
                scenario = Scenario(tuple(vms), tuple(ground_truth_predictions(vm) for vm in vms), args.horizon)
            else:
                _err("encode dpbfr needs --scenario or --workload")
                return EXIT_CONFIG
            enc = encode_constraints(scenario, cfg)
            text = enc.to_lp("dpbfr placement")
            if args.check:
                from .dpbfr_milp import verify_trace

                trace, _ = simulate(scenario, cfg)
                bad = verify_trace(enc, trace)
                if bad:
                    _err(f"{len(bad)} constraints violated by the simulated trace, first: {bad[0]}")
                    return EXIT_INFEASIBLE
    except (ModelError, WorkloadError, ValueError, KeyError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    Path(args.out).write_text(text)
    return EXIT_OK


def cmd_flows(args) -> int:
    try:
        profile = hypo.load_profile(args.profile)
    except (hypo.FlowError, OSError, ValueError, KeyError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    result = hypo.solve_flows(profile)
    text = hypo.dumps_result(result)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_INFEASIBLE if isinstance(result, hypo.Infeasible) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="allocgap", description="Adversarial gap analysis of ML-driven VM allocation.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a Q1..Q5 query config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: output_dir from the config)")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="dry-run checks of a query config")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)

    g = sub.add_parser("gen-workload", help="write a seeded synthetic workload")
    g.add_argument("--n", type=int, default=60)
    g.add_argument("--horizon", type=int, default=36)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--features", type=int, default=3)
    g.add_argument("--out", required=True)
    g.add_argument("--model-out", help="also write a CPU model that errs on a fraction of the workload")
    g.add_argument("--model-error", type=float, default=0.3)
    g.set_defaults(func=cmd_gen_workload)

    e = sub.add_parser("encode", help="emit DPBFR or tree-ensemble constraints in LP format")
    e.add_argument("kind", choices=("dpbfr", "lgbm"))
    e.add_argument("--model")
    e.add_argument("--scenario", help="scenario JSON as written by `run`")
    e.add_argument("--workload", help="workload JSON (ground-truth predictions)")
    e.add_argument("--horizon", type=int, default=36)
    e.add_argument("--allocator", help="allocator config JSON (pool_mode must be fixed)")
    e.add_argument("--check", action="store_true", help="substitute the simulated trace and report violations")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    f = sub.add_parser("flows", help="solve the hypothetical-model flow LP")
    f.add_argument("profile")
    f.add_argument("--out")
    f.set_defaults(func=cmd_flows)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
