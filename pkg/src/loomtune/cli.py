"""Operator commands: run tuning jobs, audit their logs, grade the model.

The tuning log is the contract between commands.  `tune` writes a header
record describing the tasks and machine followed by one record per
measured program, so `replay`, `export-curve`, and `eval-model` need
nothing but the log file.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from .annotate import AnnotationPolicy
from .evolve import EvolutionConfig
from .ir import replay
from .logio import LogError, iter_records, measurements, open_writer, record_history
from .machine import VALID, MachineSpec, MeasureLimits, measure_batch
from .model import TrainHyper, TrainingRecord, attach_features, eval_metrics, train
from .sched import (
    OBJECTIVE_KINDS,
    Objective,
    SchedulerParams,
    Task,
    TuneSettings,
    make_task,
    objective_value,
    tune,
)
from .workloads import REGISTRY, build

ENV_SEED = "LOOMTUNE_SEED"

_TASK_KEYS = {"workload", "name", "params", "weight", "dnn"}
_TOP_KEYS = {
    "tasks", "budget", "seed", "objective", "structure", "batch_size",
    "fresh_samples", "retrain", "evolution", "training", "scheduler",
    "machine", "limits", "policy",
}


class ConfigError(Exception):
    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


def _sub_config(cls, data: dict, where: str, problems: list[str]):
    """Build a config dataclass from a JSON object, naming bad fields."""
    if not isinstance(data, dict):
        problems.append(f"{where}: must be an object")
        return cls()
    known = {f.name for f in fields(cls)}
    clean = {}
    for key, value in data.items():
        if key not in known:
            problems.append(f"{where}.{key}: unknown field")
            continue
        if isinstance(value, list):
            value = tuple(value)
        clean[key] = value
    try:
        return cls(**clean)
    except (TypeError, ValueError) as err:
        problems.append(f"{where}: {err}")
        return cls()


def _parse_config(cfg: dict, args: argparse.Namespace):
    """Resolve config + flag overrides + LOOMTUNE_SEED into run inputs."""
    problems: list[str] = []
    if not isinstance(cfg, dict):
        raise ConfigError(["config: top level must be a JSON object"])
    for key in cfg:
        if key not in _TOP_KEYS:
            problems.append(f"{key}: unknown field")

    task_specs = []
    raw_tasks = cfg.get("tasks")
    if not isinstance(raw_tasks, list) or not raw_tasks:
        problems.append("tasks: a non-empty list of task objects is required")
        raw_tasks = []
    names_seen = set()
    for i, entry in enumerate(raw_tasks):
        where = f"tasks[{i}]"
        if not isinstance(entry, dict):
            problems.append(f"{where}: must be an object")
            continue
        for key in entry:
            if key not in _TASK_KEYS:
                problems.append(f"{where}.{key}: unknown field")
        workload = entry.get("workload")
        if workload not in REGISTRY:
            problems.append(
                f"{where}.workload: unknown workload {workload!r} "
                f"(available: {', '.join(sorted(REGISTRY))})")
            continue
        defaults = REGISTRY[workload].defaults
        params = entry.get("params", {})
        if not isinstance(params, dict):
            problems.append(f"{where}.params: must be an object")
            params = {}
        for key in params:
            if key not in defaults:
                problems.append(
                    f"{where}.params.{key}: unknown parameter for {workload}")
        params = {k: v for k, v in params.items() if k in defaults}
        name = entry.get("name", workload)
        if name in names_seen:
            problems.append(f"{where}.name: duplicate task name {name!r}")
        names_seen.add(name)
        weight = entry.get("weight", 1.0)
        if not isinstance(weight, (int, float)) or weight < 1:
            problems.append(f"{where}.weight: must be a number >= 1")
            weight = 1.0
        task_specs.append({
            "name": name, "workload": workload,
            "params": {**defaults, **params},
            "weight": float(weight), "dnn": entry.get("dnn", "net"),
        })

    budget = cfg.get("budget")
    if args.budget is not None:
        budget = args.budget
    if not isinstance(budget, int) or budget < 1:
        problems.append("budget: a positive integer is required")
        budget = len(task_specs) or 1
    elif task_specs and budget < len(task_specs):
        problems.append(
            f"budget: {budget} cannot cover one warmup unit for each of "
            f"{len(task_specs)} tasks")

    kind = cfg.get("objective", "total-latency")
    if args.objective is not None:
        kind = args.objective
    if kind not in OBJECTIVE_KINDS:
        problems.append(
            f"objective: {kind!r} is not one of {', '.join(OBJECTIVE_KINDS)}")
        kind = "total-latency"

    seed = cfg.get("seed", 0)
    if args.seed is not None:
        seed = args.seed
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            problems.append(f"{ENV_SEED}: {env_seed!r} is not an integer")
    if not isinstance(seed, int):
        problems.append("seed: must be an integer")
        seed = 0

    structure = cfg.get("structure", "SSRSRS")
    if not isinstance(structure, str) or not structure:
        problems.append("structure: must be a non-empty string")
        structure = "SSRSRS"

    settings = TuneSettings(
        evolution=_sub_config(EvolutionConfig, cfg.get("evolution", {}),
                              "evolution", problems),
        policy=_sub_config(AnnotationPolicy, cfg.get("policy", {}),
                           "policy", problems),
        machine=_sub_config(MachineSpec, cfg.get("machine", {}),
                            "machine", problems),
        limits=_sub_config(MeasureLimits, cfg.get("limits", {}),
                           "limits", problems),
        hyper=_sub_config(TrainHyper, cfg.get("training", {}),
                          "training", problems),
    )
    for key, lo in (("batch_size", 1), ("fresh_samples", 0)):
        value = cfg.get(key)
        if value is None:
            continue
        if not isinstance(value, int) or value < lo:
            problems.append(f"{key}: must be an integer >= {lo}")
        else:
            setattr(settings, key, value)
    retrain = cfg.get("retrain", True)
    if not isinstance(retrain, bool):
        problems.append("retrain: must be true or false")
    else:
        settings.retrain = retrain

    params = _sub_config(SchedulerParams, cfg.get("scheduler", {}),
                         "scheduler", problems)
    if problems:
        raise ConfigError(problems)
    return task_specs, budget, Objective(kind), seed, structure, settings, params


def _load_log(path: str):
    records = list(iter_records(path))
    if not records or records[0].get("kind") != "header":
        raise LogError("log has no header record")
    header = records[0]
    dags = {t["name"]: build(t["workload"], **t["params"])
            for t in header["tasks"]}
    return header, records, dags


def cmd_tune(args: argparse.Namespace) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as err:
        print(f"config: {err}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as err:
        print(f"config: not valid JSON: {err}", file=sys.stderr)
        return 2
    try:
        task_specs, budget, obj, seed, structure, settings, params = \
            _parse_config(cfg, args)
    except ConfigError as err:
        for problem in err.problems:
            print(f"config: {problem}", file=sys.stderr)
        return 2

    try:
        tasks = [make_task(t["name"], build(t["workload"], **t["params"]),
                           weight=t["weight"], dnn=t["dnn"], structure=structure)
                 for t in task_specs]
    except ValueError as err:
        print(f"tuning aborted: {err}", file=sys.stderr)
        return 1

    with open_writer(args.out, seed) as writer:
        writer.write({
            "kind": "header", "objective": obj.kind, "budget": budget,
            "structure": structure, "tasks": task_specs,
            "machine": asdict(settings.machine),
            "limits": asdict(settings.limits),
            "training": asdict(settings.hyper),
            "params": asdict(params),
        })
        result = tune(tasks, obj, budget, settings, params, seed,
                      log_sink=writer.write)
        count = writer.count

    for task in result.tasks:
        speedup = task.naive_cost / task.best_cost
        print(f"task {task.name}: best cost {task.best_cost:.6g}, "
              f"naive {task.naive_cost:.6g}, speedup {speedup:.2f}x, "
              f"units {task.units}")
    final = objective_value(obj, result.tasks, params)
    print(f"objective {obj.kind}: {final:.6g}")
    print(f"log: {count} records -> {args.out}")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    header, records, dags = _load_log(args.log)
    machine = MachineSpec(**header["machine"])
    limits = MeasureLimits(**header["limits"])
    checked = 0
    mismatches = 0
    for rec in measurements(records):
        program = replay(dags[rec["task"]], record_history(rec))
        res = measure_batch([program], machine, limits)[0]
        logged = rec["cost"]
        cost_ok = (logged is None and not math.isfinite(res.cost)) or \
                  (logged is not None and res.cost == logged)
        if res.status != rec["status"] or not cost_ok:
            mismatches += 1
            print(f"mismatch at iteration {rec['iteration']} task {rec['task']}: "
                  f"logged cost={logged} status={rec['status']}, "
                  f"measured cost={res.cost:.6g} status={res.status}")
        checked += 1
    if mismatches:
        print(f"replayed {checked} measurements: {mismatches} mismatches")
        return 1
    print(f"replayed {checked} measurements: clean")
    return 0


def cmd_export_curve(args: argparse.Namespace) -> int:
    header, records, dags = _load_log(args.log)
    obj = Objective(header["objective"])
    params = SchedulerParams(**header["params"])
    info = {t["name"]: t for t in header["tasks"]}
    closed: dict[str, list[float]] = {name: [] for name in info}
    current: dict[str, float] = {}

    def objective_now() -> float | str:
        if len(current) < len(info):
            return ""
        tasks = []
        for name, spec in info.items():
            t = Task(name=name, dag=None, weight=spec["weight"], dnn=spec["dnn"])
            t.latency = closed[name] + [current[name]]
            tasks.append(t)
        return objective_value(obj, tasks, params)

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "task", "best_cost", "objective"])
        rows = 0
        for rec in records:
            name = rec.get("task")
            if rec["kind"] == "measure":
                current[name] = rec["best"][name]
                out.writerow([rec["iteration"], name, rec["best"][name],
                              objective_now()])
                rows += 1
            elif rec["kind"] == "evolution":
                closed[name].append(rec["best"][name])
    print(f"wrote {rows} rows -> {args.out}")
    return 0


def cmd_eval_model(args: argparse.Namespace) -> int:
    header, records, dags = _load_log(args.log)
    valid = [rec for rec in measurements(records)
             if rec["status"] == VALID and rec["cost"]]
    if len(valid) < 50:
        print(f"eval-model needs at least 50 valid measurements, "
              f"log has {len(valid)}", file=sys.stderr)
        return 1
    best: dict[str, float] = {}
    for rec in valid:
        best[rec["task"]] = min(best.get(rec["task"], math.inf), rec["cost"])
    dataset = []
    for rec in valid:
        program = replay(dags[rec["task"]], record_history(rec))
        record = TrainingRecord(rec["task"], program.history,
                                best[rec["task"]] / rec["cost"])
        attach_features(record, program)
        dataset.append(record)

    rng = np.random.default_rng(args.split_seed)
    order = rng.permutation(len(dataset))
    n_train = int(len(dataset) * 0.8)
    trainset = [dataset[i] for i in order[:n_train]]
    testset = [dataset[i] for i in order[n_train:]]
    if args.k > len(testset):
        print(f"eval-model: k={args.k} exceeds the held-out split "
              f"({len(testset)} programs)", file=sys.stderr)
        return 1
    model = train(trainset, TrainHyper(**header["training"]))
    metrics = eval_metrics(model, testset, args.k)
    print(f"train/test split: {len(trainset)}/{len(testset)} "
          f"(split seed {args.split_seed})")
    print(f"rmse {metrics['rmse']:.6g}")
    print(f"r2 {metrics['r2']:.6g}")
    print(f"pairwise {metrics['pairwise_accuracy']:.6g}")
    print(f"recall@{args.k} {metrics['recall_at_k']:.6g}")
    return 0


def cmd_list_workloads(args: argparse.Namespace) -> int:
    for name in sorted(REGISTRY):
        spec = REGISTRY[name]
        params = ", ".join(f"{k}={v}" for k, v in spec.defaults.items())
        print(f"{name}({params})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loomtune",
        description="Search-based tensor program tuning on a deterministic "
                    "machine model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list-workloads", help="print the workload registry")
    p.set_defaults(func=cmd_list_workloads)

    p = sub.add_parser("tune", help="run a tuning job from a JSON config")
    p.add_argument("--config", required=True, help="JSON config path")
    p.add_argument("--out", required=True, help="NDJSON log path to write")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--budget", type=int, help="override the config budget")
    p.add_argument("--objective", help="override the config objective kind")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("replay", help="re-measure every record in a log")
    p.add_argument("log")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("export-curve", help="write a tuning curve as CSV")
    p.add_argument("log")
    p.add_argument("--out", required=True, help="CSV path to write")
    p.set_defaults(func=cmd_export_curve)

    p = sub.add_parser("eval-model", help="train on 80% of a log, grade on 20%")
    p.add_argument("log")
    p.add_argument("--k", type=int, default=10, help="top-k for recall")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_model)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LogError as err:
        print(f"log error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(str(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
