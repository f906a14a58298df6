"""Measurement-budget allocation across tuning tasks.

Each task owns one DAG and a latency history g(t) = best machine cost
after t granted units. A unit buys one evolution round plus a measured
batch. Units go to the task with the steepest estimated objective slope:
a blend of the observed backward difference and an optimistic projection,
clamped by what structurally similar tasks have already achieved. Four
objective kinds cover plain weighted latency, per-network deadlines, a
geometric-mean speedup target, and early-stopped latency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .annotate import AnnotationPolicy, sample_program
from .evolve import EvolutionConfig, EvolveStats, evolve
from .features import analyze_program
from .graph import ComputeDAG
from .ir import Program, naive_program
from .machine import (
    VALID,
    MachineSpec,
    MeasureLimits,
    MeasureResult,
    measure_batch,
)
from .model import CostModel, TrainHyper, TrainingRecord, attach_features, train
from .sketch import generate_sketches_traced

OBJECTIVE_KINDS = ("total-latency", "deadline", "geomean-speedup", "early-stop")


def dag_flops(dag: ComputeDAG) -> float:
    """Float operations of one whole naive execution."""
    total = 0.0
    for sa in analyze_program(naive_program(dag)):
        total += sa.ops_total
    return total


def rule_signature(dag: ComputeDAG) -> tuple[int, ...]:
    """Sorted ids of every derivation rule that fires somewhere in the
    DAG's sketch tree; tasks with equal signatures count as similar."""
    fired: set[int] = set()
    for _, path in generate_sketches_traced(dag):
        fired.update(path)
    return tuple(sorted(fired))


@dataclass
class Task:
    name: str
    dag: ComputeDAG
    weight: float = 1.0
    dnn: str = "net"
    flops: float = 0.0
    signature: tuple[int, ...] = ()
    sketches: list[Program] = field(default_factory=list, repr=False)
    # runtime state
    units: int = 0
    latency: list[float] = field(default_factory=list)
    naive_cost: float | None = None
    best_cost: float = math.inf
    best_program: Program | None = None

    def __post_init__(self) -> None:
        if self.weight < 1:
            raise ValueError("task weight must be >= 1")

    def speed(self) -> float | None:
        """Achieved float-op rate at the current best latency."""
        if not self.latency:
            return None
        return self.flops / self.latency[-1]


def make_task(name: str, dag: ComputeDAG, weight: float = 1.0,
              dnn: str = "net", structure: str = "SSRSRS") -> Task:
    sketches = [p for p, _ in generate_sketches_traced(dag, structure=structure)]
    if not sketches:
        raise ValueError(f"task {name}: no sketches derivable")
    return Task(name=name, dag=dag, weight=weight, dnn=dnn,
                flops=dag_flops(dag), signature=rule_signature(dag),
                sketches=sketches)


@dataclass(frozen=True)
class SchedulerParams:
    alpha: float = 0.2
    beta: float = 2.0
    backward_window: int = 1
    epsilon: float = 0.05
    early_stop_window: int = 8
    latency_limits: dict[str, float] = field(default_factory=dict)
    reference_latency: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0 <= self.alpha <= 1 or not 0 <= self.epsilon <= 1:
            raise ValueError("alpha and epsilon must lie in [0, 1]")
        if self.beta <= 0 or self.backward_window < 1:
            raise ValueError("need beta > 0 and a positive backward window")


@dataclass(frozen=True)
class Objective:
    kind: str = "total-latency"

    def __post_init__(self) -> None:
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(
                f"objective kind {self.kind!r} not one of {OBJECTIVE_KINDS}")


def early_stop_value(latency: list[float], window: int) -> float | None:
    """First latency that survived `window` rounds without improvement;
    None while the task is still making progress."""
    for t in range(window, len(latency)):
        if latency[t] >= latency[t - window]:
            return latency[t - window]
    return None


def _network_sums(tasks: list[Task]) -> dict[str, float]:
    sums: dict[str, float] = {}
    for t in tasks:
        if not t.latency:
            raise ValueError(f"task {t.name} has no latency observation")
        sums[t.dnn] = sums.get(t.dnn, 0.0) + t.weight * t.latency[-1]
    return sums


def objective_value(obj: Objective, tasks: list[Task],
                    params: SchedulerParams) -> float:
    sums = _network_sums(tasks)
    if obj.kind == "total-latency":
        return sum(sums.values())
    if obj.kind == "deadline":
        missing = [j for j in sums if j not in params.latency_limits]
        if missing:
            raise ValueError(f"deadline objective needs latency limits for {missing}")
        return sum(max(s, params.latency_limits[j]) for j, s in sums.items())
    if obj.kind == "geomean-speedup":
        prod = 1.0
        for j, s in sums.items():
            ref = params.reference_latency.get(j)
            if ref is None or ref <= 0:
                raise ValueError(f"geomean objective needs a positive reference for {j}")
            prod *= ref / s
        return -(prod ** (1.0 / len(sums)))
    # early-stop: contributions freeze once a task stops improving
    total = 0.0
    for t in tasks:
        es = early_stop_value(t.latency, params.early_stop_window)
        g = t.latency[-1]
        total += t.weight * (g if es is None else max(g, es))
    return total


def objective_partial(obj: Objective, tasks: list[Task], i: int,
                      params: SchedulerParams) -> float:
    """d objective / d g_i at the current state, closed form per kind."""
    task = tasks[i]
    if obj.kind == "total-latency":
        return task.weight
    if obj.kind == "deadline":
        sums = _network_sums(tasks)
        limit = params.latency_limits.get(task.dnn)
        if limit is None:
            raise ValueError(f"no latency limit for network {task.dnn}")
        return task.weight if sums[task.dnn] >= limit else 0.0
    if obj.kind == "geomean-speedup":
        sums = _network_sums(tasks)
        value = objective_value(obj, tasks, params)
        return -value * task.weight / (len(sums) * sums[task.dnn])
    es = early_stop_value(task.latency, params.early_stop_window)
    return 0.0 if es is not None else task.weight


def approx_gradient(tasks: list[Task], i: int, obj: Objective,
                    params: SchedulerParams) -> float:
    """Estimated change of the objective per extra unit granted to task i:
    the analytic latency-partial times a blend of the observed backward
    difference and an optimistic 1/t decay, the latter clamped by the best
    speed of structurally similar tasks."""
    task = tasks[i]
    t = task.units
    if t < 1 or len(task.latency) < 1:
        raise ValueError(f"task {task.name} not warmed up")
    g = task.latency[-1]

    dt = params.backward_window
    backward = 0.0
    if t > dt:
        backward = (task.latency[t - 1] - task.latency[t - 1 - dt]) / dt

    optimistic = -g / t
    best_speed = None
    for k, other in enumerate(tasks):
        if k == i or other.signature != task.signature:
            continue
        v = other.speed()
        if v is not None and (best_speed is None or v > best_speed):
            best_speed = v
    if best_speed is None or best_speed <= 0:
        decay = optimistic
    else:
        decay = min(optimistic, params.beta * task.flops / best_speed - g)

    blend = params.alpha * backward + (1.0 - params.alpha) * decay
    return objective_partial(obj, tasks, i, params) * blend


def next_task(tasks: list[Task], obj: Objective, params: SchedulerParams,
              rng: np.random.Generator) -> int:
    """Warmup covers every task once in index order; afterwards explore
    with probability epsilon, otherwise take the steepest |gradient|."""
    if not tasks:
        raise ValueError("no tasks")
    for i, t in enumerate(tasks):
        if t.units == 0:
            return i
    if rng.random() < params.epsilon:
        return int(rng.integers(len(tasks)))
    grads = np.asarray([abs(approx_gradient(tasks, i, obj, params))
                        for i in range(len(tasks))])
    return int(np.argmax(grads))


def gradient_vector(tasks: list[Task], obj: Objective,
                    params: SchedulerParams) -> list[float | None]:
    """Per-task slope estimates for audit; None until a task is warmed up."""
    return [approx_gradient(tasks, i, obj, params)
            if t.units >= 1 and t.latency else None
            for i, t in enumerate(tasks)]


# ---------------------------------------------------------------------------
# The tuning loop
# ---------------------------------------------------------------------------


@dataclass
class TuneSettings:
    batch_size: int = 16
    fresh_samples: int = 64
    evolution: EvolutionConfig = EvolutionConfig()
    policy: AnnotationPolicy = AnnotationPolicy()
    machine: MachineSpec = MachineSpec()
    limits: MeasureLimits = MeasureLimits()
    hyper: TrainHyper = TrainHyper()
    retrain: bool = True


@dataclass
class TuneResult:
    tasks: list[Task]
    model: CostModel
    records: list[TrainingRecord]
    units_spent: int
    objective_history: list[float] = field(default_factory=list)


def _renormalize(records: list[TrainingRecord], best: dict[str, float]) -> None:
    for rec in records:
        b = best.get(rec.dag_id)
        if rec.cost is None or b is None or not math.isfinite(rec.cost):
            rec.y = 0.0
        else:
            rec.y = b / rec.cost


def tune(tasks: list[Task], obj: Objective, budget: int,
         settings: TuneSettings, params: SchedulerParams, seed: int,
         log_sink=None) -> TuneResult:
    """Spend `budget` units across the tasks. Unit = evolve + measure a
    batch + retrain the shared model + extend the owner's latency history.
    Deterministic for a given seed."""
    if budget < len(tasks):
        raise ValueError("budget must cover one warmup unit per task")

    records: list[TrainingRecord] = []
    best: dict[str, float] = {}
    model = CostModel()
    result = TuneResult(tasks=tasks, model=model, records=records, units_spent=0)

    def emit(payload: dict) -> None:
        if log_sink is not None:
            log_sink(payload)

    def snapshot() -> dict:
        return {
            "allocation": {t.name: t.units for t in tasks},
            "best": {t.name: (None if math.isinf(t.best_cost) else t.best_cost)
                     for t in tasks},
        }

    def absorb(task: Task, programs: list[Program], preds: list[float],
               results: list[MeasureResult], iteration: int) -> None:
        for program, pred, res in zip(programs, preds, results):
            if res.status == VALID and res.cost < task.best_cost:
                task.best_cost = res.cost
                task.best_program = program
            rec = TrainingRecord(task.name, program.history, 0.0,
                                 cost=res.cost if res.status == VALID else math.inf,
                                 program=program)
            if res.status == VALID:
                attach_features(rec, program)
            records.append(rec)
            emit({"kind": "measure", "iteration": iteration, "task": task.name,
                  "history": program.history, "predicted": pred,
                  "cost": res.cost, "status": res.status, **snapshot()})
        best[task.name] = task.best_cost

    # Iteration 0: the naive program anchors best-so-far and speedups.
    for task in tasks:
        naive = naive_program(task.dag)
        res = measure_batch([naive], settings.machine, settings.limits)[0]
        task.naive_cost = res.cost
        absorb(task, [naive], [0.0], [res], 0)

    for unit in range(1, budget + 1):
        rng = np.random.default_rng((seed, unit))
        grads = gradient_vector(tasks, obj, params)
        i = next_task(tasks, obj, params, rng)
        task = tasks[i]

        measured = [rec for rec in records
                    if rec.dag_id == task.name and rec.cost is not None
                    and math.isfinite(rec.cost) and rec.program is not None]
        measured.sort(key=lambda r: r.cost)
        pop = settings.evolution.population
        n_fresh = max(int(math.ceil(pop * settings.evolution.epsilon)),
                      pop - len(measured))
        n_fresh = min(n_fresh, settings.fresh_samples, pop)
        seeds_best = [rec.program for rec in measured[: pop - n_fresh]]
        fresh = [sample_program(task.sketches[int(rng.integers(len(task.sketches)))],
                                settings.policy, rng)
                 for _ in range(n_fresh)]
        initial = seeds_best + fresh

        evo = replace(settings.evolution, seed=(seed * 1_000_003 + unit) % 2 ** 62)
        stats = EvolveStats()
        top = evolve(initial, model, evo, stats=stats)
        batch = [c.program for c in top[: settings.batch_size]]
        preds = [c.fitness for c in top[: settings.batch_size]]

        results = measure_batch(batch, settings.machine, settings.limits,
                                best_cost=None if math.isinf(task.best_cost)
                                else task.best_cost)
        task.units += 1
        absorb(task, batch, preds, results, unit)
        task.latency.append(task.best_cost)
        emit({"kind": "evolution", "iteration": unit, "task": task.name,
              "gradients": {t.name: g for t, g in zip(tasks, grads)},
              "generation_best": stats.generation_best,
              "generation_median": stats.generation_median,
              "infeasible_crossovers": stats.infeasible_crossovers,
              "crossovers": stats.crossovers, "mutations": stats.mutations,
              **snapshot()})

        if settings.retrain:
            _renormalize(records, best)
            usable = [r for r in records if r.y > 0 and r.feats is not None]
            if usable:
                model = train(usable, settings.hyper)
                result.model = model

        result.units_spent = unit
        if all(t.latency for t in tasks):
            result.objective_history.append(objective_value(obj, tasks, params))

    return result
