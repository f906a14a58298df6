"""Deterministic analytical machine model and the measurement harness.

Cost stands in for wall-clock time so runs are reproducible anywhere.
Per innermost statement the model charges compute (discounted by vector
lanes and threads), memory (missed cache lines times a penalty, divided
by threads), and per-iteration loop overhead (waived for iterations the
unroll budget covers). Misses are footprint lines scaled up for every
loop that re-traverses a working set too big for the modeled cache.

measure_batch is the seam where a real timing backend would plug in: it
validates, spot-checks semantics on a shrunken twin of the workload, and
prices the program.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .annotate import prime_factors, rewrite_constant_layout
from .features import StatementAnalysis, analyze_program
from .graph import ComputeDAG, ComputeNode, topological_order
from .expr import reads
from .interp import InterpreterError, interpret, random_inputs, reference_outputs
from .ir import (
    IRError, LayoutRewrite, Program, Rfactor, Split, apply_step,
    naive_program, validate,
)

VALID = "valid"
INVALID = "invalid"
TIMEOUT = "timeout"


@dataclass(frozen=True)
class MachineSpec:
    cores: int = 8
    vector_lanes: int = 8
    miss_penalty: float = 8.0
    loop_overhead: float = 0.5
    cache_bytes: int = 32 * 1024

    def __post_init__(self) -> None:
        if min(self.cores, self.vector_lanes) < 1 or self.miss_penalty <= 0 \
                or self.loop_overhead <= 0 or self.cache_bytes <= 0:
            raise ValueError("machine spec fields must be positive")


@dataclass(frozen=True)
class MeasureResult:
    cost: float
    throughput: float
    status: str
    detail: str = ""


def _statement_cost(sa: StatementAnalysis, spec: MachineSpec) -> float:
    lanes = 1
    own = sa.nest[sa.own_start:]
    if own and own[-1].annotation == "vectorize" and own[-1].lin_stride == 1:
        lanes = spec.vector_lanes

    threads = 1
    for l in sa.nest:
        if l.annotation == "parallel":
            threads = min(l.extent, spec.cores)
            break

    flops = sa.ops_total * sa.total_iters
    compute = flops / (lanes * threads)

    missed = 0.0
    for a in sa.accesses:
        lines = a.unique_lines
        for pos, l in enumerate(sa.nest):
            if l.id in a.present or l.extent <= 1:
                continue
            if sa.ws_inside[pos] > spec.cache_bytes:
                lines *= l.extent
        missed += lines
    memory = missed * spec.miss_penalty / threads

    # Iteration overhead for every loop level outside the unrolled tail.
    overhead = 0.0
    cum = 1.0
    boundary = len(sa.nest)
    prod = 1
    for i in range(len(sa.nest) - 1, sa.own_start - 1, -1):
        if prod * sa.nest[i].extent > sa.pragma_unroll:
            break
        prod *= sa.nest[i].extent
        boundary = i
    for i, l in enumerate(sa.nest):
        cum *= l.extent
        if i < boundary:
            overhead += cum
    overhead *= spec.loop_overhead

    return compute + memory + overhead


def machine_cost(p: Program, spec: MachineSpec = MachineSpec()) -> float:
    return sum(_statement_cost(sa, spec) for sa in analyze_program(p))


# ---------------------------------------------------------------------------
# Shrunken-twin equivalence check
# ---------------------------------------------------------------------------


def shrink_dag(dag: ComputeDAG, cap: int = 8) -> ComputeDAG:
    """A small but read-consistent twin: compute extents drop to ≤ cap,
    then producer extents grow back just enough to cover every shrunken
    consumer's read hull."""
    required: dict[str, list[int]] = {}
    sized: dict[str, ComputeNode] = {}
    for name in topological_order(dag):
        node = next(n for n in dag.nodes if n.name == name)
        if node.is_placeholder:
            req = required.get(name)
            space = tuple(
                (it, req[d] if req else min(e, cap))
                for d, (it, e) in enumerate(node.space))
            sized[name] = replace(node, space=space)
            continue
        req = required.get(name, [1] * len(node.space))
        space = tuple((it, max(min(e, cap), req[d]))
                      for d, (it, e) in enumerate(node.space))
        reduce = tuple((it, min(e, cap)) for it, e in node.reduce)
        shrunk = replace(node, space=space, reduce=reduce)
        sized[name] = shrunk
        ranges = {it: (0, e - 1) for it, e in (*space, *reduce)}
        for r in reads(node.body):
            need = required.setdefault(r.buffer, [1] * len(r.index))
            for d, lin in enumerate(r.index):
                _, hi = lin.interval(ranges)
                need[d] = max(need[d], hi + 1)
    return ComputeDAG(tuple(sized[n.name] for n in dag.nodes))


def _remap_factor(old: int, new_extent: int) -> int:
    return math.gcd(old, new_extent)


def remap_history(history, dag: ComputeDAG) -> Program:
    """Re-play a rewrite history against a differently sized DAG, re-dealing
    split factors so products match the new loop extents. Packing
    descriptors are re-derived in place of the first recorded rewrite
    (their extents are meaningless on the twin)."""
    p = naive_program(dag)
    layout_done = False
    for step in history:
        if isinstance(step, Split):
            ext = p.stage(step.stage).loop(step.loop).extent
            nparts = len(step.inner) + 1
            parts = [1] * nparts
            i = 0
            for f in prime_factors(ext):
                parts[i % nparts] *= f
                i += 1
            step = Split(step.stage, step.loop, tuple(parts[1:]))
        elif isinstance(step, Rfactor):
            ext = p.stage(step.stage).loop(step.loop).extent
            f = _remap_factor(step.factor or 1, ext)
            step = Rfactor(step.stage, step.loop, f)
        elif isinstance(step, LayoutRewrite):
            if not layout_done:
                p = rewrite_constant_layout(p)
                layout_done = True
            continue
        p = apply_step(p, step)
    return p


# Full-size fallback ceiling: total computed iterations, space times reduce.
FULL_CHECK_VOLUME = 1 << 25


def _domain_volume(dag: ComputeDAG) -> int:
    total = 0
    for n in dag.nodes:
        if n.is_placeholder:
            continue
        v = 1
        for _, e in (*n.space, *n.reduce):
            v *= e
        total += v
    return total


def _check_outputs(p: Program, dag: ComputeDAG, tol: float,
                   seed: int) -> str | None:
    rng = np.random.default_rng(seed)
    inputs = random_inputs(dag, rng)
    try:
        got = interpret(p, inputs)
    except InterpreterError as e:
        return str(e)
    want = reference_outputs(dag, inputs)
    for name, ref in want.items():
        g = got[name]
        denom = np.maximum(np.abs(ref), 1e-30)
        err = float(np.max(np.abs(g - ref) / denom))
        if not np.isfinite(err) or err > tol:
            return f"output {name} differs from reference (max rel err {err:.3g})"
    return None


def spot_check(p: Program, cap: int = 8, tol: float = 1e-5,
               seed: int = 0) -> str | None:
    """Interpreter-equivalence check on the shrunken twin. Returns an error
    description, or None when outputs agree.

    Histories that fold loops away and then transform the survivors can
    fail to replay once split factors are re-dealt for the twin's extents;
    that replay failure says nothing about the candidate, so such programs
    are checked at full size instead (skipped past a volume ceiling)."""
    twin_dag = shrink_dag(p.dag, cap)
    try:
        twin = remap_history(p.history, twin_dag)
    except IRError:
        if _domain_volume(p.dag) <= FULL_CHECK_VOLUME:
            bad = validate(p)
            if bad:
                return f"fails validation: {bad[0]}"
            return _check_outputs(p, p.dag, tol, seed)
        return None
    bad = validate(twin)
    if bad:
        return f"twin fails validation: {bad[0]}"
    return _check_outputs(twin, twin_dag, tol, seed)


# ---------------------------------------------------------------------------
# Batch measurement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasureLimits:
    cost_ceiling: float | None = None
    check_cap: int = 8
    check_tol: float = 1e-5
    check_seed: int = 0


def measure_batch(programs: list[Program], spec: MachineSpec = MachineSpec(),
                  limits: MeasureLimits = MeasureLimits(),
                  best_cost: float | None = None) -> list[MeasureResult]:
    """Validate, spot-check, and price each program. Throughput is
    normalized against the best valid cost seen (carry `best_cost` across
    batches for a stable scale)."""
    results: list[MeasureResult] = []
    costs: list[float | None] = []
    for p in programs:
        bad = validate(p)
        if bad:
            results.append(MeasureResult(math.inf, 0.0, INVALID, bad[0]))
            costs.append(None)
            continue
        err = spot_check(p, limits.check_cap, limits.check_tol, limits.check_seed)
        if err is not None:
            results.append(MeasureResult(math.inf, 0.0, INVALID, err))
            costs.append(None)
            continue
        cost = machine_cost(p, spec)
        if limits.cost_ceiling is not None and cost >= limits.cost_ceiling:
            results.append(MeasureResult(cost, 0.0, TIMEOUT))
            costs.append(None)
            continue
        results.append(MeasureResult(cost, 0.0, VALID))
        costs.append(cost)

    valid = [c for c in costs if c is not None]
    if best_cost is not None:
        valid.append(best_cost)
    if not valid:
        return results
    best = min(valid)
    return [
        replace(r, throughput=best / c) if c is not None else r
        for r, c in zip(results, costs)
    ]
