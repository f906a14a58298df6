"""Evolutionary refinement of annotated programs under a learned fitness.

Parents are drawn proportionally to predicted throughput. Children come
from four rewrite-history mutations (tile sizes, parallel granularity,
unroll pragma, compute location) or from node-wise crossover of two
histories. Every operator manipulates the rewrite history and replays it,
so a child is a well-formed program by construction or it is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .annotate import (
    compute_location_candidates,
    divisors,
    flexible_stages,
    move_compute_location,
    refresh_constant_layouts,
)
from .graph import topological_order
from .ir import (
    Annotate,
    ComputeAt,
    Fuse,
    IRError,
    LayoutRewrite,
    Program,
    RewriteStep,
    SetPragma,
    Simplify,
    Split,
    apply_step,
    naive_program,
    replay,
    simplify,
    validate,
)
from .model import CostModel

SPACE = "space"
FITNESS_FLOOR = 1e-10


class NotApplicable:
    """Marker returned by a mutation whose preconditions the program
    does not meet; the caller picks a different operator."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "NotApplicable"


NOT_APPLICABLE = NotApplicable()


@dataclass(frozen=True)
class Infeasible:
    """Crossover outcome whose merged history broke validation."""

    reason: str = ""


@dataclass(frozen=True)
class EvolutionConfig:
    population: int = 128
    generations: int = 4
    mutation_prob: float = 0.85
    crossover_prob: float = 0.15
    operator_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    k: int = 16
    epsilon: float = 0.05
    seed: int = 0
    unroll_values: tuple[int, ...] = (0, 16, 64, 512)
    validate_fraction: float = 0.01

    def __post_init__(self) -> None:
        if abs(self.mutation_prob + self.crossover_prob - 1.0) > 1e-9:
            raise ValueError("mutation and crossover probabilities must sum to 1")
        if not 0 < self.k <= self.population:
            raise ValueError("need 0 < k <= population")
        if min(self.operator_weights) < 0 or sum(self.operator_weights) <= 0:
            raise ValueError("operator weights must be nonnegative and not all zero")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must be a fraction")


@dataclass(frozen=True)
class Candidate:
    program: Program
    fitness: float


@dataclass
class EvolveStats:
    generation_best: list[float] = field(default_factory=list)
    generation_median: list[float] = field(default_factory=list)
    crossovers: int = 0
    infeasible_crossovers: int = 0
    mutations: int = 0
    copied_parents: int = 0
    uniform_fallbacks: int = 0
    not_applicable: dict[str, int] = field(default_factory=dict)
    validated: int = 0


def select_parent(population: list[Candidate], rng: np.random.Generator,
                  stats: EvolveStats | None = None) -> Candidate:
    """Fitness-proportional draw, fitness floored at a tiny positive value;
    degenerates to uniform when nothing has positive fitness."""
    if not population:
        raise ValueError("empty population")
    fits = np.asarray([c.fitness for c in population], dtype=np.float64)
    if not np.isfinite(fits).all():
        raise ValueError("non-finite fitness")
    if fits.max() <= 0:
        if stats is not None:
            stats.uniform_fallbacks += 1
        return population[int(rng.integers(len(population)))]
    fits = np.maximum(fits, FITNESS_FLOOR)
    return population[int(rng.choice(len(population), p=fits / fits.sum()))]


# ---------------------------------------------------------------------------
# Mutations
# ---------------------------------------------------------------------------


def _split_sites(program: Program) -> list[tuple[int, int]]:
    """(history index, pre-split extent) of every concrete Split."""
    p = naive_program(program.dag)
    sites = []
    for idx, st in enumerate(program.history):
        if isinstance(st, Split) and all(f is not None for f in st.inner):
            ext = p.stage(st.stage).loop(st.loop).extent
            if ext is not None:
                sites.append((idx, ext))
        p = apply_step(p, st)
    return sites


def mutate_tile_size(program: Program, rng: np.random.Generator,
                     tries: int = 16) -> Program | NotApplicable:
    """Move a factor between two levels of one split, keeping the product."""
    sites = _split_sites(program)
    if not sites:
        return NOT_APPLICABLE
    for _ in range(tries):
        idx, ext = sites[int(rng.integers(len(sites)))]
        st: Split = program.history[idx]
        inner = list(st.inner)
        prod = 1
        for f in inner:
            prod *= f
        if prod == 0 or ext % prod:
            continue
        parts = [ext // prod, *inner]
        movable = [i for i, v in enumerate(parts) if v > 1]
        if not movable or len(parts) < 2:
            continue
        src = movable[int(rng.integers(len(movable)))]
        divs = [d for d in divisors(parts[src]) if d > 1]
        f = divs[int(rng.integers(len(divs)))]
        others = [i for i in range(len(parts)) if i != src]
        dst = others[int(rng.integers(len(others)))]
        parts[src] //= f
        parts[dst] *= f
        hist = (program.history[:idx]
                + (replace(st, inner=tuple(parts[1:])),)
                + program.history[idx + 1:])
        try:
            q = replay(program.dag, hist)
            if q.layouts:
                q = refresh_constant_layouts(q)
        except IRError:
            continue
        if validate(q):
            continue
        return q
    return NOT_APPLICABLE


def _parallel_loops(p: Program) -> list[tuple[str, str]]:
    return [(s.name, l.id) for s in p.live_stages() for l in s.loops
            if l.annotation == "parallel"]


def mutate_parallel(program: Program, rng: np.random.Generator,
                    tries: int = 8) -> Program | NotApplicable:
    """Coarsen or refine a parallel loop: fuse it with a space neighbor,
    or split off a serial inner part, keeping Parallel on the outer."""
    locs = _parallel_loops(program)
    if not locs:
        return NOT_APPLICABLE
    for _ in range(tries):
        sname, lid = locs[int(rng.integers(len(locs)))]
        s = program.stage(sname)
        i = s.loop_index(lid)
        loop = s.loops[i]
        attached_here = {t.compute_at[1] for t in program.attached_to(sname)}

        actions = []
        if loop.extent is not None and loop.extent > 1 and lid not in attached_here:
            actions.append("split")
        if (i + 1 < len(s.loops) and s.loops[i + 1].kind == SPACE
                and s.loops[i + 1].annotation in (None, "parallel")):
            actions.append("fuse_next")
        if (i > 0 and s.loops[i - 1].kind == SPACE
                and s.loops[i - 1].annotation in (None, "parallel")):
            actions.append("fuse_prev")
        if not actions:
            continue
        act = actions[int(rng.integers(len(actions)))]
        try:
            if act == "split":
                divs = [d for d in divisors(loop.extent) if d > 1]
                f = divs[int(rng.integers(len(divs)))]
                q = apply_step(program, Split(sname, lid, (f,)))
                q = apply_step(q, Annotate(sname, f"{lid}.0", "parallel"))
            elif act == "fuse_next":
                q = apply_step(program, Fuse(sname, lid, s.loops[i + 1].id))
            else:
                q = apply_step(program, Fuse(sname, s.loops[i - 1].id, lid))
        except IRError:
            continue
        if validate(q):
            continue
        return q
    return NOT_APPLICABLE


def mutate_pragma(program: Program, rng: np.random.Generator,
                  values: tuple[int, ...] = (0, 16, 64, 512)
                  ) -> Program | NotApplicable:
    """Replace one stage's unroll budget with a different member of the
    value set. Pure cost-model knob; semantics untouched."""
    stages = [s for s in program.live_stages() if s.expr is not None]
    if not stages or len(set(values)) < 2:
        return NOT_APPLICABLE
    s = stages[int(rng.integers(len(stages)))]
    alts = [v for v in values if v != s.pragma_unroll]
    if not alts:
        return NOT_APPLICABLE
    v = alts[int(rng.integers(len(alts)))]
    return apply_step(program, SetPragma(s.name, v))


def _movable_stages(program: Program) -> list[str]:
    """Stages whose nest is untransformed apart from the annotation passes:
    loop ids, once fused bands are flattened, are the declared iterators
    (unit-extent ones may have been simplified away)."""
    out = []
    for s in program.stages:
        if s.inlined or s.expr is None or program.attached_to(s.name):
            continue
        ext = dict((*s.space, *s.reduce))
        flat = [x for l in s.loops for x in l.id.split("@")]
        if any(n not in ext for n in flat):
            continue
        declared = [n for n, _ in (*s.space, *s.reduce)]
        present = set(flat)
        if flat != [n for n in declared if n in present]:
            continue
        if any(ext[n] != 1 for n in declared if n not in present):
            continue
        out.append(s.name)
    return out


def _unfuse_stage(program: Program, stage: str) -> Program:
    """Replay without the stage's parallel-band fusion (and without unit
    loop collapsing), restoring the naive nest that attachment needs."""
    hist = tuple(
        st for st in program.history
        if not (isinstance(st, Fuse) and st.stage == stage)
        and not (isinstance(st, Annotate) and st.stage == stage and "@" in st.loop)
        and not isinstance(st, Simplify)
    )
    return replay(program.dag, hist)


def mutate_compute_location(program: Program, rng: np.random.Generator,
                            tries: int = 8) -> Program | NotApplicable:
    """Reattach one movable stage at a different valid point (Root included)."""
    flex = _movable_stages(program)
    if not flex:
        return NOT_APPLICABLE
    for _ in range(tries):
        sname = flex[int(rng.integers(len(flex)))]
        base = program
        if not program.stage(sname).is_naive():
            try:
                base = _unfuse_stage(program, sname)
            except IRError:
                continue
        s = base.stage(sname)
        cur = s.compute_at if s.compute_at else ("", "")
        alts = [c for c in compute_location_candidates(base, sname) if c != cur]
        if not alts:
            continue
        point = alts[int(rng.integers(len(alts)))]
        try:
            q = simplify(move_compute_location(base, sname, point))
        except IRError:
            continue
        if validate(q):
            continue
        return q
    return NOT_APPLICABLE


MUTATIONS = (
    ("tile_size", mutate_tile_size),
    ("parallel", mutate_parallel),
    ("pragma", mutate_pragma),
    ("compute_location", mutate_compute_location),
)


# ---------------------------------------------------------------------------
# Crossover
# ---------------------------------------------------------------------------


def _owner(step: RewriteStep, dag) -> str:
    if isinstance(step, LayoutRewrite):
        readers = sorted(dag.consumers_of(step.buffer))
        name = readers[0] if readers else step.buffer
    else:
        name = step.stage
    return name.split(".")[0]


def _gene_groups(program: Program) -> dict[str, list[tuple[int, RewriteStep]]]:
    """Node -> position-tagged steps. Positions order the merged child
    history so causality across nodes (an inline before an attach that
    depends on it, a split before the fuse of its parts) survives the mix."""
    names = {n.name for n in program.dag.nodes}
    groups: dict[str, list[tuple[int, RewriteStep]]] = {}
    for pos, st in enumerate(program.history):
        if isinstance(st, Simplify):
            continue
        base = _owner(st, program.dag)
        if base not in names:
            raise ValueError(f"step {st!r} belongs to no DAG node")
        groups.setdefault(base, []).append((pos, st))
    return groups


def _deepest_space_loop(stage) -> str | None:
    for l in reversed(stage.loops):
        if l.kind == SPACE:
            return l.id
    return None


def crossover(parent_a: Program, parent_b: Program,
              rng: np.random.Generator) -> Program | Infeasible:
    """Per DAG node, inherit that node's rewrite steps from one parent;
    apply groups output-first. An attach point whose loop id did not
    survive the mix is remapped to the deepest space loop of its target."""
    if parent_a.dag != parent_b.dag:
        raise ValueError("crossover parents must share a DAG")
    dag = parent_a.dag
    ga = _gene_groups(parent_a)
    gb = _gene_groups(parent_b)

    tagged: list[tuple[int, int, RewriteStep]] = []
    for rank, node in enumerate(topological_order(dag)):
        chosen = ga if int(rng.integers(2)) == 0 else gb
        tagged.extend((pos, rank, st) for pos, st in chosen.get(node, []))
    tagged.sort(key=lambda t: (t[0], t[1]))
    steps = [st for _, _, st in tagged]

    p = naive_program(dag)
    for st in steps:
        if isinstance(st, ComputeAt) and st.target:
            if not p.has_stage(st.target):
                return Infeasible(f"attach target {st.target} absent")
            t = p.stage(st.target)
            if all(l.id != st.loop for l in t.loops):
                fallback = _deepest_space_loop(t)
                if fallback is None:
                    return Infeasible(f"no space loop left on {st.target}")
                st = replace(st, loop=fallback)
        try:
            p = apply_step(p, st)
        except IRError as e:
            return Infeasible(str(e))
    try:
        if p.layouts:
            p = refresh_constant_layouts(p)
        p = simplify(p)
    except IRError as e:
        return Infeasible(str(e))
    problems = validate(p)
    if problems:
        return Infeasible("; ".join(problems))
    return p


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------


def _state_key(p: Program):
    return replace(simplify(p), history=())


def _mutate_child(parent: Candidate, config: EvolutionConfig,
                  rng: np.random.Generator,
                  stats: EvolveStats) -> Program:
    names = [n for n, _ in MUTATIONS]
    ops = dict(MUTATIONS)
    weights = list(config.operator_weights)
    remaining = list(names)
    w = [weights[names.index(n)] for n in remaining]
    while remaining:
        tot = sum(w)
        if tot <= 0:
            break
        probs = np.asarray(w) / tot
        j = int(rng.choice(len(remaining), p=probs))
        name = remaining[j]
        op = ops[name]
        out = (op(parent.program, rng, values=config.unroll_values)
               if name == "pragma" else op(parent.program, rng))
        if not isinstance(out, NotApplicable):
            stats.mutations += 1
            return out
        stats.not_applicable[name] = stats.not_applicable.get(name, 0) + 1
        remaining.pop(j)
        w.pop(j)
    stats.copied_parents += 1
    return parent.program


def evolve(initial: list[Program], model: CostModel, config: EvolutionConfig,
           rng: np.random.Generator | None = None,
           stats: EvolveStats | None = None) -> list[Candidate]:
    """Run the configured number of generations and return the best k
    distinct programs ever scored, by predicted fitness."""
    if not initial:
        raise ValueError("empty initial population")
    if stats is None:
        stats = EvolveStats()
    root = config.seed if rng is None else int(rng.integers(2 ** 62))

    def score(programs: list[Program]) -> list[Candidate]:
        return [Candidate(p, model.predict(p)) for p in programs]

    pool: dict = {}
    order: dict = {}

    def absorb(cands: list[Candidate]) -> None:
        for c in cands:
            key = _state_key(c.program)
            if key not in pool or c.fitness > pool[key].fitness:
                if key not in order:
                    order[key] = len(order)
                pool[key] = c

    population = score(initial)
    absorb(population)

    for gen in range(config.generations):
        children: list[Program] = []
        for slot in range(config.population):
            r = np.random.default_rng((root, gen, slot))
            if r.random() < config.mutation_prob:
                parent = select_parent(population, r, stats)
                child = _mutate_child(parent, config, r, stats)
            else:
                pa = select_parent(population, r, stats)
                pb = select_parent(population, r, stats)
                out = crossover(pa.program, pb.program, r)
                stats.crossovers += 1
                if isinstance(out, Infeasible):
                    stats.infeasible_crossovers += 1
                    child = _mutate_child(pa, config, r, stats)
                else:
                    child = out
            if r.random() < config.validate_fraction:
                stats.validated += 1
                problems = validate(child)
                if problems:
                    raise AssertionError(
                        f"evolved child failed validation: {problems}")
            children.append(child)

        population = score(children)
        absorb(population)
        fits = sorted(c.fitness for c in population)
        stats.generation_best.append(fits[-1])
        stats.generation_median.append(fits[len(fits) // 2])

    ranked = sorted(pool, key=lambda k: (-pool[k].fitness, order[k]))
    return [pool[k] for k in ranked[: config.k]]
