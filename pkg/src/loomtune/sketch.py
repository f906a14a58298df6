"""Sketch enumeration: structural schedule skeletons from derivation rules.

Nodes are visited in topological order (outputs first); a per-node rule
table decides what happens at each visit. Every rule whose condition holds
produces a branch, so the result is a set of sketches, not a single one.
Tile sizes stay symbolic (None extents) at this level; the annotation pass
fills them in later.

Rules look at the *current* program, not the original DAG: inlining
upstream of a node changes who its consumers are, and a cache rewrite
changes which stage holds the node's compute. The visit keeps a focus map
from node name to its current compute stage for exactly that reason.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .expr import reads
from .graph import ComputeDAG, NodeTraits, TraitThresholds, topological_order
from .ir import (
    REDUCE, SPACE, ComputeAt, Fuse, Inline, CacheWrite, Program, Reorder,
    Rfactor, Split, Stage, apply_step, naive_program, simplify,
)

DEFAULT_STRUCTURE = "SSRSRS"


class SketchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Program-state traits
# ---------------------------------------------------------------------------


def stage_traits(p: Program, name: str,
                 thresholds: TraitThresholds = TraitThresholds()) -> NodeTraits:
    """Like the DAG-level analysis, but evaluated on the live program:
    consumers are reader stages of the buffer, and a consumer only counts
    as fusible if it is still attachable (naive, unattached, not a target)."""
    if not p.has_stage(name):
        return NodeTraits(False, False, False, False)
    s = p.stage(name)
    if s.inlined:
        return NodeTraits(False, False, False, False)

    readers = [r for r in p.readers_of(name) if r.name != name]
    ph = {n.name: n.is_placeholder for n in p.dag.nodes}

    space_names = s.space_names()
    inlinable = bool(readers) and not s.reduce and _elementwise(s, ph)

    relevant = {n for n, e in (*s.space, *s.reduce) if e is not None and e > 1}

    def refs(r) -> set[str]:
        out: set[str] = set()
        for lin in r.index:
            out |= lin.iters()
        return out

    reuse = bool(s.reduce) and any((refs(r) & relevant) < relevant
                                   for r in reads(s.expr))

    fusible = False
    if len(readers) == 1:
        t = readers[0]
        my = [r for r in reads(t.expr) if r.buffer == name]
        identity = bool(my) and all(
            len(r.index) == len(t.space)
            and all(l.is_single_var() for l in r.index)
            and tuple(l.terms[0][0] for l in r.index) == t.space_names()
            for r in my
        )
        attachable = (t.is_naive() and t.compute_at is None
                      and not p.attached_to(t.name) and not t.inlined)
        fusible = identity and attachable

    space_prod = 1
    for _, e in s.space:
        space_prod *= e if e else 1
    red_prod = 1
    for _, e in s.reduce:
        red_prod *= e if e else 1
    more_red = (bool(s.reduce)
                and space_prod < thresholds.small_space
                and red_prod >= thresholds.reduction_ratio * space_prod)

    return NodeTraits(inlinable, reuse, fusible, more_red)


def _elementwise(s: Stage, is_ph: dict[str, bool]) -> bool:
    names = s.space_names()
    for r in reads(s.expr):
        idx = []
        for lin in r.index:
            if not lin.is_single_var():
                return False
            n = lin.terms[0][0]
            if n not in names:
                return False
            idx.append(n)
        if not is_ph.get(r.buffer, False) and tuple(idx) != names:
            return False
    return True


# ---------------------------------------------------------------------------
# Multi-level tiling
# ---------------------------------------------------------------------------


def _tile_plan(stage: Stage, structure: str) -> tuple[list, str]:
    """Split/reorder steps for a tiling structure plus the loop id that
    closes the leading space-level prefix (the fusion attach point)."""
    if not structure or set(structure) - {"S", "R"}:
        raise SketchError(f"bad tiling structure {structure!r}")
    n_s = structure.count("S")
    n_r = structure.count("R")
    if structure[0] != "S" or n_s < 1:
        raise SketchError(f"structure {structure!r} must open with a space level")
    if not stage.reduce:
        n_r = 0

    steps: list = []
    for name, _ in stage.space:
        if n_s > 1:
            steps.append(Split(stage.name, name, (None,) * (n_s - 1)))
    for name, _ in stage.reduce:
        if n_r > 1:
            steps.append(Split(stage.name, name, (None,) * (n_r - 1)))

    def part(name: str, total: int, j: int) -> str:
        return name if total == 1 else f"{name}.{j}"

    order: list[str] = []
    si = ri = 0
    for ch in structure:
        if ch == "S":
            order += [part(n, n_s, si) for n, _ in stage.space]
            si += 1
        else:
            if n_r:
                order += [part(n, n_r, ri) for n, _ in stage.reduce]
            ri += 1
    if stage.reduce and n_r == 0:
        order += [n for n, _ in stage.reduce]
    steps.append(Reorder(stage.name, tuple(order)))

    prefix_levels = 0
    for ch in structure:
        if ch != "S":
            break
        prefix_levels += 1
    last_space = stage.space[-1][0]
    attach = part(last_space, n_s, prefix_levels - 1)
    return steps, attach


def multi_level_tile(program: Program, stage: str,
                     structure: str = DEFAULT_STRUCTURE) -> Program:
    """Split every space loop into one part per S level and every reduction
    loop into one part per R level, then interleave them level by level.
    Part extents stay symbolic."""
    s = program.stage(stage)
    if not s.is_naive():
        raise SketchError(f"{stage} must be naive to tile")
    steps, _ = _tile_plan(s, structure)
    for st in steps:
        program = apply_step(program, st)
    return program


# ---------------------------------------------------------------------------
# Derivation rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SketchState:
    program: Program
    index: int
    focus: tuple[tuple[str, str], ...] = ()
    path: tuple[object, ...] = ()

    def focus_of(self, node: str) -> str:
        for n, s in self.focus:
            if n == node:
                return s
        return node

    def refocus(self, node: str, stage: str) -> tuple[tuple[str, str], ...]:
        return tuple((n, s) for n, s in self.focus if n != node) + ((node, stage),)


@dataclass
class RuleContext:
    dag: ComputeDAG
    order: tuple[str, ...]
    thresholds: TraitThresholds
    structure: str

    def node_at(self, state: SketchState) -> str:
        return self.order[len(self.order) - state.index]

    def traits(self, state: SketchState) -> NodeTraits:
        return stage_traits(state.program, state.focus_of(self.node_at(state)),
                            self.thresholds)


class DerivationRule:
    """User-extensible rule. Extra rules run after the built-in table at
    each visit; every rule whose condition holds contributes branches."""

    name: str = "custom"
    rule_id: object = "custom"

    def applies(self, state: SketchState, ctx: RuleContext) -> bool:
        raise NotImplementedError

    def expand(self, state: SketchState, ctx: RuleContext) -> list[SketchState]:
        raise NotImplementedError

    def _advance(self, state: SketchState, program: Program,
                 index: int | None = None,
                 focus: tuple[tuple[str, str], ...] | None = None) -> SketchState:
        return SketchState(
            program,
            state.index - 1 if index is None else index,
            state.focus if focus is None else focus,
            state.path + (self.rule_id,),
        )


class SkipRule(DerivationRule):
    name = "skip"
    rule_id = 1

    def applies(self, state, ctx):
        return not ctx.traits(state).is_strict_inlinable

    def expand(self, state, ctx):
        return [self._advance(state, state.program)]


class AlwaysInlineRule(DerivationRule):
    name = "always_inline"
    rule_id = 2

    def applies(self, state, ctx):
        return ctx.traits(state).is_strict_inlinable

    def expand(self, state, ctx):
        stage = state.focus_of(ctx.node_at(state))
        return [self._advance(state, apply_step(state.program, Inline(stage)))]


class MultiLevelTileRule(DerivationRule):
    name = "multi_level_tile"
    rule_id = 3

    def applies(self, state, ctx):
        return ctx.traits(state).has_data_reuse

    def expand(self, state, ctx):
        stage = state.focus_of(ctx.node_at(state))
        return [self._advance(state, multi_level_tile(state.program, stage, ctx.structure))]


class TileWithFusionRule(DerivationRule):
    name = "tile_with_fusion"
    rule_id = 4

    def applies(self, state, ctx):
        t = ctx.traits(state)
        return t.has_data_reuse and t.has_fusible_consumer

    def expand(self, state, ctx):
        stage = state.focus_of(ctx.node_at(state))
        p = state.program
        consumer = [r.name for r in p.readers_of(stage) if r.name != stage][0]
        steps, attach = _tile_plan(p.stage(stage), ctx.structure)
        for st in steps:
            p = apply_step(p, st)
        p = apply_step(p, ComputeAt(consumer, stage, attach))
        return [self._advance(state, p)]


class AddCacheStageRule(DerivationRule):
    name = "add_cache_stage"
    rule_id = 5

    def applies(self, state, ctx):
        t = ctx.traits(state)
        return t.has_data_reuse and not t.has_fusible_consumer

    def expand(self, state, ctx):
        node = ctx.node_at(state)
        stage = state.focus_of(node)
        p = apply_step(state.program, CacheWrite(stage))
        # Revisit the same node; its compute now lives in the cache stage.
        return [self._advance(state, p, index=state.index,
                              focus=state.refocus(node, f"{stage}.cache"))]


class ReductionFactorizationRule(DerivationRule):
    name = "reduction_factorization"
    rule_id = 6

    def applies(self, state, ctx):
        stage = state.focus_of(ctx.node_at(state))
        if not state.program.has_stage(stage):
            return False
        if not state.program.stage(stage).is_naive():
            return False
        return ctx.traits(state).has_more_reduction_parallel

    def expand(self, state, ctx):
        stage = state.focus_of(ctx.node_at(state))
        p = state.program
        s = p.stage(stage)
        red = [l.id for l in s.loops if l.kind == REDUCE]
        fused = red[0]
        for nxt in red[1:]:
            p = apply_step(p, Fuse(stage, fused, nxt))
            fused = f"{fused}@{nxt}"
        p = apply_step(p, Rfactor(stage, fused, None))
        return [self._advance(state, p)]


BUILTIN_RULES: tuple[DerivationRule, ...] = (
    SkipRule(), AlwaysInlineRule(), MultiLevelTileRule(), TileWithFusionRule(),
    AddCacheStageRule(), ReductionFactorizationRule(),
)

STATE_CAP = 10_000


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------


def generate_sketches_traced(
    dag: ComputeDAG,
    extra_rules: tuple[DerivationRule, ...] = (),
    structure: str = DEFAULT_STRUCTURE,
    thresholds: TraitThresholds = TraitThresholds(),
    cap: int = STATE_CAP,
) -> list[tuple[Program, tuple[object, ...]]]:
    """Breadth-first expansion over the rule table; returns (sketch, rule
    id path) pairs, deduplicated by the simplified program structure."""
    order = tuple(topological_order(dag))
    ctx = RuleContext(dag, order, thresholds, structure)
    rules = BUILTIN_RULES + tuple(extra_rules)

    queue: list[SketchState] = [SketchState(naive_program(dag), len(order))]
    done: list[tuple[Program, tuple[object, ...]]] = []
    seen: set = set()
    processed = 0
    while queue:
        state = queue.pop(0)
        processed += 1
        if processed > cap:
            raise SketchError(f"sketch expansion exceeded {cap} states")
        if state.index == 0:
            key = simplify(state.program)
            key = replace(key, history=())
            if key not in seen:
                seen.add(key)
                done.append((state.program, state.path))
            continue
        for rule in rules:
            if rule.applies(state, ctx):
                queue.extend(rule.expand(state, ctx))
    return done


def generate_sketches(
    dag: ComputeDAG,
    extra_rules: tuple[DerivationRule, ...] = (),
    structure: str = DEFAULT_STRUCTURE,
    thresholds: TraitThresholds = TraitThresholds(),
    cap: int = STATE_CAP,
) -> list[Program]:
    return [p for p, _ in generate_sketches_traced(dag, extra_rules, structure,
                                                   thresholds, cap)]
