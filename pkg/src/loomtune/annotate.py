"""Annotation sampling: sketches to complete, runnable programs.

A sketch fixes structure but leaves every tile extent symbolic. This pass
draws concrete factorizations, fuses and parallelizes the outer space
loops, vectorizes a stride-1 innermost loop when one exists, draws an
unroll pragma per stage, occasionally moves a flexible stage to a
different attach point, and packs constant tensors to match the tiled
access order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import reads
from .ir import (
    REDUCE, SPACE, Annotate, ComputeAt, Fuse, LayoutRewrite, Program,
    Rfactor, SetPragma, Split, apply_step, d_eval, d_vars, lin_to_decode,
    naive_program, replay, simplify,
)

UNROLL_VALUES = (0, 16, 64, 512)


@dataclass(frozen=True)
class AnnotationPolicy:
    max_vectorize_extent: int = 16
    unroll_values: tuple[int, ...] = UNROLL_VALUES
    move_probability: float = 0.1
    pack_constants: bool = True
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.unroll_values:
            raise ValueError("unroll value set is empty")
        if not 0.0 <= self.move_probability <= 1.0:
            raise ValueError("move probability outside [0, 1]")


def prime_factors(n: int) -> list[int]:
    out: list[int] = []
    d = 2
    while d * d <= n:
        while n % d == 0:
            out.append(d)
            n //= d
        d += 1 if d == 2 else 2
    if n > 1:
        out.append(n)
    return out


def random_factorization(extent: int, parts: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Deal the prime factors of `extent` into `parts` bins uniformly at
    random; every divisor decomposition with the right multiplicities is
    reachable. Product is exactly `extent`."""
    if extent < 1 or parts < 1:
        raise ValueError(f"bad factorization request ({extent}, {parts})")
    out = [1] * parts
    for p in prime_factors(extent):
        out[int(rng.integers(parts))] *= p
    return tuple(out)


def divisors(n: int) -> list[int]:
    small, large = [], []
    d = 1
    while d * d <= n:
        if n % d == 0:
            small.append(d)
            if d != n // d:
                large.append(n // d)
        d += 1
    return small + large[::-1]


# ---------------------------------------------------------------------------
# Factor resolution
# ---------------------------------------------------------------------------


def resolve_factors(sketch: Program, rng: np.random.Generator) -> Program:
    """Replace every symbolic Split factor and Rfactor extent with random
    concrete values, replaying step by step so later draws see the loop
    extents produced by earlier ones."""
    p = naive_program(sketch.dag)
    for step in sketch.history:
        if isinstance(step, Split) and any(f is None for f in step.inner):
            ext = p.stage(step.stage).loop(step.loop).extent
            if ext is None:
                raise ValueError(f"cannot resolve split of symbolic loop {step.loop}")
            parts = random_factorization(ext, len(step.inner) + 1, rng)
            step = Split(step.stage, step.loop, parts[1:])
        elif isinstance(step, Rfactor) and step.factor is None:
            ext = p.stage(step.stage).loop(step.loop).extent
            if ext is None:
                raise ValueError(f"cannot resolve rfactor of symbolic loop {step.loop}")
            step = Rfactor(step.stage, step.loop, random_factorization(ext, 2, rng)[1])
        p = apply_step(p, step)
    return p


# ---------------------------------------------------------------------------
# Loop annotations
# ---------------------------------------------------------------------------


def _parallel_run(s) -> list[str]:
    cut = 0
    for l in s.loops:
        if l.kind != SPACE:
            break
        cut += 1
    run = [l.id for l in s.loops[:cut]]
    # Keep one loop below the parallel band when it would swallow the
    # whole nest; the vectorizer wants something left to work with.
    if cut == len(s.loops) and cut >= 2:
        run = run[:-1]
    return run


def annotate_parallel(p: Program, stage: str) -> Program:
    s = p.stage(stage)
    run = _parallel_run(s)
    if not run:
        return p
    fused = run[0]
    for nxt in run[1:]:
        p = apply_step(p, Fuse(stage, fused, nxt))
        fused = f"{fused}@{nxt}"
    ext = p.stage(stage).loop(fused).extent
    if ext is not None and ext > 1:
        p = apply_step(p, Annotate(stage, fused, "parallel"))
    return p


def annotate_vectorize(p: Program, stage: str, max_extent: int) -> Program:
    s = p.stage(stage)
    if not s.loops:
        return p
    last = s.loops[-1]
    ok = (last.kind == SPACE and last.annotation is None
          and last.extent is not None and 2 <= last.extent <= max_extent
          and last.lin_stride == 1 and last.lin_iter is not None)
    if ok:
        p = apply_step(p, Annotate(stage, last.id, "vectorize"))
    return p


# ---------------------------------------------------------------------------
# Compute-location candidates (shared with the evolution operators)
# ---------------------------------------------------------------------------


def flexible_stages(p: Program) -> list[str]:
    """Stages whose location can move: live, untransformed nests that are
    not themselves hosting an attached stage."""
    out = []
    for s in p.stages:
        if s.inlined or not s.is_naive() or p.attached_to(s.name):
            continue
        if compute_location_candidates(p, s.name):
            out.append(s.name)
    return out


def compute_location_candidates(p: Program, stage: str) -> list[tuple[str, str]]:
    """Valid (target, loop) attach points for a stage, Root included as
    ("", ""). The current location is part of the returned list."""
    s = p.stage(stage)
    if s.inlined or not s.is_naive() or p.attached_to(s.name):
        return []
    points: list[tuple[str, str]] = [("", "")]

    readers = [t for t in p.readers_of(stage) if t.name != stage]
    if len(readers) == 1 and not readers[0].inlined:
        t = readers[0]
        for l in t.loops:
            points.append((t.name, l.id))

    my_reads = {r.buffer for r in reads(s.expr)} if s.expr else set()
    for t in p.stages:
        if t.name == stage or t.inlined or t.name not in my_reads:
            continue
        if not _identity_space_read(s, t):
            continue
        for l in t.loops:
            if l.kind == REDUCE:
                break
            points.append((t.name, l.id))

    cur = s.compute_at if s.compute_at else ("", "")
    seen, uniq = set(), []
    for pt in points:
        if pt not in seen:
            seen.add(pt)
            uniq.append(pt)
    if uniq == [cur]:
        return []
    return uniq


def _identity_space_read(s, t) -> bool:
    if len(s.space) != len(t.space):
        return False
    mine = [r for r in reads(s.expr) if r.buffer == t.name]
    return bool(mine) and all(
        len(r.index) == len(s.space)
        and all(l.is_single_var() for l in r.index)
        and tuple(l.terms[0][0] for l in r.index) == s.space_names()
        for r in mine
    )


def move_compute_location(p: Program, stage: str, point: tuple[str, str]) -> Program:
    target, loop = point
    return apply_step(p, ComputeAt(stage, target, loop))


# ---------------------------------------------------------------------------
# Constant-tensor packing
# ---------------------------------------------------------------------------


def rewrite_constant_layout(program: Program) -> Program:
    """Pack each constant tensor in the loop order of its (single) reading
    stage: one physical dimension per loop that scans it, outer loops
    first. No-op for buffers whose access does not decompose cleanly."""
    for node in program.dag.nodes:
        if not (node.is_placeholder and node.is_constant):
            continue
        readers = [s for s in program.live_stages() if s.expr is not None
                   and any(r.buffer == node.name for r in reads(s.expr))]
        if len(readers) != 1:
            continue
        dims = tuple(e for _, e in node.space)
        desc = _packing_descriptor(readers[0], node.name, dims)
        if desc is None or _is_identity(desc, dims):
            continue
        program = apply_step(program, LayoutRewrite(node.name, desc))
    return program


def _packing_descriptor(s, buffer: str,
                        dims: tuple[int, ...]) -> tuple[tuple[int, int], ...] | None:
    rs = [r for r in reads(s.expr) if r.buffer == buffer]
    if len(rs) != 1:
        return None
    decode = dict(s.index_map)
    idx = []
    for lin in rs[0].index:
        try:
            idx.append(_lin_decode_fn(lin, decode))
        except KeyError:
            return None

    entries: list[tuple[int, int, int]] = []
    for l in s.loops:
        if l.extent is None:
            return None
        if l.extent <= 1:
            continue
        touch = None
        for d, fn in enumerate(idx):
            lo = fn(l.id, 0)
            hi = fn(l.id, 1)
            far = fn(l.id, l.extent - 1)
            if hi == lo and far == lo:
                continue
            stride = hi - lo
            if far - lo != stride * (l.extent - 1) or stride <= 0:
                return None
            if touch is not None:
                return None
            touch = (d, l.extent, stride)
        if touch is not None:
            entries.append(touch)

    per_dim: dict[int, list[tuple[int, int]]] = {}
    for d, ext, stride in entries:
        per_dim.setdefault(d, []).append((ext, stride))
    for d, size in enumerate(dims):
        parts = per_dim.get(d, [])
        total = 1
        for ext, _ in parts:
            total *= ext
        if total != size:
            return None
        expect = size
        for ext, stride in parts:
            expect //= ext
            if stride != expect:
                return None
    return tuple((d, ext) for d, ext, _ in entries)


def _lin_decode_fn(lin, decode):
    ast = lin_to_decode(lin, decode)

    def fn(loop_id: str, value: int) -> int:
        env = {v: 0 for v in d_vars(ast)}
        if loop_id in env:
            env[loop_id] = value
        return d_eval(ast, env)

    return fn


def _is_identity(desc: tuple[tuple[int, int], ...], dims: tuple[int, ...]) -> bool:
    return (tuple(d for d, _ in desc) == tuple(range(len(dims)))
            and all(ext == dims[d] for d, ext in desc))


def strip_layout_steps(program: Program) -> Program:
    history = tuple(st for st in program.history
                    if not isinstance(st, LayoutRewrite))
    return replay(program.dag, history)


def refresh_constant_layouts(program: Program) -> Program:
    """Re-derive packing after a structural edit changed tile sizes.

    Descriptors are only readable from the loop structure before the outer
    space band is fused, so the fresh ones are spliced back in at the
    position the old ones occupied rather than appended at the end."""
    hist = program.history
    first = next((i for i, st in enumerate(hist)
                  if isinstance(st, LayoutRewrite)), None)
    if first is None:
        return program
    kept = [st for st in hist if not isinstance(st, LayoutRewrite)]
    pre = sum(1 for st in hist[:first] if not isinstance(st, LayoutRewrite))
    out = rewrite_constant_layout(replay(program.dag, tuple(kept[:pre])))
    for st in kept[pre:]:
        out = apply_step(out, st)
    return out


# ---------------------------------------------------------------------------
# Full sampler
# ---------------------------------------------------------------------------


def sample_program(sketch: Program, policy: AnnotationPolicy,
                   rng: np.random.Generator) -> Program:
    p = resolve_factors(sketch, rng)

    # Packing reads the split structure, so it must run before the outer
    # space band gets fused away.
    if policy.pack_constants:
        p = rewrite_constant_layout(p)

    # Location tweaks need untransformed nests, so they go before the
    # annotation passes.
    if rng.random() < policy.move_probability:
        flex = flexible_stages(p)
        if flex:
            stage = str(rng.choice(flex))
            pts = compute_location_candidates(p, stage)
            cur = p.stage(stage).compute_at or ("", "")
            pts = [pt for pt in pts if pt != cur]
            if pts:
                p = move_compute_location(p, stage, pts[int(rng.integers(len(pts)))])

    for s in list(p.stages):
        if s.inlined or s.compute_at is not None:
            continue
        p = annotate_parallel(p, s.name)
    for s in list(p.stages):
        if s.inlined:
            continue
        p = annotate_vectorize(p, s.name, policy.max_vectorize_extent)
    for s in list(p.stages):
        if s.inlined:
            continue
        val = int(rng.choice(policy.unroll_values))
        if val != p.stage(s.name).pragma_unroll:
            p = apply_step(p, SetPragma(s.name, val))

    return simplify(p)
