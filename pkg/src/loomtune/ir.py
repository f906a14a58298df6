"""Loop-nest program representation and the rewrite-step algebra.

A Program pairs a ComputeDAG with one Stage per computed node (plus stages
created by cache/rfactor rewrites). A stage's body expression always stays
written in terms of the node's *original* iterators; what a schedule changes
is the loop nest around it and a per-stage decode map from loop variables
back to those original iterators. Split substitutes a loop variable by a
base-expansion over its parts, fuse substitutes the two operands by div/mod
of the fused variable, so every decode map stays a bijection from loop space
onto the iteration domain by construction. The interpreter and the feature
extractor both consume the same decode maps, which is what keeps them
consistent with each other.

Rewrites are recorded as a history of RewriteStep values. Replaying a
history on the naive program reproduces the program exactly; search
operators edit histories and replay rather than mutating structures in
place.

Split factors may be None while a program is still a sketch; such programs
are not executable until an annotation pass substitutes concrete factors
(by rewriting the history and replaying).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .expr import Expr, Lin, Read, Reduce, inline_reads, reads
from .graph import Axes, ComputeDAG, topological_order

# ---------------------------------------------------------------------------
# Decode expressions: loop variables -> original iterator values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DVar:
    loop: str


@dataclass(frozen=True)
class DConst:
    value: int


@dataclass(frozen=True)
class DAdd:
    a: "Decode"
    b: "Decode"


@dataclass(frozen=True)
class DMul:
    a: "Decode"
    c: int | None


@dataclass(frozen=True)
class DDiv:
    a: "Decode"
    c: int | None


@dataclass(frozen=True)
class DMod:
    a: "Decode"
    c: int | None


Decode = DVar | DConst | DAdd | DMul | DDiv | DMod


def d_eval(d: Decode, env: dict[str, object]):
    """Evaluate over ints or integer numpy arrays."""
    if isinstance(d, DVar):
        return env[d.loop]
    if isinstance(d, DConst):
        return d.value
    if isinstance(d, DAdd):
        return d_eval(d.a, env) + d_eval(d.b, env)
    if isinstance(d, DMul):
        if d.c is None:
            raise ValueError("symbolic factor in decode")
        return d_eval(d.a, env) * d.c
    if isinstance(d, DDiv):
        if d.c is None:
            raise ValueError("symbolic factor in decode")
        return d_eval(d.a, env) // d.c
    if isinstance(d, DMod):
        if d.c is None:
            raise ValueError("symbolic factor in decode")
        return d_eval(d.a, env) % d.c
    raise TypeError(f"not a decode: {d!r}")


def d_vars(d: Decode) -> frozenset[str]:
    if isinstance(d, DVar):
        return frozenset((d.loop,))
    if isinstance(d, DConst):
        return frozenset()
    if isinstance(d, DAdd):
        return d_vars(d.a) | d_vars(d.b)
    return d_vars(d.a)


def d_subst(d: Decode, mapping: dict[str, Decode]) -> Decode:
    if isinstance(d, DVar):
        return mapping.get(d.loop, d)
    if isinstance(d, DConst):
        return d
    if isinstance(d, DAdd):
        return DAdd(d_subst(d.a, mapping), d_subst(d.b, mapping))
    if isinstance(d, DMul):
        return DMul(d_subst(d.a, mapping), d.c)
    if isinstance(d, DDiv):
        return DDiv(d_subst(d.a, mapping), d.c)
    if isinstance(d, DMod):
        return DMod(d_subst(d.a, mapping), d.c)
    raise TypeError(f"not a decode: {d!r}")


def d_interval(d: Decode, ranges: dict[str, tuple[int, int]]) -> tuple[int, int]:
    """Sound inclusive bounds given inclusive per-loop ranges."""
    if isinstance(d, DVar):
        return ranges[d.loop]
    if isinstance(d, DConst):
        return d.value, d.value
    if isinstance(d, DAdd):
        a0, a1 = d_interval(d.a, ranges)
        b0, b1 = d_interval(d.b, ranges)
        return a0 + b0, a1 + b1
    if isinstance(d, DMul):
        if d.c is None:
            raise ValueError("symbolic factor in decode")
        a0, a1 = d_interval(d.a, ranges)
        return (a0 * d.c, a1 * d.c) if d.c >= 0 else (a1 * d.c, a0 * d.c)
    if isinstance(d, DDiv):
        if d.c is None:
            raise ValueError("symbolic factor in decode")
        a0, a1 = d_interval(d.a, ranges)
        return a0 // d.c, a1 // d.c
    if isinstance(d, DMod):
        if d.c is None:
            raise ValueError("symbolic factor in decode")
        a0, a1 = d_interval(d.a, ranges)
        if a0 // d.c == a1 // d.c:
            return a0 % d.c, a1 % d.c
        return 0, d.c - 1
    raise TypeError(f"not a decode: {d!r}")


def lin_to_decode(lin: Lin, index_map: dict[str, Decode]) -> Decode:
    """Compose an affine iterator form with a stage's decode map."""
    out: Decode = DConst(lin.const)
    for name, c in lin.terms:
        term: Decode = index_map.get(name, DVar(name))
        if c != 1:
            term = DMul(term, c)
        out = term if (isinstance(out, DConst) and out.value == 0) else DAdd(out, term)
    return out


# ---------------------------------------------------------------------------
# Loops and stages
# ---------------------------------------------------------------------------

SPACE, REDUCE = "space", "reduce"
ANNOTATIONS = ("parallel", "vectorize")


@dataclass(frozen=True)
class Loop:
    """One loop level. `extent` is None while still symbolic. `lin_iter` /
    `lin_stride` are best-effort linearity metadata: consecutive values of
    this loop move `lin_iter` by `lin_stride` (used for vectorization
    eligibility and stride features, never for correctness)."""

    id: str
    extent: int | None
    kind: str
    annotation: str | None = None
    lin_iter: str | None = None
    lin_stride: int | None = None


@dataclass(frozen=True)
class Stage:
    """One computed tensor's loop nest.

    `space`/`reduce` list the original iterator names with their current
    domain extents; `expr` is written over original iterators (plus, for
    rfactor stages, over the original reduction axes that `index_map`
    reconstructs from the new loops). `index_map` is ordered and total over
    the iterators the expression uses.
    """

    name: str
    space: Axes
    reduce: Axes
    expr: Expr
    loops: tuple[Loop, ...]
    index_map: tuple[tuple[str, Decode], ...]
    compute_at: tuple[str, str] | None = None
    pragma_unroll: int = 0
    inlined: bool = False

    def loop(self, loop_id: str) -> Loop:
        for l in self.loops:
            if l.id == loop_id:
                return l
        raise IRError(f"stage {self.name}: no loop {loop_id!r}")

    def loop_index(self, loop_id: str) -> int:
        for i, l in enumerate(self.loops):
            if l.id == loop_id:
                return i
        raise IRError(f"stage {self.name}: no loop {loop_id!r}")

    def decode(self) -> dict[str, Decode]:
        return dict(self.index_map)

    def shape(self) -> tuple[int, ...]:
        return tuple(e for _, e in self.space)

    def space_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.space)

    def is_naive(self) -> bool:
        """Loops are exactly the declared iterators with identity decode."""
        want = [n for n, _ in (*self.space, *self.reduce)]
        return [l.id for l in self.loops] == want and all(
            isinstance(d, DVar) and d.loop == n for n, d in self.index_map
        )


class IRError(ValueError):
    """A rewrite step cannot be applied to the current program."""


# ---------------------------------------------------------------------------
# Rewrite steps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Split:
    """Split `loop` into len(inner)+1 parts; `inner` lists the extents of
    all but the outermost part, outer to inner; the outermost extent is
    inferred from the loop extent. None entries stay symbolic."""

    stage: str
    loop: str
    inner: tuple[int | None, ...]


@dataclass(frozen=True)
class Fuse:
    stage: str
    outer: str
    inner: str


@dataclass(frozen=True)
class Reorder:
    stage: str
    order: tuple[str, ...]


@dataclass(frozen=True)
class ComputeAt:
    """Attach `stage` under `target`'s loop `loop`. Empty target means
    detach back to root."""

    stage: str
    target: str
    loop: str


@dataclass(frozen=True)
class Inline:
    stage: str


@dataclass(frozen=True)
class CacheWrite:
    stage: str


@dataclass(frozen=True)
class Rfactor:
    stage: str
    loop: str
    factor: int | None


@dataclass(frozen=True)
class Annotate:
    stage: str
    loop: str
    annotation: str


@dataclass(frozen=True)
class SetPragma:
    """Per-stage auto-unroll budget."""

    stage: str
    unroll: int


@dataclass(frozen=True)
class LayoutRewrite:
    """Pack a constant buffer. The descriptor lists (original dim, part
    extent) pairs outer to inner; per-dim part extents multiply to the dim
    size."""

    buffer: str
    descriptor: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class Simplify:
    """Drop extent-1 loops everywhere; recorded so replays reproduce the
    simplified structure."""


RewriteStep = (Split | Fuse | Reorder | ComputeAt | Inline | CacheWrite | Rfactor
               | Annotate | SetPragma | LayoutRewrite | Simplify)


# ---------------------------------------------------------------------------
# Program
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Program:
    dag: ComputeDAG
    stages: tuple[Stage, ...]
    history: tuple[RewriteStep, ...] = field(compare=False, default=())
    layouts: tuple[tuple[str, tuple[tuple[int, int], ...]], ...] = ()

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name == name:
                return s
        raise IRError(f"no stage {name!r}")

    def has_stage(self, name: str) -> bool:
        return any(s.name == name for s in self.stages)

    def stage_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.stages)

    def buffer_shape(self, buffer: str) -> tuple[int, ...]:
        for s in self.stages:
            if s.name == buffer:
                return s.shape()
        return self.dag.node(buffer).shape

    def layout_of(self, buffer: str) -> tuple[tuple[int, int], ...] | None:
        for b, desc in self.layouts:
            if b == buffer:
                return desc
        return None

    def readers_of(self, buffer: str) -> tuple[Stage, ...]:
        return tuple(s for s in self.stages if not s.inlined
                     and any(r.buffer == buffer for r in reads(s.expr)))

    def attached_to(self, target: str) -> tuple[Stage, ...]:
        return tuple(s for s in self.stages
                     if s.compute_at is not None and s.compute_at[0] == target)

    def root_stages(self) -> tuple[Stage, ...]:
        return tuple(s for s in self.stages if not s.inlined and s.compute_at is None)

    def live_stages(self) -> tuple[Stage, ...]:
        return tuple(s for s in self.stages if not s.inlined)

    def is_concrete(self) -> bool:
        return all(l.extent is not None for s in self.live_stages() for l in s.loops)

    def with_stage(self, updated: Stage) -> "Program":
        stages = tuple(updated if s.name == updated.name else s for s in self.stages)
        return replace(self, stages=stages)


def _identity_map(iters: tuple[str, ...]) -> tuple[tuple[str, Decode], ...]:
    return tuple((n, DVar(n)) for n in iters)


def _naive_loops(space: Axes, reduce: Axes) -> tuple[Loop, ...]:
    loops = [Loop(n, e, SPACE, lin_iter=n, lin_stride=1) for n, e in space]
    loops += [Loop(n, e, REDUCE, lin_iter=n, lin_stride=1) for n, e in reduce]
    return tuple(loops)


def naive_stage(name: str, space: Axes, reduce: Axes, expr: Expr) -> Stage:
    iters = tuple(n for n, _ in (*space, *reduce))
    return Stage(name, space, reduce, expr, _naive_loops(space, reduce),
                 _identity_map(iters))


def naive_program(dag: ComputeDAG) -> Program:
    """One stage per computed node, producers before consumers, space loops
    outside reduction loops, identity decode."""
    order = [n for n in reversed(topological_order(dag)) if not dag.node(n).is_placeholder]
    stages = tuple(
        naive_stage(n, dag.node(n).space, dag.node(n).reduce, dag.node(n).body)
        for n in order
    )
    return Program(dag, stages)


# ---------------------------------------------------------------------------
# Step application
# ---------------------------------------------------------------------------


def _apply_split(p: Program, st: Split) -> Program:
    s = p.stage(st.stage)
    if s.inlined:
        raise IRError(f"split on inlined stage {s.name}")
    i = s.loop_index(st.loop)
    loop = s.loops[i]
    k = len(st.inner)
    if k == 0:
        raise IRError("split needs at least one inner factor")
    parts_ext: list[int | None] = [None] * (k + 1)
    prod = 1
    known = True
    for j, f in enumerate(st.inner):
        if f is None:
            known = False
        else:
            if f <= 0:
                raise IRError(f"split factor {f} must be positive")
            parts_ext[j + 1] = f
            prod *= f
    if loop.extent is not None and known:
        if loop.extent % prod:
            raise IRError(f"factors {st.inner} do not divide extent {loop.extent}")
        parts_ext[0] = loop.extent // prod

    ids = [f"{st.loop}.{j}" for j in range(k + 1)]
    for pid in ids:
        if any(l.id == pid for l in s.loops):
            raise IRError(f"loop id {pid} already exists")

    # Linearity: innermost part inherits the parent's stride; each outer
    # part strides by the product of the extents inside it.
    new_loops: list[Loop] = []
    stride = loop.lin_stride
    strides: list[int | None] = [None] * (k + 1)
    strides[k] = stride
    for j in range(k - 1, -1, -1):
        inner_ext = parts_ext[j + 1]
        stride = None if (stride is None or inner_ext is None) else stride * inner_ext
        strides[j] = stride
    for j in range(k + 1):
        new_loops.append(Loop(ids[j], parts_ext[j], loop.kind,
                              lin_iter=loop.lin_iter, lin_stride=strides[j]))

    # Decode: original = (((p0*e1 + p1)*e2 + p2) ... )*ek + pk
    dec: Decode = DVar(ids[0])
    for j in range(1, k + 1):
        dec = DAdd(DMul(dec, st.inner[j - 1]), DVar(ids[j]))
    mapping = {st.loop: dec}

    loops = s.loops[:i] + tuple(new_loops) + s.loops[i + 1:]
    imap = tuple((n, d_subst(d, mapping)) for n, d in s.index_map)
    return p.with_stage(replace(s, loops=loops, index_map=imap))


def _apply_fuse(p: Program, st: Fuse) -> Program:
    s = p.stage(st.stage)
    i = s.loop_index(st.outer)
    j = s.loop_index(st.inner)
    if j != i + 1:
        raise IRError(f"fuse needs adjacent loops, got positions {i} and {j}")
    a, b = s.loops[i], s.loops[j]
    if a.kind != b.kind:
        raise IRError("fuse across space/reduce kinds")
    if a.extent is None or b.extent is None:
        raise IRError("fuse of symbolic loops")
    if a.annotation and b.annotation and a.annotation != b.annotation:
        raise IRError("fuse of differently annotated loops")
    fid = f"{a.id}@{b.id}"
    if any(l.id == fid for l in s.loops):
        raise IRError(f"loop id {fid} already exists")
    ext = a.extent * b.extent
    fused = Loop(fid, ext, a.kind, annotation=a.annotation or b.annotation,
                 lin_iter=b.lin_iter, lin_stride=b.lin_stride)
    mapping = {a.id: DDiv(DVar(fid), b.extent), b.id: DMod(DVar(fid), b.extent)}
    loops = s.loops[:i] + (fused,) + s.loops[j + 1:]
    imap = tuple((n, d_subst(d, mapping)) for n, d in s.index_map)
    p = p.with_stage(replace(s, loops=loops, index_map=imap))
    # Anything attached at either operand reattaches at the fused loop.
    out = p
    for other in p.stages:
        if other.compute_at and other.compute_at[0] == s.name and other.compute_at[1] in (a.id, b.id):
            out = _reattach(out, other.name, s.name, fid)
    return out


def _apply_reorder(p: Program, st: Reorder) -> Program:
    s = p.stage(st.stage)
    if sorted(st.order) != sorted(l.id for l in s.loops):
        raise IRError("reorder must permute exactly the current loops")
    by_id = {l.id: l for l in s.loops}
    loops = tuple(by_id[i] for i in st.order)
    return p.with_stage(replace(s, loops=loops))


def _attachment_case(p: Program, stage: Stage, target: Stage) -> str:
    """'producer' when the target reads the attached stage's buffer,
    'consumer' when the attached stage reads the target's buffer."""
    if any(r.buffer == stage.name for r in reads(target.expr)):
        return "producer"
    if any(r.buffer == target.name for r in reads(stage.expr)):
        return "consumer"
    raise IRError(f"{stage.name} and {target.name} share no buffer edge")


def _width_below(target: Stage, decode: Decode, attach_idx: int) -> int | None:
    """Static width of a decoded value's variation over the loops strictly
    inside the attach point, with enclosing loops pinned."""
    ranges: dict[str, tuple[int, int]] = {}
    for pos, l in enumerate(target.loops):
        if l.extent is None:
            return None
        ranges[l.id] = (0, 0) if pos <= attach_idx else (0, l.extent - 1)
    lo, hi = d_interval(decode, ranges)
    return hi - lo + 1


def _shrunk_space(p: Program, stage: Stage, target: Stage, attach_idx: int,
                  case: str) -> dict[str, int | None]:
    """Per space-iterator widths of the attached stage under one instance
    of the attach point."""
    tmap = target.decode()
    widths: dict[str, int | None] = {}
    if case == "producer":
        rds = [r for r in reads(target.expr) if r.buffer == stage.name]
        for d, (name, full) in enumerate(stage.space):
            w: int | None = 1
            for r in rds:
                dec = lin_to_decode(r.index[d], tmap)
                wd = _width_below(target, dec, attach_idx)
                if wd is None:
                    return {n: None for n, _ in stage.space}
                w = max(w, wd)
            widths[name] = min(w, full)
    else:
        if len(stage.space) != len(target.space):
            raise IRError(f"consumer {stage.name} rank differs from target {target.name}")
        for (name, full), (orig, _) in zip(stage.space, target.space):
            dec = tmap.get(orig, DVar(orig))
            wd = _width_below(target, dec, attach_idx)
            if wd is None:
                return {n: None for n, _ in stage.space}
            widths[name] = min(wd, full)
    return widths


def _with_widths(s: Stage, widths: dict[str, int | None]) -> tuple[Loop, ...]:
    return tuple(
        replace(l, extent=widths[l.id]) if l.id in widths else l for l in s.loops
    )


def _reattach(p: Program, stage_name: str, target_name: str, loop_id: str) -> Program:
    """Recompute an existing attachment at a new loop of the same target."""
    s = p.stage(stage_name)
    t = p.stage(target_name)
    idx = t.loop_index(loop_id)
    case = _attachment_case(p, s, t)
    widths = _shrunk_space(p, s, t, idx, case)
    return p.with_stage(replace(s, loops=_with_widths(s, widths),
                                compute_at=(target_name, loop_id)))


def _apply_compute_at(p: Program, st: ComputeAt) -> Program:
    s = p.stage(st.stage)
    if s.inlined:
        raise IRError(f"compute_at on inlined stage {s.name}")
    if not s.is_naive() and s.compute_at is None:
        raise IRError(f"compute_at requires a naive stage, {s.name} is transformed")
    if p.attached_to(s.name):
        raise IRError(f"{s.name} is an attach target itself")

    if st.target == "":
        # Detach to root: restore full extents.
        loops = tuple(
            replace(l, extent=dict((*s.space, *s.reduce))[l.id])
            for l in s.loops
        )
        return p.with_stage(replace(s, loops=loops, compute_at=None))

    if st.target == st.stage:
        raise IRError("cannot attach a stage to itself")
    t = p.stage(st.target)
    if t.inlined:
        raise IRError(f"attach target {t.name} is inlined")
    idx = t.loop_index(st.loop)
    case = _attachment_case(p, s, t)
    if case == "consumer":
        # The consumer writes once per covered point; running it under a
        # reduction loop would rewrite with partial values.
        for l in t.loops[: idx + 1]:
            if l.kind == REDUCE:
                raise IRError(
                    f"consumer {s.name} cannot attach under reduction loop {l.id} of {t.name}")
    widths = _shrunk_space(p, s, t, idx, case)
    return p.with_stage(replace(s, loops=_with_widths(s, widths),
                                compute_at=(st.target, st.loop)))


def _apply_inline(p: Program, st: Inline) -> Program:
    s = p.stage(st.stage)
    if s.inlined:
        raise IRError(f"{s.name} already inlined")
    if s.reduce:
        raise IRError(f"cannot inline reducing stage {s.name}")
    if s.compute_at is not None or not s.is_naive():
        raise IRError(f"cannot inline transformed stage {s.name}")
    readers = [r for r in p.readers_of(s.name) if r.name != s.name]
    if not readers:
        raise IRError(f"{s.name} has no readers to inline into")
    stages = []
    for other in p.stages:
        if other.name == s.name:
            stages.append(replace(other, inlined=True, loops=(), index_map=()))
        elif any(r.buffer == s.name for r in reads(other.expr)):
            stages.append(replace(other, expr=inline_reads(
                other.expr, s.name, s.space_names(), s.expr)))
        else:
            stages.append(other)
    return replace(p, stages=tuple(stages))


def _apply_cache_write(p: Program, st: CacheWrite) -> Program:
    s = p.stage(st.stage)
    if s.inlined or s.compute_at is not None or not s.is_naive():
        raise IRError(f"cache_write requires a naive root stage, got {s.name}")
    if p.attached_to(s.name):
        raise IRError(f"{s.name} is an attach target")
    cname = f"{s.name}.cache"
    if p.has_stage(cname):
        raise IRError(f"{cname} already exists")
    cache = naive_stage(cname, s.space, s.reduce, s.expr)
    copy_expr: Expr = Read(cname, tuple(Lin.var(n) for n in s.space_names()))
    copy = naive_stage(s.name, s.space, (), copy_expr)
    copy = replace(copy, pragma_unroll=s.pragma_unroll)
    cache = replace(cache, pragma_unroll=s.pragma_unroll)
    stages: list[Stage] = []
    for other in p.stages:
        if other.name == s.name:
            stages.append(cache)
            stages.append(copy)
        else:
            stages.append(other)
    return replace(p, stages=tuple(stages))


def _apply_rfactor(p: Program, st: Rfactor) -> Program:
    s = p.stage(st.stage)
    if s.inlined or s.compute_at is not None:
        raise IRError(f"rfactor requires a root stage, got {s.name}")
    if p.attached_to(s.name):
        raise IRError(f"{s.name} is an attach target")
    loop = s.loop(st.loop)
    if loop.kind != REDUCE:
        raise IRError(f"rfactor loop {st.loop} is not a reduction loop")
    red_loops = [l for l in s.loops if l.kind == REDUCE]
    if len(red_loops) != 1 or red_loops[0].id != st.loop:
        raise IRError("rfactor expects a single (fused) reduction loop")
    for name, _ in s.space:
        dec = s.decode().get(name)
        if not (isinstance(dec, DVar) and dec.loop == name):
            raise IRError("rfactor requires untransformed space loops")
    ext = loop.extent
    if ext is None:
        raise IRError("rfactor on symbolic loop")
    f = st.factor
    if f is not None:
        if f <= 0 or ext % f:
            raise IRError(f"rfactor factor {f} does not divide extent {ext}")
    pname = f"{s.name}.rf"
    if p.has_stage(pname):
        raise IRError(f"{pname} already exists")
    taken = {n for n, _ in (*s.space, *s.reduce)} | set(s.decode())
    rf_name, rk_name = "rf", "rk"
    while rf_name in taken or rk_name in taken:
        rf_name += "_"
        rk_name += "_"

    inner_ext = None if f is None else ext // f
    # Original fused position = rf * inner + rk.
    sub = {st.loop: DAdd(DMul(DVar(rf_name), inner_ext), DVar(rk_name))}
    part_map = ((rf_name, DVar(rf_name)),) + tuple(
        (n, d_subst(d, sub)) for n, d in s.index_map)
    part_loops = (
        (Loop(rf_name, f, SPACE, lin_iter=rf_name, lin_stride=1),)
        + tuple(Loop(n, e, SPACE, lin_iter=n, lin_stride=1) for n, e in s.space)
        + (Loop(rk_name, inner_ext, REDUCE),)
    )
    partial = Stage(pname, ((rf_name, f),) + s.space, ((rk_name, inner_ext),),
                    s.expr, part_loops, part_map)

    red_op = s.expr.op if isinstance(s.expr, Reduce) else "sum"
    final_expr: Expr = Reduce(red_op, (rf_name,),
                              Read(pname, tuple(Lin.var(n) for n in (rf_name, *s.space_names()))))
    final = naive_stage(s.name, s.space, ((rf_name, f),), final_expr)
    final = replace(final, pragma_unroll=s.pragma_unroll)
    partial = replace(partial, pragma_unroll=s.pragma_unroll)
    stages: list[Stage] = []
    for other in p.stages:
        if other.name == s.name:
            stages.append(partial)
            stages.append(final)
        else:
            stages.append(other)
    return replace(p, stages=tuple(stages))


def _apply_annotate(p: Program, st: Annotate) -> Program:
    s = p.stage(st.stage)
    if st.annotation not in ANNOTATIONS:
        raise IRError(f"unknown annotation {st.annotation!r}")
    i = s.loop_index(st.loop)
    loop = s.loops[i]
    if loop.kind != SPACE:
        raise IRError(f"{st.annotation} on reduction loop {loop.id}")
    loops = s.loops[:i] + (replace(loop, annotation=st.annotation),) + s.loops[i + 1:]
    return p.with_stage(replace(s, loops=loops))


def _apply_pragma(p: Program, st: SetPragma) -> Program:
    s = p.stage(st.stage)
    if st.unroll < 0:
        raise IRError("unroll budget must be non-negative")
    return p.with_stage(replace(s, pragma_unroll=st.unroll))


def _apply_layout(p: Program, st: LayoutRewrite) -> Program:
    node = p.dag.node(st.buffer) if st.buffer in p.dag else None
    if node is None or not node.is_placeholder or not node.is_constant:
        raise IRError(f"layout rewrite needs a constant placeholder, got {st.buffer!r}")
    shape = node.shape
    prods = [1] * len(shape)
    for dim, ext in st.descriptor:
        if not (0 <= dim < len(shape)) or ext <= 0:
            raise IRError(f"bad descriptor entry ({dim}, {ext})")
        prods[dim] *= ext
    if prods != list(shape):
        raise IRError(f"descriptor parts {prods} do not cover shape {list(shape)}")
    layouts = tuple((b, d) for b, d in p.layouts if b != st.buffer) + ((st.buffer, st.descriptor),)
    return replace(p, layouts=layouts)


def _apply_simplify(p: Program) -> Program:
    out = p
    for s in p.stages:
        if s.inlined:
            continue
        attach_targets = {st.compute_at[1] for st in p.stages
                          if st.compute_at and st.compute_at[0] == s.name}
        drop = [l.id for l in s.loops if l.extent == 1 and l.id not in attach_targets]
        if not drop:
            continue
        mapping = {lid: DConst(0) for lid in drop}
        loops = tuple(l for l in s.loops if l.id not in drop)
        imap = tuple((n, d_subst(d, mapping)) for n, d in s.index_map)
        out = out.with_stage(replace(out.stage(s.name), loops=loops, index_map=imap))
    return out


def apply_step(p: Program, step: RewriteStep) -> Program:
    """Apply one rewrite, append it to the history, return a new Program."""
    if isinstance(step, Split):
        out = _apply_split(p, step)
    elif isinstance(step, Fuse):
        out = _apply_fuse(p, step)
    elif isinstance(step, Reorder):
        out = _apply_reorder(p, step)
    elif isinstance(step, ComputeAt):
        out = _apply_compute_at(p, step)
    elif isinstance(step, Inline):
        out = _apply_inline(p, step)
    elif isinstance(step, CacheWrite):
        out = _apply_cache_write(p, step)
    elif isinstance(step, Rfactor):
        out = _apply_rfactor(p, step)
    elif isinstance(step, Annotate):
        out = _apply_annotate(p, step)
    elif isinstance(step, SetPragma):
        out = _apply_pragma(p, step)
    elif isinstance(step, LayoutRewrite):
        out = _apply_layout(p, step)
    elif isinstance(step, Simplify):
        out = _apply_simplify(p)
    else:
        raise IRError(f"unknown step {step!r}")
    return replace(out, history=p.history + (step,))


def replay(dag: ComputeDAG, history: tuple[RewriteStep, ...]) -> Program:
    p = naive_program(dag)
    for step in history:
        p = apply_step(p, step)
    return p


def simplify(p: Program) -> Program:
    """Append a Simplify step (idempotent on an already simplified nest)."""
    return apply_step(p, Simplify())


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(p: Program) -> list[str]:
    """Collect structural violations; an empty list means well formed.
    Symbolic programs skip extent arithmetic checks."""
    problems: list[str] = []
    seen: set[str] = set()
    for s in p.stages:
        if s.name in seen:
            problems.append(f"duplicate stage {s.name}")
        seen.add(s.name)

    # Producer-before-consumer over root-level execution order.
    pos = {s.name: i for i, s in enumerate(p.stages)}
    for s in p.live_stages():
        for r in reads(s.expr):
            if r.buffer in pos and pos[r.buffer] > pos[s.name]:
                problems.append(f"{s.name} reads {r.buffer} defined later")

    for s in p.stages:
        if s.inlined:
            if any(r.buffer == s.name for t in p.live_stages() for r in reads(t.expr)):
                problems.append(f"inlined stage {s.name} still has readers")
            continue

        ids = [l.id for l in s.loops]
        if len(set(ids)) != len(ids):
            problems.append(f"{s.name}: duplicate loop ids")

        concrete = all(l.extent is not None for l in s.loops)
        if concrete and s.compute_at is None:
            loop_prod = 1
            for l in s.loops:
                loop_prod *= l.extent
            dom = 1
            for _, e in (*s.space, *s.reduce):
                dom *= e
            if loop_prod != dom:
                problems.append(
                    f"{s.name}: loop volume {loop_prod} != iteration domain {dom}")

        covered: set[str] = set()
        for _, d in s.index_map:
            try:
                covered |= d_vars(d)
            except TypeError:
                problems.append(f"{s.name}: malformed decode")
        for l in s.loops:
            if l.id not in covered and l.extent != 1:
                problems.append(f"{s.name}: loop {l.id} not referenced by the decode map")

        par = [l for l in s.loops if l.annotation == "parallel"]
        if len(par) > 1:
            problems.append(f"{s.name}: multiple parallel loops")
        vec = [l for l in s.loops if l.annotation == "vectorize"]
        if len(vec) > 1:
            problems.append(f"{s.name}: multiple vectorized loops")
        if vec and s.loops and s.loops[-1].id != vec[0].id:
            problems.append(f"{s.name}: vectorize must sit on the innermost loop")

        if s.compute_at is not None:
            tname, lid = s.compute_at
            if not p.has_stage(tname):
                problems.append(f"{s.name}: attach target {tname} missing")
            else:
                t = p.stage(tname)
                if t.inlined:
                    problems.append(f"{s.name}: attach target {tname} is inlined")
                elif all(l.id != lid for l in t.loops):
                    problems.append(f"{s.name}: attach loop {lid} missing in {tname}")
                else:
                    try:
                        case = _attachment_case(p, s, t)
                    except IRError as e:
                        problems.append(str(e))
                        case = None
                    if case == "consumer":
                        idx = t.loop_index(lid)
                        if any(l.kind == REDUCE for l in t.loops[: idx + 1]):
                            problems.append(
                                f"{s.name}: consumer attached under a reduction loop of {tname}")

    for buf, desc in p.layouts:
        if buf not in p.dag or not p.dag.node(buf).is_constant:
            problems.append(f"layout on non-constant buffer {buf}")

    return problems


# ---------------------------------------------------------------------------
# History serialization
# ---------------------------------------------------------------------------


def step_to_json(st: RewriteStep) -> dict:
    if isinstance(st, Split):
        return {"k": "split", "stage": st.stage, "loop": st.loop, "inner": list(st.inner)}
    if isinstance(st, Fuse):
        return {"k": "fuse", "stage": st.stage, "outer": st.outer, "inner": st.inner}
    if isinstance(st, Reorder):
        return {"k": "reorder", "stage": st.stage, "order": list(st.order)}
    if isinstance(st, ComputeAt):
        return {"k": "compute_at", "stage": st.stage, "target": st.target, "loop": st.loop}
    if isinstance(st, Inline):
        return {"k": "inline", "stage": st.stage}
    if isinstance(st, CacheWrite):
        return {"k": "cache_write", "stage": st.stage}
    if isinstance(st, Rfactor):
        return {"k": "rfactor", "stage": st.stage, "loop": st.loop, "factor": st.factor}
    if isinstance(st, Annotate):
        return {"k": "annotate", "stage": st.stage, "loop": st.loop, "ann": st.annotation}
    if isinstance(st, SetPragma):
        return {"k": "pragma", "stage": st.stage, "unroll": st.unroll}
    if isinstance(st, LayoutRewrite):
        return {"k": "layout", "buffer": st.buffer, "desc": [list(x) for x in st.descriptor]}
    if isinstance(st, Simplify):
        return {"k": "simplify"}
    raise IRError(f"unknown step {st!r}")


def step_from_json(d: dict) -> RewriteStep:
    k = d["k"]
    if k == "split":
        return Split(d["stage"], d["loop"],
                     tuple(None if f is None else int(f) for f in d["inner"]))
    if k == "fuse":
        return Fuse(d["stage"], d["outer"], d["inner"])
    if k == "reorder":
        return Reorder(d["stage"], tuple(d["order"]))
    if k == "compute_at":
        return ComputeAt(d["stage"], d["target"], d["loop"])
    if k == "inline":
        return Inline(d["stage"])
    if k == "cache_write":
        return CacheWrite(d["stage"])
    if k == "rfactor":
        return Rfactor(d["stage"], d["loop"], None if d["factor"] is None else int(d["factor"]))
    if k == "annotate":
        return Annotate(d["stage"], d["loop"], d["ann"])
    if k == "pragma":
        return SetPragma(d["stage"], int(d["unroll"]))
    if k == "layout":
        return LayoutRewrite(d["buffer"], tuple((int(a), int(b)) for a, b in d["desc"]))
    if k == "simplify":
        return Simplify()
    raise IRError(f"unknown step tag {k!r}")


def history_to_json(history: tuple[RewriteStep, ...]) -> list[dict]:
    return [step_to_json(st) for st in history]


def history_from_json(items: list[dict]) -> tuple[RewriteStep, ...]:
    return tuple(step_from_json(d) for d in items)
