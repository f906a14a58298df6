"""Per-statement feature vectors from static access analysis.

Each live stage contributes one innermost statement. The analysis walks
the statement's full loop nest (host loops of an attachment chain
included), classifies every buffer it touches, and derives footprints,
reuse, and stride numbers analytically from the affine access decodes.
The same analysis feeds the machine model, which keeps the learned model
and the simulator looking at identical quantities.

Layout (164 entries per statement): 9 float-op counts, 9 int-op counts
(always zero here), three 11-wide annotation blocks (vectorize, unroll,
parallel: length, 8-way position one-hot, extent product, loop count),
8 GPU placeholders (zero), a 10-point arithmetic-intensity curve, five
18-wide buffer blocks, 2 allocation features, and 3 misc features.
Magnitudes are log2(1+x) compressed; one-hots are raw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .expr import Lin, op_counts, reads
from .ir import (
    REDUCE, SPACE, DDiv, DMod, Loop, Program, d_eval, d_interval, d_vars,
    lin_to_decode,
)

LINE_BYTES = 64
ELEM_BYTES = 4

FLOAT_OP_KINDS = ("add", "sub", "mul", "div", "minmax", "cmp", "math_call",
                  "select", "other")
POSITIONS = ("none", "inner_spatial", "middle_spatial", "outer_spatial",
             "inner_reduce", "middle_reduce", "outer_reduce", "mixed")
ACCESS_TYPES = ("read", "write", "read_write")
REUSE_TYPES = ("loop_multiple_read", "serial_multiple_read", "no_reuse")
N_BUFFERS = 5
CURVE_POINTS = 10

N_FEATURES = 164


def _buffer_block_names(i: int) -> list[str]:
    p = f"buf{i}_"
    return ([p + "acc_" + t for t in ACCESS_TYPES]
            + [p + n for n in ("bytes", "unique_bytes", "lines", "unique_lines")]
            + [p + "reuse_" + t for t in REUSE_TYPES]
            + [p + n for n in ("reuse_dist_iters", "reuse_dist_bytes",
                               "reuse_counter", "stride",
                               "bytes_per_reuse", "unique_bytes_per_reuse",
                               "lines_per_reuse", "unique_lines_per_reuse")])


FEATURE_NAMES: tuple[str, ...] = tuple(
    ["float_" + k for k in FLOAT_OP_KINDS]
    + ["int_" + k for k in FLOAT_OP_KINDS]
    + ["vec_len"] + ["vec_pos_" + p for p in POSITIONS] + ["vec_prod", "vec_num"]
    + ["unroll_len"] + ["unroll_pos_" + p for p in POSITIONS] + ["unroll_prod", "unroll_num"]
    + ["par_len"] + ["par_pos_" + p for p in POSITIONS] + ["par_prod", "par_num"]
    + [f"gpu_{n}" for n in ("blockidx_x", "blockidx_y", "blockidx_z",
                            "threadidx_x", "threadidx_y", "threadidx_z",
                            "vthread", "shared_mem")]
    + [f"intensity_{i}" for i in range(1, CURVE_POINTS + 1)]
    + [n for i in range(N_BUFFERS) for n in _buffer_block_names(i)]
    + ["alloc_bytes", "alloc_count"]
    + ["outer_loop_count", "outer_prod", "unroll_pragma"]
)

assert len(FEATURE_NAMES) == N_FEATURES

_ONEHOT = np.zeros(N_FEATURES, dtype=bool)
for _i, _n in enumerate(FEATURE_NAMES):
    if ("_pos_" in _n or "_acc_" in _n
            or any(_n.endswith("_reuse_" + t) for t in REUSE_TYPES)):
        _ONEHOT[_i] = True


@dataclass
class BufferAccess:
    buffer: str
    acc_type: str
    n_accesses: int
    present: frozenset[str]
    touches: float
    total_bytes: float
    lines: float
    unique_bytes: float
    unique_lines: float
    reuse_type: str
    reuse_counter: float
    dist_iters: float
    dist_bytes: float
    stride: float


@dataclass
class StatementAnalysis:
    stage: str
    nest: tuple[Loop, ...]
    own_start: int
    total_iters: float
    ops: dict[str, int]
    ops_total: int
    accesses: list[BufferAccess]
    ws_inside: list[float]
    alloc_bytes: float
    pragma_unroll: int
    alloc_count: int = 1


def _nest_above(p: Program, name: str) -> list[Loop]:
    s = p.stage(name)
    if s.compute_at is None:
        return []
    target, lid = s.compute_at
    tl = p.stage(target).loops
    idx = next(i for i, l in enumerate(tl) if l.id == lid)
    return _nest_above(p, target) + list(tl[: idx + 1])


def _phys_decodes(decs, descriptor):
    """Map logical per-dim decodes through a packing descriptor."""
    strides: list[int] = []
    for i, (d, ext) in enumerate(descriptor):
        st = 1
        for d2, e2 in descriptor[i + 1:]:
            if d2 == d:
                st *= e2
        strides.append(st)
    out = []
    for (d, ext), st in zip(descriptor, strides):
        dec = decs[d]
        if st > 1:
            dec = DDiv(dec, st)
        dec = DMod(dec, ext)
        out.append((dec, ext))
    return out


def _hull(dims_decs, ranges) -> list[int]:
    widths = []
    for dec, size in dims_decs:
        lo, hi = d_interval(dec, ranges)
        lo = max(lo, 0)
        hi = min(hi, size - 1)
        widths.append(max(hi - lo + 1, 1))
    return widths


def _lines_of(widths: list[int]) -> float:
    lines = 1.0
    for w in widths[:-1]:
        lines *= w
    last = widths[-1] if widths else 1
    return lines * max(1.0, math.ceil(last * ELEM_BYTES / LINE_BYTES))


def analyze_program(p: Program) -> list[StatementAnalysis]:
    layouts = dict(p.layouts)
    live = [s for s in p.stages if not s.inlined]
    n_live = len(live)
    out: list[StatementAnalysis] = []

    for s in live:
        above = [l for l in _nest_above(p, s.name) if (l.extent or 1) > 1]
        own = [l for l in s.loops if (l.extent or 1) > 1]
        nest = tuple(above) + tuple(own)
        own_start = len(above)
        total_iters = 1.0
        for l in nest:
            total_iters *= l.extent
        ops = op_counts(s.expr) if s.expr is not None else {}
        ops_total = sum(ops.values())

        decode = dict(s.index_map)
        # Unit loops are filtered from the nest but may still appear in
        # decode expressions; pin them to zero.
        own_ranges = {l.id: (0, (l.extent or 1) - 1) for l in s.loops}

        # buffer name -> (dims_decs [(decode, size)], list of access marks)
        views: dict[str, tuple[list, list[str]]] = {}

        def add_access(buffer: str, lins, mark: str) -> None:
            shape = p.buffer_shape(buffer)
            decs = [lin_to_decode(l, decode) for l in lins]
            if buffer in layouts:
                dims_decs = _phys_decodes(decs, layouts[buffer])
            else:
                dims_decs = list(zip(decs, shape))
            if buffer not in views:
                views[buffer] = (dims_decs, [])
            views[buffer][1].append(mark)

        if s.expr is not None:
            for r in reads(s.expr):
                add_access(r.buffer, r.index, "read")
        add_access(s.name, [Lin.var(n) for n, _ in s.space], "write")

        reduce_prod = 1.0
        for l in own:
            if l.kind == REDUCE:
                reduce_prod *= l.extent

        accesses: list[BufferAccess] = []
        for buffer, (dims_decs, marks) in views.items():
            n_acc = len(marks)
            has_w = "write" in marks
            has_r = "read" in marks or (has_w and reduce_prod > 1)
            acc_type = ("read_write" if has_w and has_r
                        else "write" if has_w else "read")
            present = frozenset().union(*(d_vars(dec) for dec, _ in dims_decs)) \
                if dims_decs else frozenset()

            widths = _hull(dims_decs, own_ranges)
            unique_bytes = float(np.prod(widths)) * ELEM_BYTES if widths else ELEM_BYTES
            unique_lines = _lines_of(widths)
            touches = float(n_acc) * total_iters
            total_bytes = touches * ELEM_BYTES
            lines = total_bytes / LINE_BYTES

            absent = [(i, l) for i, l in enumerate(nest)
                      if l.id not in present and l.extent > 1]
            if has_w and s.reduce and reduce_prod > 1:
                reuse_type = "serial_multiple_read"
                counter = reduce_prod
                dist_iters, dist_bytes = 1.0, float(ELEM_BYTES * n_acc)
            elif absent:
                reuse_type = "loop_multiple_read"
                counter = 1.0
                for _, l in absent:
                    counter *= l.extent
                innermost_pos = absent[-1][0]
                dist_iters = 1.0
                for l in nest[innermost_pos + 1:]:
                    dist_iters *= l.extent
                dist_bytes = dist_iters * ELEM_BYTES * n_acc
            else:
                reuse_type = "no_reuse"
                counter, dist_iters, dist_bytes = 1.0, 0.0, 0.0

            stride = 0.0
            if own and own[-1].id in present:
                inner = own[-1].id
                flat_strides: list[int] = []
                acc = 1
                for _, size in reversed(dims_decs):
                    flat_strides.append(acc)
                    acc *= size
                flat_strides.reverse()
                env0 = {l.id: 0 for l in s.loops}
                env1 = dict(env0, **{inner: 1})
                a0 = sum(_clip(d_eval(dec, env0), size) * fs
                         for (dec, size), fs in zip(dims_decs, flat_strides))
                a1 = sum(_clip(d_eval(dec, env1), size) * fs
                         for (dec, size), fs in zip(dims_decs, flat_strides))
                stride = abs(a1 - a0) * ELEM_BYTES

            accesses.append(BufferAccess(
                buffer, acc_type, n_acc, present, touches, total_bytes, lines,
                unique_bytes, unique_lines, reuse_type, counter, dist_iters,
                dist_bytes, stride))

        ws_inside: list[float] = []
        for pos in range(len(nest)):
            free = {l.id for l in nest[pos + 1:]}
            ws = 0.0
            for buffer, (dims_decs, _) in views.items():
                ranges = {l.id: ((0, (l.extent or 1) - 1) if l.id in free else (0, 0))
                          for l in s.loops}
                ws += float(np.prod(_hull(dims_decs, ranges))) * ELEM_BYTES
            ws_inside.append(ws)

        alloc = float(ELEM_BYTES)
        for l in own:
            if l.kind == SPACE:
                alloc *= l.extent

        out.append(StatementAnalysis(
            s.name, nest, own_start, total_iters, ops, ops_total, accesses,
            ws_inside, alloc, s.pragma_unroll, n_live))
    return out


def _clip(v: int, size: int) -> int:
    return min(max(v, 0), size - 1)


# ---------------------------------------------------------------------------
# Annotation block helpers
# ---------------------------------------------------------------------------


def _position(nest: tuple[Loop, ...], idx: int) -> str:
    loop = nest[idx]
    same = [i for i, l in enumerate(nest) if l.kind == loop.kind]
    rank = same.index(idx)
    suffix = "spatial" if loop.kind == SPACE else "reduce"
    if rank == len(same) - 1:
        return "inner_" + suffix
    if rank == 0 and len(same) > 1:
        return "outer_" + suffix
    return "middle_" + suffix


def _annotation_block(nest, which: str) -> list[float]:
    hits = [(i, l) for i, l in enumerate(nest) if l.annotation == which]
    block = [0.0] * 11
    if not hits:
        block[1 + POSITIONS.index("none")] = 1.0
        return block
    length = float(hits[-1][1].extent)
    prod = 1.0
    for _, l in hits:
        prod *= l.extent
    pos = {_position(nest, i) for i, _ in hits}
    tag = pos.pop() if len(pos) == 1 else "mixed"
    block[0] = length
    block[1 + POSITIONS.index(tag)] = 1.0
    block[9] = prod
    block[10] = float(len(hits))
    return block


def _unroll_block(sa: StatementAnalysis) -> list[float]:
    block = [0.0] * 11
    budget = sa.pragma_unroll
    own = sa.nest[sa.own_start:]
    if budget <= 0 or not own:
        block[1 + POSITIONS.index("none")] = 1.0
        return block
    covered: list[int] = []
    prod = 1
    for i in range(len(sa.nest) - 1, sa.own_start - 1, -1):
        if prod * sa.nest[i].extent > budget:
            break
        prod *= sa.nest[i].extent
        covered.append(i)
    if not covered:
        block[1 + POSITIONS.index("none")] = 1.0
        return block
    pos = {_position(sa.nest, i) for i in covered}
    tag = pos.pop() if len(pos) == 1 else "mixed"
    block[0] = float(sa.nest[covered[0]].extent)
    block[1 + POSITIONS.index(tag)] = 1.0
    block[9] = float(prod)
    block[10] = float(len(covered))
    return block


def unroll_coverage(sa: StatementAnalysis) -> int:
    """Product of innermost own-loop extents covered by the unroll budget."""
    prod = 1
    for i in range(len(sa.nest) - 1, sa.own_start - 1, -1):
        if prod * sa.nest[i].extent > sa.pragma_unroll:
            break
        prod *= sa.nest[i].extent
    return max(prod, 1)


def _intensity_curve(sa: StatementAnalysis) -> list[float]:
    n = len(sa.nest)
    if n == 0 or sa.ops_total == 0:
        return [0.0] * CURVE_POINTS
    pts = []
    iters_inside = [1.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        iters_inside[i] = iters_inside[i + 1] * sa.nest[i].extent
    for j in range(1, CURVE_POINTS + 1):
        depth = max(1, math.ceil(j / CURVE_POINTS * n))
        pos = n - depth
        flops = sa.ops_total * iters_inside[pos]
        if pos == 0:
            bytes_ = sum(a.unique_bytes for a in sa.accesses)
        else:
            bytes_ = sa.ws_inside[pos - 1]
        pts.append(flops / max(bytes_, 1.0))
    return pts


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def statement_features(sa: StatementAnalysis) -> np.ndarray:
    v: list[float] = []
    v += [float(sa.ops.get(k, 0)) * sa.total_iters for k in FLOAT_OP_KINDS]
    v += [0.0] * len(FLOAT_OP_KINDS)
    v += _annotation_block(sa.nest, "vectorize")
    v += _unroll_block(sa)
    v += _annotation_block(sa.nest, "parallel")
    v += [0.0] * 8
    v += _intensity_curve(sa)

    ranked = sorted(sa.accesses, key=lambda a: (-a.total_bytes, a.buffer))[:N_BUFFERS]
    for a in ranked:
        block = [0.0] * 3
        block[ACCESS_TYPES.index(a.acc_type)] = 1.0
        v += block
        v += [a.total_bytes, a.unique_bytes, a.lines, a.unique_lines]
        block = [0.0] * 3
        block[REUSE_TYPES.index(a.reuse_type)] = 1.0
        v += block
        v += [a.dist_iters, a.dist_bytes, a.reuse_counter, a.stride]
        c = max(a.reuse_counter, 1.0)
        v += [a.total_bytes / c, a.unique_bytes / c, a.lines / c, a.unique_lines / c]
    v += [0.0] * (18 * (N_BUFFERS - len(ranked)))

    v += [sa.alloc_bytes, float(sa.alloc_count)]
    v += [float(len(sa.nest)), sa.total_iters, float(sa.pragma_unroll)]

    arr = np.asarray(v, dtype=np.float64)
    out = np.where(_ONEHOT, arr, np.log2(1.0 + np.maximum(arr, 0.0)))
    return out


def extract_features(p: Program) -> np.ndarray:
    """One 164-wide row per live statement, in program order."""
    rows = [statement_features(sa) for sa in analyze_program(p)]
    if not rows:
        return np.zeros((0, N_FEATURES))
    return np.vstack(rows)
