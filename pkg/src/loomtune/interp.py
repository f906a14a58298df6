"""Reference interpreter for scheduled programs.

The interpreter really executes the loop structure: attachments run inside
their target loop's iterations (producers before the host body, consumers
after), cache and rfactor stages write real buffers, packed layouts are
materialized physically, and reduction initialization happens at the point
just before the first interpreted reduction loop of a stage. Everything
below the deepest attachment (or a volume cap) is evaluated with vectorized
numpy over a grid of the remaining loops, decoding loop variables to
original iterator values through the stage's index map.

Out-of-bounds reads raise with the stage and buffer named instead of
wrapping around; a wrong transform fails loudly here rather than producing
silently shifted numbers. Annotations and pragmas are performance hints
only and change nothing about the values computed.
"""

from __future__ import annotations

import numpy as np

from .expr import REDUCE_IDENTITY, Reduce, evaluate, reads
from .graph import ComputeDAG
from .ir import (
    REDUCE as R_KIND, DVar, Program, Stage, _attachment_case, d_eval,
    d_interval, lin_to_decode,
)

# Largest vectorized grid evaluated in one shot; bigger nests get their
# outer loops interpreted one iteration at a time.
GRID_LIMIT = 1 << 22


class InterpreterError(RuntimeError):
    pass


def random_inputs(dag: ComputeDAG, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for node in dag.nodes:
        if node.is_placeholder:
            out[node.name] = rng.uniform(0.25, 1.0, size=node.shape)
    return out


def reference_outputs(dag: ComputeDAG, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Direct per-node evaluation in dependency order, no loop IR involved.
    This is the ground truth the interpreter is compared against."""
    bufs = dict(inputs)

    def read_fn(buffer: str, idx: tuple[np.ndarray, ...], mask: np.ndarray) -> np.ndarray:
        return _checked_gather(bufs[buffer], buffer, idx, mask, context="reference")

    from .graph import topological_order
    for name in reversed(topological_order(dag)):
        node = dag.node(name)
        if node.is_placeholder:
            continue
        axes = (*node.space, *node.reduce)
        grids = np.meshgrid(*[np.arange(e) for _, e in axes], indexing="ij",
                            sparse=True) if axes else []
        env = {n: g for (n, _), g in zip(axes, grids)}
        shape = tuple(e for _, e in axes)
        mask = np.ones(shape, dtype=bool)
        body = node.body.body if isinstance(node.body, Reduce) else node.body
        vals = np.broadcast_to(np.asarray(evaluate(body, env, read_fn, mask), dtype=np.float64),
                               shape)
        if node.reduce:
            red_axes = tuple(range(len(node.space), len(axes)))
            op = node.body.op
            vals = np.add.reduce(vals, axis=red_axes) if op == "sum" \
                else np.maximum.reduce(vals, axis=red_axes)
        bufs[name] = np.array(vals, dtype=np.float64)
    return {name: bufs[name] for name in dag.outputs}


def _checked_gather(buf: np.ndarray, name: str, idx: tuple[np.ndarray, ...],
                    mask: np.ndarray, context: str) -> np.ndarray:
    if len(idx) != buf.ndim:
        raise InterpreterError(f"{context}: read of {name} has rank {len(idx)}, buffer rank {buf.ndim}")
    shape = np.broadcast_shapes(mask.shape, *[np.shape(i) for i in idx])
    mask_b = np.broadcast_to(mask, shape)
    safe = []
    for d, i in enumerate(idx):
        arr = np.broadcast_to(np.asarray(i), shape)
        bad = mask_b & ((arr < 0) | (arr >= buf.shape[d]))
        if bad.any():
            lo, hi = int(arr[bad].min()), int(arr[bad].max())
            raise InterpreterError(
                f"{context}: read of {name} out of bounds on dim {d}: "
                f"indices in [{lo}, {hi}], extent {buf.shape[d]}")
        safe.append(np.where(mask_b, arr, 0))
    return buf[tuple(safe)]


# ---------------------------------------------------------------------------
# Packed layouts
# ---------------------------------------------------------------------------


def _pack_strides(desc: tuple[tuple[int, int], ...], rank: int) -> list[int]:
    """Per-entry stride inside its original dim: product of this dim's
    later (inner) parts."""
    strides = [1] * len(desc)
    for j in range(len(desc)):
        dim = desc[j][0]
        s = 1
        for k in range(j + 1, len(desc)):
            if desc[k][0] == dim:
                s *= desc[k][1]
        strides[j] = s
    return strides


def pack_buffer(buf: np.ndarray, desc: tuple[tuple[int, int], ...]) -> np.ndarray:
    strides = _pack_strides(desc, buf.ndim)
    phys_shape = tuple(e for _, e in desc)
    digits = np.indices(phys_shape)
    logical = [np.zeros(phys_shape, dtype=np.int64) for _ in range(buf.ndim)]
    for j, (dim, _) in enumerate(desc):
        logical[dim] = logical[dim] + digits[j] * strides[j]
    return buf[tuple(logical)]


def _packed_gather(phys: np.ndarray, desc: tuple[tuple[int, int], ...],
                   name: str, logical_shape: tuple[int, ...],
                   idx: tuple[np.ndarray, ...], mask: np.ndarray,
                   context: str) -> np.ndarray:
    shape = np.broadcast_shapes(mask.shape, *[np.shape(i) for i in idx])
    mask_b = np.broadcast_to(mask, shape)
    strides = _pack_strides(desc, len(logical_shape))
    phys_idx = []
    for d, i in enumerate(idx):
        arr = np.broadcast_to(np.asarray(i), shape)
        bad = mask_b & ((arr < 0) | (arr >= logical_shape[d]))
        if bad.any():
            raise InterpreterError(
                f"{context}: packed read of {name} out of bounds on dim {d}")
    for j, (dim, ext) in enumerate(desc):
        arr = np.broadcast_to(np.asarray(idx[dim]), shape)
        arr = np.where(mask_b, arr, 0)
        phys_idx.append((arr // strides[j]) % ext)
    return phys[tuple(phys_idx)]


# ---------------------------------------------------------------------------
# Stage execution
# ---------------------------------------------------------------------------


class _Runner:
    def __init__(self, program: Program, bufs: dict[str, np.ndarray],
                 packed: dict[str, tuple[np.ndarray, tuple[tuple[int, int], ...]]]):
        self.p = program
        self.bufs = bufs
        self.packed = packed

    def read_fn_for(self, stage_name: str):
        def read_fn(buffer: str, idx: tuple[np.ndarray, ...], mask: np.ndarray) -> np.ndarray:
            if buffer in self.packed:
                phys, desc = self.packed[buffer]
                return _packed_gather(phys, desc, buffer, self.p.buffer_shape(buffer),
                                      idx, mask, context=f"stage {stage_name}")
            if buffer not in self.bufs:
                raise InterpreterError(f"stage {stage_name}: read of unallocated buffer {buffer}")
            return _checked_gather(self.bufs[buffer], buffer, idx, mask,
                                   context=f"stage {stage_name}")
        return read_fn

    def exec_stage(self, stage: Stage, offsets: dict[str, int]) -> None:
        attach = {}
        for child in self.p.attached_to(stage.name):
            attach.setdefault(child.compute_at[1], []).append(child)

        loops = stage.loops
        deepest = -1
        for i, l in enumerate(loops):
            if l.id in attach:
                deepest = i
        # Extend the interpreted prefix until the remaining grid fits.
        vol = 1
        for l in loops:
            vol *= max(1, l.extent)
        prefix = deepest + 1
        while prefix < len(loops) and vol > GRID_LIMIT:
            vol //= max(1, loops[prefix].extent)
            prefix += 1

        init_idx = None
        if any(l.kind == R_KIND for l in loops[:prefix]):
            init_idx = next(i for i, l in enumerate(loops) if l.kind == R_KIND)

        env: dict[str, int] = {}
        self._run(stage, offsets, attach, loops, prefix, init_idx, 0, env)

    def _init_region(self, stage: Stage, offsets: dict[str, int],
                     env: dict[str, int]) -> None:
        free = [l for l in stage.loops if l.id not in env and l.kind != R_KIND]
        grids = np.meshgrid(*[np.arange(l.extent) for l in free], indexing="ij",
                            sparse=True) if free else []
        genv: dict[str, object] = dict(env)
        for l, g in zip(free, grids):
            genv[l.id] = g
        dec = stage.decode()
        idx = tuple(
            np.asarray(d_eval(dec[name], genv)) + offsets.get(name, 0)
            for name, _ in stage.space
        )
        op = stage.expr.op if isinstance(stage.expr, Reduce) else "sum"
        self.bufs[stage.name][idx] = REDUCE_IDENTITY[op]

    def _invoke_attachments(self, children: list[Stage], host: Stage,
                            host_offsets: dict[str, int], env: dict[str, int],
                            phase: str) -> None:
        for child in children:
            case = _attachment_case(self.p, child, host)
            if (case == "producer") != (phase == "before"):
                continue
            ranges: dict[str, tuple[int, int]] = {}
            for pos, l in enumerate(host.loops):
                if l.id in env:
                    v = env[l.id]
                    ranges[l.id] = (v, v)
                else:
                    ranges[l.id] = (0, l.extent - 1)
            hmap = host.decode()
            child_offsets: dict[str, int] = {}
            if case == "producer":
                rds = [r for r in reads(host.expr) if r.buffer == child.name]
                dims = self.p.buffer_shape(child.name)
                for d, (name, _) in enumerate(child.space):
                    lo = None
                    for r in rds:
                        dec = lin_to_decode(r.index[d], hmap)
                        a, _ = d_interval(dec, ranges)
                        a += sum(c * host_offsets.get(it, 0) for it, c in r.index[d].terms)
                        lo = a if lo is None else min(lo, a)
                    lo = 0 if lo is None else lo
                    width = self._child_width(child, name)
                    child_offsets[name] = max(0, min(lo, dims[d] - width))
            else:
                dims = self.p.buffer_shape(host.name)
                for (name, _), (orig, _2), dim in zip(child.space, host.space, dims):
                    dec = hmap.get(orig, DVar(orig))
                    a, _ = d_interval(dec, ranges)
                    a += host_offsets.get(orig, 0)
                    width = self._child_width(child, name)
                    child_offsets[name] = max(0, min(a, dim - width))
            self.exec_stage(child, child_offsets)

    @staticmethod
    def _child_width(child: Stage, iter_name: str) -> int:
        for l in child.loops:
            if l.id == iter_name:
                return l.extent
        return 1

    def _run(self, stage: Stage, offsets: dict[str, int], attach, loops,
             prefix: int, init_idx: int | None, idx: int, env: dict[str, int]) -> None:
        if idx == prefix:
            self._vector_eval(stage, offsets, loops[prefix:], env,
                              accumulate=init_idx is not None)
            return
        if idx == init_idx:
            self._init_region(stage, offsets, env)
        loop = loops[idx]
        children = attach.get(loop.id, [])
        for v in range(loop.extent):
            env[loop.id] = v
            if children:
                self._invoke_attachments(children, stage, offsets, env, "before")
            self._run(stage, offsets, attach, loops, prefix, init_idx, idx + 1, env)
            if children:
                self._invoke_attachments(children, stage, offsets, env, "after")
        del env[loop.id]

    def _vector_eval(self, stage: Stage, offsets: dict[str, int],
                     tail: tuple, env: dict[str, int], accumulate: bool) -> None:
        grids = np.meshgrid(*[np.arange(l.extent) for l in tail], indexing="ij",
                            sparse=True) if tail else []
        shape = tuple(l.extent for l in tail)
        genv: dict[str, object] = dict(env)
        for l, g in zip(tail, grids):
            genv[l.id] = g
        dec = stage.decode()
        ienv: dict[str, object] = {}
        for name, d in stage.index_map:
            val = d_eval(d, genv)
            off = offsets.get(name, 0)
            ienv[name] = val + off if off else val

        mask = np.ones(shape, dtype=bool)
        body = stage.expr.body if isinstance(stage.expr, Reduce) else stage.expr
        vals = np.asarray(
            evaluate(body, ienv, self.read_fn_for(stage.name), mask), dtype=np.float64)
        vals = np.broadcast_to(vals, shape)

        red_pos = tuple(i for i, l in enumerate(tail) if l.kind == R_KIND)
        op = stage.expr.op if isinstance(stage.expr, Reduce) else None
        if red_pos:
            vals = np.add.reduce(vals, axis=red_pos) if op == "sum" \
                else np.maximum.reduce(vals, axis=red_pos)
        keep = tuple(0 if i in red_pos else slice(None) for i in range(len(tail)))
        widx = tuple(
            np.broadcast_to(np.asarray(ienv[name]), shape)[keep]
            for name, _ in stage.space
        )
        buf = self.bufs[stage.name]
        if accumulate:
            if op == "max":
                buf[widx] = np.maximum(buf[widx], vals)
            else:
                buf[widx] += vals
        else:
            buf[widx] = vals


def interpret(program: Program, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Execute a concrete program; returns one array per DAG output."""
    if not program.is_concrete():
        raise InterpreterError("program has unresolved symbolic extents")

    bufs: dict[str, np.ndarray] = {}
    for node in program.dag.nodes:
        if not node.is_placeholder:
            continue
        if node.name not in inputs:
            raise InterpreterError(f"missing input {node.name}")
        arr = np.asarray(inputs[node.name], dtype=np.float64)
        if arr.shape != node.shape:
            raise InterpreterError(
                f"input {node.name} has shape {arr.shape}, expected {node.shape}")
        bufs[node.name] = arr

    packed: dict[str, tuple[np.ndarray, tuple[tuple[int, int], ...]]] = {}
    for buffer, desc in program.layouts:
        packed[buffer] = (pack_buffer(bufs[buffer], desc), desc)

    for s in program.live_stages():
        bufs[s.name] = np.full(program.buffer_shape(s.name), np.nan)

    runner = _Runner(program, bufs, packed)
    for s in program.root_stages():
        runner.exec_stage(s, {})

    out = {}
    for name in program.dag.outputs:
        arr = bufs[name]
        if np.isnan(arr).any():
            raise InterpreterError(f"output {name} has unwritten cells")
        out[name] = arr
    return out


def check_program(program: Program, rng: np.random.Generator,
                  tol: float = 1e-9) -> None:
    """Interpret on random inputs and compare to direct evaluation."""
    inputs = random_inputs(program.dag, rng)
    got = interpret(program, inputs)
    want = reference_outputs(program.dag, inputs)
    for name, arr in want.items():
        if not np.allclose(got[name], arr, rtol=tol, atol=tol):
            worst = float(np.max(np.abs(got[name] - arr)))
            raise InterpreterError(f"output {name} mismatch, max abs err {worst:.3e}")
