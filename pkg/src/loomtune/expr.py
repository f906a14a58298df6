"""Scalar expression trees used by compute definitions.

A tensor program's per-element computation is a small closed expression
language: constants, affine combinations of iterators, buffer reads at affine
indices, arithmetic/comparison binaries, a couple of unary math calls, a
select, and (only at the root of a node's body) a reduction. Keeping reads
affine is what makes loop transforms analyzable: every downstream pass
(inlining, tiling decode, region inference, feature extraction) composes
affine maps instead of inspecting arbitrary code.

Evaluation is vectorized: `evaluate` maps an expression over numpy arrays
bound to iterator names. Buffer access is delegated to a caller-supplied
gather function so the interpreter can layer bounds checks and packed
layouts on top without this module knowing about either. A boolean mask
threads through Select so that reads on a not-taken branch are never
bounds-checked where the branch is not selected; that is what lets a padding
node read `x[h - pad]` guarded by a Select without tripping out-of-bounds
errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

# ---------------------------------------------------------------------------
# Affine index forms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lin:
    """Affine combination of iterators: sum(coeff * iter) + const.

    Terms are kept sorted by iterator name so structurally equal forms
    compare equal.
    """

    terms: tuple[tuple[str, int], ...] = ()
    const: int = 0

    @staticmethod
    def var(name: str, coeff: int = 1) -> "Lin":
        if coeff == 0:
            return Lin((), 0)
        return Lin(((name, coeff),), 0)

    @staticmethod
    def of(const: int) -> "Lin":
        return Lin((), const)

    def __add__(self, other: "Lin") -> "Lin":
        acc: dict[str, int] = dict(self.terms)
        for name, c in other.terms:
            acc[name] = acc.get(name, 0) + c
        terms = tuple(sorted((n, c) for n, c in acc.items() if c != 0))
        return Lin(terms, self.const + other.const)

    def shift(self, k: int) -> "Lin":
        return Lin(self.terms, self.const + k)

    def scale(self, k: int) -> "Lin":
        if k == 0:
            return Lin((), 0)
        return Lin(tuple((n, c * k) for n, c in self.terms), self.const * k)

    def iters(self) -> frozenset[str]:
        return frozenset(n for n, _ in self.terms)

    def coeff(self, name: str) -> int:
        for n, c in self.terms:
            if n == name:
                return c
        return 0

    def is_single_var(self) -> bool:
        """True when the form is exactly one iterator with coefficient 1."""
        return self.const == 0 and len(self.terms) == 1 and self.terms[0][1] == 1

    def substitute(self, mapping: dict[str, "Lin"]) -> "Lin":
        """Compose with another affine map; iterators absent from the
        mapping are left as themselves."""
        out = Lin.of(self.const)
        for name, c in self.terms:
            repl = mapping.get(name, Lin.var(name))
            out = out + repl.scale(c)
        return out

    def evaluate(self, env: dict[str, np.ndarray | int]):
        out: np.ndarray | int = self.const
        for name, c in self.terms:
            out = out + c * env[name]
        return out

    def interval(self, ranges: dict[str, tuple[int, int]]) -> tuple[int, int]:
        """Inclusive [lo, hi] bounds given inclusive per-iterator ranges."""
        lo = hi = self.const
        for name, c in self.terms:
            a, b = ranges[name]
            if c >= 0:
                lo += c * a
                hi += c * b
            else:
                lo += c * b
                hi += c * a
        return lo, hi

    def __repr__(self) -> str:
        parts = [f"{c}*{n}" if c != 1 else n for n, c in self.terms]
        if self.const or not parts:
            parts.append(str(self.const))
        return "+".join(parts)


# ---------------------------------------------------------------------------
# Expression nodes
# ---------------------------------------------------------------------------

BINARY_OPS = ("add", "sub", "mul", "div", "max", "min", "lt", "le", "gt", "ge", "eq")
COMPARE_OPS = ("lt", "le", "gt", "ge", "eq")
CALL_FNS = ("exp", "sqrt", "log", "abs")
REDUCE_OPS = ("sum", "max")


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class IterVal:
    """The numeric value of an affine iterator combination."""

    lin: Lin


@dataclass(frozen=True)
class Read:
    buffer: str
    index: tuple[Lin, ...]


@dataclass(frozen=True)
class Bin:
    op: str
    lhs: "Expr"
    rhs: "Expr"

    def __post_init__(self) -> None:
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary op {self.op!r}")


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Expr"

    def __post_init__(self) -> None:
        if self.fn not in CALL_FNS:
            raise ValueError(f"unknown call {self.fn!r}")


@dataclass(frozen=True)
class Select:
    cond: "Expr"
    then: "Expr"
    other: "Expr"


@dataclass(frozen=True)
class Reduce:
    """Reduction over named axes; legal only at the root of a node body."""

    op: str
    axes: tuple[str, ...]
    body: "Expr"

    def __post_init__(self) -> None:
        if self.op not in REDUCE_OPS:
            raise ValueError(f"unknown reduce op {self.op!r}")


Expr = Const | IterVal | Read | Bin | Call | Select | Reduce

REDUCE_IDENTITY = {"sum": 0.0, "max": -np.inf}


# ---------------------------------------------------------------------------
# Structure helpers
# ---------------------------------------------------------------------------


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, Bin):
        return (e.lhs, e.rhs)
    if isinstance(e, Call):
        return (e.arg,)
    if isinstance(e, Select):
        return (e.cond, e.then, e.other)
    if isinstance(e, Reduce):
        return (e.body,)
    return ()


def walk(e: Expr) -> Iterator[Expr]:
    yield e
    for c in children(e):
        yield from walk(c)


def reads(e: Expr) -> tuple[Read, ...]:
    return tuple(n for n in walk(e) if isinstance(n, Read))


def iter_names(e: Expr) -> frozenset[str]:
    names: set[str] = set()
    for n in walk(e):
        if isinstance(n, IterVal):
            names |= n.lin.iters()
        elif isinstance(n, Read):
            for lin in n.index:
                names |= lin.iters()
        elif isinstance(n, Reduce):
            names |= set(n.axes)
    return frozenset(names)


def root_reduce(e: Expr) -> Reduce | None:
    return e if isinstance(e, Reduce) else None


def validate_expr(e: Expr, at_root: bool = True) -> list[str]:
    """Structural violations: reductions below the root, non-sorted forms."""
    problems: list[str] = []
    if isinstance(e, Reduce):
        if not at_root:
            problems.append("reduction below expression root")
        problems.extend(validate_expr(e.body, at_root=False))
        return problems
    for c in children(e):
        problems.extend(validate_expr(c, at_root=False))
    return problems


def substitute_iters(e: Expr, mapping: dict[str, Lin]) -> Expr:
    """Rewrite every affine form through an iterator substitution."""
    if isinstance(e, (Const,)):
        return e
    if isinstance(e, IterVal):
        return IterVal(e.lin.substitute(mapping))
    if isinstance(e, Read):
        return Read(e.buffer, tuple(l.substitute(mapping) for l in e.index))
    if isinstance(e, Bin):
        return Bin(e.op, substitute_iters(e.lhs, mapping), substitute_iters(e.rhs, mapping))
    if isinstance(e, Call):
        return Call(e.fn, substitute_iters(e.arg, mapping))
    if isinstance(e, Select):
        return Select(
            substitute_iters(e.cond, mapping),
            substitute_iters(e.then, mapping),
            substitute_iters(e.other, mapping),
        )
    if isinstance(e, Reduce):
        clash = set(e.axes) & set(mapping)
        if clash:
            raise ValueError(f"substitution touches reduction axes {sorted(clash)}")
        return Reduce(e.op, e.axes, substitute_iters(e.body, mapping))
    raise TypeError(f"not an expression: {e!r}")


def inline_reads(e: Expr, buffer: str, space: tuple[str, ...], body: Expr) -> Expr:
    """Replace each Read of `buffer` with the producer body, composing the
    read's affine index onto the producer's space iterators."""
    if isinstance(e, Read) and e.buffer == buffer:
        if len(e.index) != len(space):
            raise ValueError(f"read of {buffer} has rank {len(e.index)}, expected {len(space)}")
        mapping = {it: lin for it, lin in zip(space, e.index)}
        return substitute_iters(body, mapping)
    if isinstance(e, (Const, IterVal, Read)):
        return e
    if isinstance(e, Bin):
        return Bin(e.op, inline_reads(e.lhs, buffer, space, body),
                   inline_reads(e.rhs, buffer, space, body))
    if isinstance(e, Call):
        return Call(e.fn, inline_reads(e.arg, buffer, space, body))
    if isinstance(e, Select):
        return Select(inline_reads(e.cond, buffer, space, body),
                      inline_reads(e.then, buffer, space, body),
                      inline_reads(e.other, buffer, space, body))
    if isinstance(e, Reduce):
        return Reduce(e.op, e.axes, inline_reads(e.body, buffer, space, body))
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Operation counting
# ---------------------------------------------------------------------------

# Kind buckets shared with the feature extractor.
OP_KIND: dict[str, str] = {
    "add": "add", "sub": "sub", "mul": "mul", "div": "div",
    "max": "minmax", "min": "minmax",
    "lt": "cmp", "le": "cmp", "gt": "cmp", "ge": "cmp", "eq": "cmp",
}


def op_counts(e: Expr) -> dict[str, int]:
    """Per-point float operation counts, bucketed by kind. The reduction
    combine counts as one op of its kind per reduced point."""
    acc: dict[str, int] = {}

    def bump(kind: str) -> None:
        acc[kind] = acc.get(kind, 0) + 1

    for n in walk(e):
        if isinstance(n, Bin):
            bump(OP_KIND[n.op])
        elif isinstance(n, Call):
            bump("math_call")
        elif isinstance(n, Select):
            bump("select")
        elif isinstance(n, Reduce):
            bump("add" if n.op == "sum" else "minmax")
    return acc


def ops_per_point(e: Expr) -> int:
    return sum(op_counts(e).values())


# ---------------------------------------------------------------------------
# Vectorized evaluation
# ---------------------------------------------------------------------------

# read_fn(buffer, index_arrays, mask) -> float array broadcast to mask's shape
ReadFn = Callable[[str, tuple[np.ndarray, ...], np.ndarray], np.ndarray]


def evaluate(e: Expr, env: dict[str, np.ndarray | int], read_fn: ReadFn,
             mask: np.ndarray) -> np.ndarray:
    """Evaluate over numpy arrays. `mask` marks lanes whose value will be
    used; reads only validate/gather where the mask is set."""
    if isinstance(e, Const):
        return np.asarray(e.value, dtype=np.float64)
    if isinstance(e, IterVal):
        return np.asarray(e.lin.evaluate(env), dtype=np.float64)
    if isinstance(e, Read):
        idx = tuple(np.asarray(l.evaluate(env)) for l in e.index)
        return read_fn(e.buffer, idx, mask)
    if isinstance(e, Bin):
        a = evaluate(e.lhs, env, read_fn, mask)
        b = evaluate(e.rhs, env, read_fn, mask)
        if e.op == "add":
            return a + b
        if e.op == "sub":
            return a - b
        if e.op == "mul":
            return a * b
        if e.op == "div":
            return a / b
        if e.op == "max":
            return np.maximum(a, b)
        if e.op == "min":
            return np.minimum(a, b)
        if e.op == "lt":
            return (a < b).astype(np.float64)
        if e.op == "le":
            return (a <= b).astype(np.float64)
        if e.op == "gt":
            return (a > b).astype(np.float64)
        if e.op == "ge":
            return (a >= b).astype(np.float64)
        if e.op == "eq":
            return (a == b).astype(np.float64)
    if isinstance(e, Call):
        a = evaluate(e.arg, env, read_fn, mask)
        if e.fn == "exp":
            return np.exp(a)
        if e.fn == "sqrt":
            return np.sqrt(a)
        if e.fn == "log":
            return np.log(a)
        if e.fn == "abs":
            return np.abs(a)
    if isinstance(e, Select):
        c = evaluate(e.cond, env, read_fn, mask)
        take = np.broadcast_to(c != 0.0, np.broadcast_shapes(np.shape(c), mask.shape))
        t = evaluate(e.then, env, read_fn, mask & take)
        o = evaluate(e.other, env, read_fn, mask & ~take)
        return np.where(take, t, o)
    if isinstance(e, Reduce):
        raise ValueError("reduction must be handled by the caller, not evaluate()")
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def lin_to_json(l: Lin) -> dict:
    return {"t": [[n, c] for n, c in l.terms], "c": l.const}


def lin_from_json(d: dict) -> Lin:
    return Lin(tuple((str(n), int(c)) for n, c in d["t"]), int(d["c"]))


def expr_to_json(e: Expr) -> dict:
    if isinstance(e, Const):
        return {"k": "const", "v": e.value}
    if isinstance(e, IterVal):
        return {"k": "iter", "lin": lin_to_json(e.lin)}
    if isinstance(e, Read):
        return {"k": "read", "buf": e.buffer, "idx": [lin_to_json(l) for l in e.index]}
    if isinstance(e, Bin):
        return {"k": "bin", "op": e.op, "a": expr_to_json(e.lhs), "b": expr_to_json(e.rhs)}
    if isinstance(e, Call):
        return {"k": "call", "fn": e.fn, "a": expr_to_json(e.arg)}
    if isinstance(e, Select):
        return {"k": "select", "c": expr_to_json(e.cond),
                "t": expr_to_json(e.then), "o": expr_to_json(e.other)}
    if isinstance(e, Reduce):
        return {"k": "reduce", "op": e.op, "axes": list(e.axes), "body": expr_to_json(e.body)}
    raise TypeError(f"not an expression: {e!r}")


def expr_from_json(d: dict) -> Expr:
    k = d["k"]
    if k == "const":
        return Const(float(d["v"]))
    if k == "iter":
        return IterVal(lin_from_json(d["lin"]))
    if k == "read":
        return Read(str(d["buf"]), tuple(lin_from_json(x) for x in d["idx"]))
    if k == "bin":
        return Bin(str(d["op"]), expr_from_json(d["a"]), expr_from_json(d["b"]))
    if k == "call":
        return Call(str(d["fn"]), expr_from_json(d["a"]))
    if k == "select":
        return Select(expr_from_json(d["c"]), expr_from_json(d["t"]), expr_from_json(d["o"]))
    if k == "reduce":
        return Reduce(str(d["op"]), tuple(str(a) for a in d["axes"]), expr_from_json(d["body"]))
    raise ValueError(f"unknown expression tag {k!r}")
