"""Compute DAGs: named tensor nodes with affine-indexed bodies.

A node is either a placeholder (external input, possibly a compile-time
constant like weights) or a computed tensor defined by one expression over
named space iterators and optional reduction iterators. Edges are implied by
buffer reads. The DAG is the stable problem statement; schedules never change
the math, only the loop structure around it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .expr import (
    Expr, Reduce, expr_from_json, expr_to_json, iter_names, ops_per_point,
    reads, validate_expr,
)

Axes = tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class ComputeNode:
    """One tensor: placeholder if `body` is None, else a computed node."""

    name: str
    space: Axes
    reduce: Axes = ()
    body: Expr | None = None
    is_constant: bool = False

    @property
    def is_placeholder(self) -> bool:
        return self.body is None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(e for _, e in self.space)

    def iter_extents(self) -> dict[str, int]:
        return {n: e for n, e in (*self.space, *self.reduce)}


def placeholder(name: str, shape: tuple[int, ...], constant: bool = False,
                iters: tuple[str, ...] | None = None) -> ComputeNode:
    if iters is None:
        iters = tuple(f"{name.lower()}{d}" for d in range(len(shape)))
    space = tuple(zip(iters, shape))
    return ComputeNode(name, space, (), None, constant)


def compute(name: str, space: Axes, body: Expr, reduce: Axes = (),
            constant: bool = False) -> ComputeNode:
    return ComputeNode(name, space, reduce, body, constant)


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class ComputeDAG:
    nodes: tuple[ComputeNode, ...]
    _by_name: dict[str, ComputeNode] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_by_name", {n.name: n for n in self.nodes})
        problems = self.validate()
        if problems:
            raise GraphError("; ".join(problems))

    def node(self, name: str) -> ComputeNode:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def producers_of(self, name: str) -> tuple[str, ...]:
        node = self.node(name)
        if node.body is None:
            return ()
        seen: list[str] = []
        for r in reads(node.body):
            if r.buffer in self._by_name and r.buffer not in seen:
                seen.append(r.buffer)
        return tuple(seen)

    def consumers_of(self, name: str) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes
                     if n.body is not None and name in self.producers_of(n.name))

    @property
    def outputs(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes
                     if n.body is not None and not self.consumers_of(n.name))

    def validate(self) -> list[str]:
        problems: list[str] = []
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            problems.append("duplicate node names")
            return problems
        for node in self.nodes:
            declared = set(node.iter_extents())
            if len(declared) != len(node.space) + len(node.reduce):
                problems.append(f"{node.name}: duplicate iterator names")
            if node.body is None:
                if node.reduce:
                    problems.append(f"{node.name}: placeholder with reduction iterators")
                continue
            problems.extend(f"{node.name}: {p}" for p in validate_expr(node.body))
            root = node.body
            if isinstance(root, Reduce):
                if set(root.axes) != {n for n, _ in node.reduce}:
                    problems.append(f"{node.name}: reduce axes disagree with declared reduction iterators")
            elif node.reduce:
                problems.append(f"{node.name}: reduction iterators without a root reduction")
            used = iter_names(node.body)
            if not used <= declared:
                problems.append(f"{node.name}: undeclared iterators {sorted(used - declared)}")
            for r in reads(node.body):
                if r.buffer == node.name:
                    problems.append(f"{node.name}: reads its own buffer")
                elif r.buffer in self._by_name:
                    rank = len(self._by_name[r.buffer].space)
                    if len(r.index) != rank:
                        problems.append(
                            f"{node.name}: read of {r.buffer} has rank {len(r.index)}, expected {rank}")
                else:
                    problems.append(f"{node.name}: read of unknown buffer {r.buffer}")
        return problems

    def flops(self) -> int:
        total = 0
        for node in self.nodes:
            if node.body is None:
                continue
            pts = 1
            for _, e in (*node.space, *node.reduce):
                pts *= e
            total += ops_per_point(node.body) * pts
        return total

    def to_json(self) -> dict:
        return {
            "nodes": [
                {
                    "name": n.name,
                    "space": [[a, e] for a, e in n.space],
                    "reduce": [[a, e] for a, e in n.reduce],
                    "body": None if n.body is None else expr_to_json(n.body),
                    "constant": n.is_constant,
                }
                for n in self.nodes
            ]
        }

    @staticmethod
    def from_json(d: dict) -> "ComputeDAG":
        nodes = tuple(
            ComputeNode(
                str(nd["name"]),
                tuple((str(a), int(e)) for a, e in nd["space"]),
                tuple((str(a), int(e)) for a, e in nd["reduce"]),
                None if nd["body"] is None else expr_from_json(nd["body"]),
                bool(nd["constant"]),
            )
            for nd in d["nodes"]
        )
        return ComputeDAG(nodes)


def topological_order(dag: ComputeDAG) -> list[str]:
    """Consumers before producers, outputs first; ties resolved by ascending
    node name so the visit order is reproducible."""
    remaining_consumers = {n.name: set(dag.consumers_of(n.name)) for n in dag.nodes}
    emitted: list[str] = []
    done: set[str] = set()
    while len(emitted) < len(dag.nodes):
        ready = sorted(
            name for name, cons in remaining_consumers.items()
            if name not in done and cons <= done
        )
        if not ready:
            raise GraphError("cycle in compute DAG")
        pick = ready[0]
        emitted.append(pick)
        done.add(pick)
    return emitted


# ---------------------------------------------------------------------------
# Node trait analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraitThresholds:
    """Cutoffs for deciding when extra reduction-level parallelism pays off."""

    small_space: int = 256
    reduction_ratio: int = 16


@dataclass(frozen=True)
class NodeTraits:
    is_strict_inlinable: bool
    has_data_reuse: bool
    has_fusible_consumer: bool
    has_more_reduction_parallel: bool


def _elementwise_reads(body: Expr, space_names: tuple[str, ...],
                       is_placeholder: dict[str, bool]) -> bool:
    """Every read index is a bare iterator (coefficient 1, no offset), and
    reads of computed buffers use the full identity tuple."""
    space_set = set(space_names)
    for r in reads(body):
        idx_names = []
        for lin in r.index:
            if not lin.is_single_var():
                return False
            name = lin.terms[0][0]
            if name not in space_set:
                return False
            idx_names.append(name)
        if not is_placeholder.get(r.buffer, False):
            if tuple(idx_names) != space_names:
                return False
    return True


def analyze_node(dag: ComputeDAG, name: str,
                 thresholds: TraitThresholds = TraitThresholds()) -> NodeTraits:
    node = dag.node(name)
    if node.body is None:
        raise ValueError(f"{name} is a placeholder, not a computed node")

    space_names = tuple(n for n, _ in node.space)
    consumers = dag.consumers_of(name)
    is_ph = {n.name: n.is_placeholder for n in dag.nodes}

    inlinable = (
        not node.reduce
        and _elementwise_reads(node.body, space_names, is_ph)
    )

    # Reuse across an extent-1 loop is vacuous, so only iterators with
    # extent > 1 count toward the proper-subset test.
    relevant = {n for n, e in (*node.space, *node.reduce) if e > 1}

    def referenced(r) -> set[str]:
        out: set[str] = set()
        for lin in r.index:
            out |= lin.iters()
        return out

    reuse = bool(node.reduce) and any(
        (referenced(r) & relevant) < relevant for r in reads(node.body)
    )

    fusible = False
    if len(consumers) == 1:
        c = dag.node(consumers[0])
        c_space = tuple(n for n, _ in c.space)
        my_reads = [r for r in reads(c.body) if r.buffer == name]
        fusible = bool(my_reads) and all(
            tuple(l.terms[0][0] for l in r.index if l.is_single_var()) == c_space
            and len(r.index) == len(c_space)
            for r in my_reads
        )

    space_prod = 1
    for _, e in node.space:
        space_prod *= e
    red_prod = 1
    for _, e in node.reduce:
        red_prod *= e
    more_red = (
        bool(node.reduce)
        and space_prod < thresholds.small_space
        and red_prod >= thresholds.reduction_ratio * space_prod
    )

    return NodeTraits(inlinable, reuse, fusible, more_red)
