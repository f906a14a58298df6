"""Hand-rolled walk of the sketch derivation tree.

Counts derivation leaves by re-deciding every rule condition from the node
expressions alone. Deliberately does not touch the enumerator or its trait
analysis, so it can serve as an independent counting oracle in tests.
"""

from loomtune.expr import reads
from loomtune.graph import ComputeDAG, TraitThresholds, topological_order


def _identity_read(consumer, producer: str) -> bool:
    space = tuple(n for n, _ in consumer.space)
    mine = [r for r in reads(consumer.body) if r.buffer == producer]
    return bool(mine) and all(
        len(r.index) == len(space)
        and all(l.is_single_var() for l in r.index)
        and tuple(l.terms[0][0] for l in r.index) == space
        for r in mine
    )


def _inlinable(dag: ComputeDAG, node) -> bool:
    if node.reduce or not dag.consumers_of(node.name):
        return False
    space = set(n for n, _ in node.space)
    for r in reads(node.body):
        names = []
        for l in r.index:
            if not l.is_single_var():
                return False
            n = l.terms[0][0]
            if n not in space:
                return False
            names.append(n)
        producer = dag.node(r.buffer) if r.buffer in dag else None
        if producer is not None and not producer.is_placeholder:
            if tuple(names) != tuple(n for n, _ in node.space):
                return False
    return True


def _reuse(node) -> bool:
    if not node.reduce:
        return False
    relevant = {n for n, e in (*node.space, *node.reduce) if e > 1}
    for r in reads(node.body):
        got = set()
        for l in r.index:
            got |= l.iters()
        if (got & relevant) < relevant:
            return True
    return False


def _more_reduction(node, th: TraitThresholds) -> bool:
    if not node.reduce:
        return False
    sp = 1
    for _, e in node.space:
        sp *= e
    rp = 1
    for _, e in node.reduce:
        rp *= e
    return sp < th.small_space and rp >= th.reduction_ratio * sp


def count_sketches(dag: ComputeDAG,
                   thresholds: TraitThresholds = TraitThresholds()) -> int:
    order = topological_order(dag)
    by = {n.name: n for n in dag.nodes}

    def fusible_target(name, inlined, frozen):
        cur = name
        while True:
            cons = dag.consumers_of(cur)
            if len(cons) != 1:
                return None
            nxt = cons[0]
            if not _identity_read(by[nxt], cur):
                return None
            if nxt in inlined:
                cur = nxt
                continue
            return None if nxt in frozen else nxt

    def visit(pos, inlined, frozen, cached):
        if pos == len(order):
            return 1
        name = order[pos]
        node = by[name]
        if node.is_placeholder:
            return visit(pos + 1, inlined, frozen, cached)
        if _inlinable(dag, node):
            return visit(pos + 1, inlined | {name}, frozen, cached)
        total = visit(pos + 1, inlined, frozen, cached)
        if _reuse(node):
            total += visit(pos + 1, inlined, frozen | {name}, cached)
            if name in cached:
                # the cache copy always reads the cache stage point-for-point
                target = name
            else:
                target = fusible_target(name, inlined, frozen)
            if target is not None:
                total += visit(pos + 1, inlined, frozen | {name, target}, cached)
            elif name not in cached:
                total += visit(pos, inlined, frozen, cached | {name})
        if _more_reduction(node, thresholds):
            total += visit(pos + 1, inlined, frozen | {name}, cached)
        return total

    return visit(0, frozenset(), frozenset(), frozenset())
