"""DAG structure, topological order, and per-node trait analysis."""

import itertools

import pytest

from loomtune.expr import Bin, Const, Lin, Read, Reduce
from loomtune.graph import (
    ComputeDAG,
    GraphError,
    analyze_node,
    compute,
    placeholder,
    topological_order,
)
from loomtune.workloads import build


def _v(name):
    return Lin.var(name)


def _chain():
    a = placeholder("A", (8,))
    b = compute("B", (("i", 8),), Bin("add", Read("A", (_v("i"),)), Const(1.0)))
    c = compute("C", (("i", 8),), Bin("mul", Read("B", (_v("i"),)), Const(2.0)))
    return ComputeDAG((a, b, c))


def test_chain_order_output_first():
    assert topological_order(_chain()) == ["C", "B", "A"]


def test_four_node_pipeline_order():
    dag = build("matmul_bias_relu")
    assert topological_order(dag) == ["E", "D", "C", "A", "B", "bias"]


def test_diamond_order_brute_forced():
    a = placeholder("A", (4,))
    b = compute("B", (("i", 4),), Bin("add", Read("A", (_v("i"),)), Const(1.0)))
    c = compute("C", (("i", 4),), Bin("mul", Read("A", (_v("i"),)), Const(3.0)))
    d = compute("D", (("i", 4),),
                Bin("add", Read("B", (_v("i"),)), Read("C", (_v("i"),))))
    dag = ComputeDAG((a, b, c, d))
    got = topological_order(dag)

    # oracle: every consumers-first permutation of the node names
    names = [n.name for n in dag.nodes]
    legal = []
    for perm in itertools.permutations(names):
        pos = {n: i for i, n in enumerate(perm)}
        if all(pos[n.name] < pos[p] for n in dag.nodes
               for p in dag.producers_of(n.name)):
            legal.append(list(perm))
    assert got in legal
    assert got[0] == "D" and got[-1] == "A"
    assert got.index("B") < got.index("C")
    assert topological_order(dag) == got


def test_cycle_rejected():
    a = compute("A", (("i", 4),), Read("B", (_v("i"),)))
    b = compute("B", (("i", 4),), Read("A", (_v("i"),)))
    with pytest.raises(GraphError, match="cycle"):
        topological_order(ComputeDAG((a, b)))


def test_read_arity_must_match_shape():
    a = placeholder("A", (4, 4))
    bad = compute("B", (("i", 4),), Read("A", (_v("i"),)))
    with pytest.raises(GraphError):
        ComputeDAG((a, bad))


def test_relu_is_strict_inlinable():
    dag = build("matmul_bias_relu")
    traits = analyze_node(dag, "E")
    assert traits.is_strict_inlinable
    assert not traits.has_data_reuse


def test_matmul_has_data_reuse():
    traits = analyze_node(build("matmul"), "C")
    assert traits.has_data_reuse
    assert not traits.is_strict_inlinable


def test_skinny_matmul_wants_reduction_parallelism():
    wide = analyze_node(build("matmul", n=2, m=2, k=512), "C")
    assert wide.has_more_reduction_parallel
    square = analyze_node(build("matmul", n=512, m=512, k=512), "C")
    assert not square.has_more_reduction_parallel


def test_fusible_consumer_detection():
    dag = build("matmul_bias_relu")
    assert analyze_node(dag, "C").has_fusible_consumer
    assert analyze_node(dag, "D").has_fusible_consumer
    assert not analyze_node(dag, "E").has_fusible_consumer


def test_traits_are_mutually_exclusive_everywhere():
    for name in ("matmul", "matmul_bias_relu", "conv2d", "conv2d_relu",
                 "grouped_conv2d", "norm2", "elemwise_chain"):
        dag = build(name)
        for node in dag.nodes:
            if node.is_placeholder:
                continue
            t = analyze_node(dag, node.name)
            assert not (t.is_strict_inlinable and t.has_data_reuse), node.name


def test_analyze_node_rejects_placeholders():
    dag = build("matmul")
    with pytest.raises(ValueError):
        analyze_node(dag, "A")
