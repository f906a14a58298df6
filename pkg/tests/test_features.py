"""Per-statement feature vectors, checked against access-trace arithmetic."""

import numpy as np

from loomtune.annotate import AnnotationPolicy, sample_program
from loomtune.expr import Bin, Const, Lin, Read
from loomtune.features import (
    FEATURE_NAMES,
    N_FEATURES,
    analyze_program,
    extract_features,
)
from loomtune.graph import ComputeDAG, compute, placeholder
from loomtune.ir import Annotate, Split, apply_step, naive_program, simplify
from loomtune.sketch import generate_sketches, generate_sketches_traced
from loomtune.workloads import build

v = Lin.var
fidx = FEATURE_NAMES.index


def matmul_traces(n):
    """Element index sequence per buffer under the naive (i, j, k) nest."""
    trace = {"A": [], "B": [], "C": []}
    for i in range(n):
        for j in range(n):
            for k in range(n):
                trace["A"].append(i * n + k)
                trace["B"].append(k * n + j)
                trace["C"].append(i * n + j)
    return trace


def reuse_stats(seq):
    """(accesses per distinct element, distinct count, set of repeat gaps)."""
    last, gaps = {}, set()
    for t, addr in enumerate(seq):
        if addr in last:
            gaps.add(t - last[addr])
        last[addr] = t
    uniq = len(last)
    return len(seq) / uniq, uniq, gaps


def test_vector_width_and_name_table():
    assert N_FEATURES == 164
    assert len(FEATURE_NAMES) == 164
    assert len(set(FEATURE_NAMES)) == 164


def test_matmul_access_blocks_match_trace():
    p = naive_program(build("matmul", n=16, m=16, k=16))
    (sa,) = analyze_program(p)
    assert sa.stage == "C"
    by = {a.buffer: a for a in sa.accesses}
    traces = matmul_traces(16)

    for name in ("A", "B"):
        counter, uniq, gaps = reuse_stats(traces[name])
        a = by[name]
        assert a.acc_type == "read"
        assert a.reuse_type == "loop_multiple_read"
        assert a.reuse_counter == counter
        assert a.unique_bytes == uniq * 4
        assert gaps == {a.dist_iters}
        assert a.total_bytes == len(traces[name]) * 4

    counter, uniq, gaps = reuse_stats(traces["C"])
    c = by["C"]
    assert c.acc_type == "read_write"
    assert c.reuse_type == "serial_multiple_read"
    assert c.reuse_counter == counter == 16
    assert gaps == {1} == {c.dist_iters}
    assert c.unique_bytes == uniq * 4


def test_matmul_packed_vector_blocks():
    vec = extract_features(naive_program(build("matmul", n=16, m=16, k=16)))[0]
    # equal byte totals rank alphabetically: A, B, then the accumulator
    assert vec[fidx("buf0_reuse_loop_multiple_read")] == 1.0
    assert vec[fidx("buf1_reuse_loop_multiple_read")] == 1.0
    assert vec[fidx("buf2_acc_read_write")] == 1.0
    assert vec[fidx("buf2_reuse_serial_multiple_read")] == 1.0
    for slot in ("buf0", "buf1", "buf2"):
        assert vec[fidx(f"{slot}_reuse_counter")] == np.log2(1 + 16)
    assert vec[fidx("buf3_bytes")] == 0.0
    assert vec[fidx("buf4_bytes")] == 0.0


def test_vectorized_innermost_loop():
    x = placeholder("x", (64,))
    a = compute("a", (("i", 64),), Bin("add", Read("x", (v("i"),)), Const(1.0)))
    p = naive_program(ComputeDAG((x, a)))
    p = apply_step(p, Split("a", "i", (8,)))
    p = apply_step(p, Annotate("a", "i.1", "vectorize"))
    vec = extract_features(p)[0]
    assert vec[fidx("vec_len")] == np.log2(1 + 8)
    assert vec[fidx("vec_prod")] == np.log2(1 + 8)
    assert vec[fidx("vec_num")] == np.log2(1 + 1)
    hot = [n for n in FEATURE_NAMES if n.startswith("vec_pos_") and vec[fidx(n)]]
    assert hot == ["vec_pos_inner_spatial"]


def test_copy_statement_has_no_arithmetic():
    x = placeholder("x", (32,))
    y = compute("y", (("i", 32),), Read("x", (v("i"),)))
    vec = extract_features(naive_program(ComputeDAG((x, y))))[0]
    floats = [vec[fidx("float_" + k)] for k in
              ("add", "sub", "mul", "div", "minmax", "cmp", "math_call",
               "select", "other")]
    assert floats == [0.0] * 9
    curve = [vec[fidx(f"intensity_{i}")] for i in range(1, 11)]
    assert curve == [0.0] * 10


def _corpus():
    shapes = {
        "matmul": dict(n=16, m=16, k=16),
        "conv2d": dict(h=6, w=6, ci=4, co=4),
        "norm2": dict(n=8, m=32),
        "elemwise_chain": dict(n=64),
    }
    for w, kw in shapes.items():
        dag = build(w, **kw)
        for i, sk in enumerate(generate_sketches(dag)):
            yield sample_program(sk, AnnotationPolicy(), np.random.default_rng(i))


def test_matrix_shape_finiteness_and_domains():
    classes = ("loop_multiple_read", "serial_multiple_read", "no_reuse")
    onehot = [i for i, n in enumerate(FEATURE_NAMES)
              if "_pos_" in n or "_acc_" in n
              or any(n.endswith("_reuse_" + t) for t in classes)]
    for p in _corpus():
        m = extract_features(p)
        assert m.shape[1] == N_FEATURES
        assert m.shape[0] >= 1
        assert np.isfinite(m).all()
        assert (m >= 0).all()
        for i in onehot:
            assert set(np.unique(m[:, i])) <= {0.0, 1.0}


def test_feature_determinism():
    sk = generate_sketches(build("matmul", n=16, m=16, k=16))[1]
    a = sample_program(sk, AnnotationPolicy(), np.random.default_rng(7))
    b = sample_program(sk, AnnotationPolicy(), np.random.default_rng(7))
    assert np.array_equal(extract_features(a), extract_features(b))


def test_features_invariant_under_simplify():
    for p in _corpus():
        assert np.array_equal(extract_features(p), extract_features(simplify(p)))


def test_cache_stage_adds_a_statement():
    dag = build("matmul", n=16, m=16, k=16)
    counts = set()
    rng = np.random.default_rng(0)
    for p, path in generate_sketches_traced(dag):
        full = sample_program(p, AnnotationPolicy(), rng)
        counts.add((path[0] == 5, len(analyze_program(full))))
    assert (False, 1) in counts
    assert (True, 2) in counts
