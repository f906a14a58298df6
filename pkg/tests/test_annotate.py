"""Random annotation: tile draws, loop marks, locations, constant packing."""

import math

import numpy as np
import pytest

from loomtune.annotate import (
    AnnotationPolicy,
    annotate_parallel,
    annotate_vectorize,
    compute_location_candidates,
    divisors,
    flexible_stages,
    random_factorization,
    resolve_factors,
    rewrite_constant_layout,
    sample_program,
    strip_layout_steps,
)
from loomtune.expr import Bin, Const, Lin, Read
from loomtune.graph import ComputeDAG, compute, placeholder
from loomtune.interp import interpret, random_inputs, reference_outputs
from loomtune.ir import LayoutRewrite, naive_program, validate
from loomtune.sketch import generate_sketches, multi_level_tile
from loomtune.workloads import build

v = Lin.var


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# Factor sampling
# ---------------------------------------------------------------------------


def test_factorization_product_law():
    r = rng(3)
    for _ in range(200):
        parts = random_factorization(12, 3, r)
        assert len(parts) == 3
        assert all(p >= 1 for p in parts)
        assert math.prod(parts) == 12


def test_factorization_of_one():
    r = rng(1)
    assert all(random_factorization(1, 4, r) == (1, 1, 1, 1) for _ in range(20))


def test_factorization_support_is_divisor_pairs():
    want = {(d, 8 // d) for d in divisors(8)}
    r = rng(7)
    seen = {random_factorization(8, 2, r) for _ in range(10_000)}
    assert seen == want


def test_divisors_brute_force():
    for n in (1, 7, 24, 96, 360):
        assert divisors(n) == [d for d in range(1, n + 1) if n % d == 0]


def test_factorization_rejects_bad_requests():
    with pytest.raises(ValueError):
        random_factorization(0, 2, rng())
    with pytest.raises(ValueError):
        random_factorization(6, 0, rng())


def test_resolve_factors_leaves_nothing_symbolic():
    sketch = multi_level_tile(naive_program(build("matmul")), "C")
    p = resolve_factors(sketch, rng(11))
    for s in p.stages:
        assert all(l.extent is not None for l in s.loops)


# ---------------------------------------------------------------------------
# Loop annotations
# ---------------------------------------------------------------------------


def test_parallel_fuses_outer_space_band():
    p = annotate_parallel(naive_program(build("matmul")), "C")
    loops = p.stage("C").loops
    assert loops[0].id == "i@j"
    assert loops[0].annotation == "parallel"
    assert loops[0].extent == 512 * 512
    assert [l.id for l in loops[1:]] == ["k"]


def test_parallel_keeps_one_loop_in_reserve():
    x = placeholder("x", (16, 16))
    a = compute("a", (("i", 16), ("j", 16)),
                Bin("add", Read("x", (v("i"), v("j"))), Const(1.0)))
    p = annotate_parallel(naive_program(ComputeDAG((x, a))), "a")
    loops = p.stage("a").loops
    assert [l.id for l in loops] == ["i", "j"]
    assert loops[0].annotation == "parallel"
    assert loops[1].annotation is None


def test_vectorize_takes_innermost_short_loop():
    x = placeholder("x", (64,))
    a = compute("a", (("i", 64),), Bin("add", Read("x", (v("i"),)), Const(1.0)))
    base = naive_program(ComputeDAG((x, a)))
    from loomtune.ir import Split, apply_step

    p = apply_step(base, Split("a", "i", (8,)))
    p = annotate_vectorize(p, "a", 16)
    assert p.stage("a").loops[-1].annotation == "vectorize"

    q = apply_step(base, Split("a", "i", (32,)))
    q = annotate_vectorize(q, "a", 16)
    assert all(l.annotation is None for l in q.stage("a").loops)


def test_sampled_pragmas_come_from_policy_set():
    policy = AnnotationPolicy(unroll_values=(0, 64))
    sketch = generate_sketches(build("matmul"))[1]
    for seed in range(6):
        p = sample_program(sketch, policy, rng(seed))
        for s in p.stages:
            if not s.inlined:
                assert s.pragma_unroll in (0, 64)


# ---------------------------------------------------------------------------
# Whole-program sampling
# ---------------------------------------------------------------------------


def test_sampling_is_seed_deterministic():
    sketch = generate_sketches(build("matmul"))[1]
    policy = AnnotationPolicy()
    a = sample_program(sketch, policy, rng(42))
    b = sample_program(sketch, policy, rng(42))
    assert a == b
    assert a.history == b.history
    distinct = {sample_program(sketch, policy, rng(s)).history for s in range(5)}
    assert len(distinct) > 1


def test_sampled_iteration_count_is_conserved():
    for sketch in generate_sketches(build("matmul")):
        p = sample_program(sketch, AnnotationPolicy(), rng(5))
        for s in p.stages:
            if s.inlined or s.compute_at is not None or not s.reduce:
                continue
            assert math.prod(l.extent for l in s.loops) == 512 ** 3


def test_sample_campaign_stays_valid_and_equivalent():
    dag = build("matmul_bias_relu", n=8, m=8, k=8)
    sketches = generate_sketches(dag)
    inputs = random_inputs(dag, rng(0))
    want = reference_outputs(dag, inputs)["E"]
    r = rng(99)
    for i in range(300):
        p = sample_program(sketches[i % len(sketches)], AnnotationPolicy(), r)
        assert validate(p) == []
        if i % 25 == 0:
            got = interpret(p, inputs)["E"]
            np.testing.assert_allclose(got, want, rtol=1e-5)


def test_location_moves_only_when_asked():
    dag = build("conv2d", h=6, w=6, ci=4, co=4)
    sketch = generate_sketches(dag)[0]
    frozen = AnnotationPolicy(move_probability=0.0)
    for seed in range(8):
        p = sample_program(sketch, frozen, rng(seed))
        assert p.stage("P").compute_at is None

    eager = AnnotationPolicy(move_probability=1.0)
    moved = [sample_program(sketch, eager, rng(seed)) for seed in range(10)]
    assert any(p.stage("P").compute_at is not None for p in moved)
    inputs = random_inputs(dag, rng(1))
    want = reference_outputs(dag, inputs)["C"]
    np.testing.assert_allclose(interpret(moved[0], inputs)["C"], want, rtol=1e-5)


def test_flexible_stage_listing():
    assert flexible_stages(naive_program(build("conv2d"))) == ["P"]
    p = naive_program(build("matmul"))
    assert flexible_stages(p) == []
    assert compute_location_candidates(p, "C") == []


def test_location_candidates_cover_consumer_loops():
    p = naive_program(build("conv2d"))
    pts = compute_location_candidates(p, "P")
    assert ("", "") in pts
    consumer_loops = [l.id for l in p.stage("C").loops]
    assert [pt for pt in pts if pt[0] == "C"] == [("C", l) for l in consumer_loops]


# ---------------------------------------------------------------------------
# Constant-tensor packing
# ---------------------------------------------------------------------------


def test_packed_weights_stay_equivalent():
    dag = build("matmul", n=8, m=8, k=8)
    tiled = resolve_factors(multi_level_tile(naive_program(dag), "C"), rng(2))
    packed = rewrite_constant_layout(tiled)
    steps = [s for s in packed.history if isinstance(s, LayoutRewrite)]
    assert [s.buffer for s in steps] == ["B"]
    inputs = random_inputs(dag, rng(3))
    want = reference_outputs(dag, inputs)["C"]
    np.testing.assert_allclose(interpret(packed, inputs)["C"], want, rtol=1e-5)


def test_packing_skips_programs_without_constants():
    x = placeholder("x", (32, 32))
    y = compute("y", (("i", 32), ("j", 32)),
                Bin("mul", Read("x", (v("i"), v("j"))), Const(3.0)))
    p = naive_program(ComputeDAG((x, y)))
    assert rewrite_constant_layout(p) == p
    assert not any(isinstance(s, LayoutRewrite) for s in rewrite_constant_layout(p).history)


def test_identity_packing_not_recorded():
    c = placeholder("c", (64,), constant=True)
    x = placeholder("x", (64,))
    y = compute("y", (("i", 64),),
                Bin("mul", Read("x", (v("i"),)), Read("c", (v("i"),))))
    p = naive_program(ComputeDAG((c, x, y)))
    out = rewrite_constant_layout(p)
    assert out == p
    assert out.history == ()


def test_strip_layout_steps_round_trip():
    dag = build("matmul", n=8, m=8, k=8)
    tiled = resolve_factors(multi_level_tile(naive_program(dag), "C"), rng(2))
    packed = rewrite_constant_layout(tiled)
    assert packed != tiled or packed.history == tiled.history
    stripped = strip_layout_steps(packed)
    assert stripped == tiled
    assert not any(isinstance(s, LayoutRewrite) for s in stripped.history)
