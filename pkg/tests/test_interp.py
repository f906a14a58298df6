import numpy as np
import pytest

from loomtune.annotate import AnnotationPolicy, sample_program
from loomtune.interp import (
    check_program,
    interpret,
    random_inputs,
    reference_outputs,
)
from loomtune.ir import (
    Annotate,
    ComputeAt,
    CacheWrite,
    SetPragma,
    Split,
    apply_step,
    naive_program,
)
from loomtune.sketch import generate_sketches
from loomtune.workloads import REGISTRY, build

SMALL = {
    "matmul": {"n": 8, "m": 8, "k": 8},
    "matmul_bias_relu": {"n": 8, "m": 8, "k": 8},
    "conv2d": {"h": 6, "w": 6, "ci": 4, "co": 4},
    "conv2d_relu": {"h": 6, "w": 6, "ci": 4, "co": 4},
    "grouped_conv2d": {"h": 6, "w": 6, "ci": 8, "co": 8},
    "norm2": {},
    "elemwise_chain": {"n": 64},
}


def max_rel_err(program, seed=0):
    inputs = random_inputs(program.dag, np.random.default_rng(seed))
    want = reference_outputs(program.dag, inputs)
    got = interpret(program, inputs)
    worst = 0.0
    for name, ref in want.items():
        if name in got:
            scale = np.maximum(np.abs(ref), 1e-30)
            worst = max(worst, float(np.max(np.abs(got[name] - ref) / scale)))
    return worst


def test_random_inputs_are_seeded_and_shaped():
    dag = build("matmul", n=4, m=6, k=8)
    a = random_inputs(dag, np.random.default_rng(7))
    b = random_inputs(dag, np.random.default_rng(7))
    assert set(a) == {"A", "B"}
    assert a["A"].shape == (4, 8) and a["B"].shape == (8, 6)
    np.testing.assert_array_equal(a["A"], b["A"])


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_naive_matches_reference_everywhere(name):
    program = naive_program(build(name, **SMALL[name]))
    assert max_rel_err(program) <= 1e-5


def test_tiled_and_annotated_matmul_is_equivalent():
    p = naive_program(build("matmul", n=8, m=8, k=8))
    p = apply_step(p, Split("C", "i", (2, 2)))
    p = apply_step(p, Split("C", "j", (4,)))
    p = apply_step(p, Annotate("C", "i.0", "parallel"))
    p = apply_step(p, Annotate("C", "j.1", "vectorize"))
    p = apply_step(p, SetPragma("C", 16))
    assert max_rel_err(p) <= 1e-5


def test_cache_write_with_attachment_is_equivalent():
    p = naive_program(build("matmul", n=8, m=8, k=8))
    p = apply_step(p, CacheWrite("C"))
    p = apply_step(p, Split("C", "i", (2,)))
    p = apply_step(p, ComputeAt("C.cache", "C", "i.1"))
    assert max_rel_err(p) <= 1e-5


def test_sampled_sketches_run_for_every_workload():
    rng = np.random.default_rng(11)
    policy = AnnotationPolicy()
    for name in sorted(REGISTRY):
        dag = build(name, **SMALL[name])
        for sketch in generate_sketches(dag):
            program = sample_program(sketch, policy, rng)
            assert max_rel_err(program, seed=3) <= 1e-5, name


def test_check_program_flags_wrong_results():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    assert check_program(p, np.random.default_rng(0)) is None
