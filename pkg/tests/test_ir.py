"""Loop-nest rewriting: step semantics, replay, validation, serde."""

import numpy as np
import pytest

from loomtune.interp import interpret, random_inputs, reference_outputs
from loomtune.ir import (
    Annotate,
    ComputeAt,
    CacheWrite,
    Fuse,
    IRError,
    Inline,
    LayoutRewrite,
    Reorder,
    Rfactor,
    SetPragma,
    Simplify,
    Split,
    apply_step,
    history_from_json,
    history_to_json,
    naive_program,
    replay,
    simplify,
    validate,
)
from loomtune.workloads import build


def equivalent(program, seed=0, rtol=1e-5):
    inputs = random_inputs(program.dag, np.random.default_rng(seed))
    want = reference_outputs(program.dag, inputs)
    got = interpret(program, inputs)
    for name, ref in want.items():
        if name not in got:
            continue
        scale = np.maximum(np.abs(ref), 1e-30)
        if np.max(np.abs(got[name] - ref) / scale) > rtol:
            return False
    return True


def test_split_infers_outer_extent():
    p = naive_program(build("matmul", n=6, m=4, k=4))
    q = apply_step(p, Split("C", "i", (2,)))
    loops = {l.id: l.extent for l in q.stage("C").loops}
    assert loops["i.0"] == 3 and loops["i.1"] == 2


def test_split_rejects_non_divisor():
    p = naive_program(build("matmul", n=6, m=4, k=4))
    with pytest.raises(IRError):
        apply_step(p, Split("C", "i", (4,)))


def test_split_product_conserved_two_levels():
    p = naive_program(build("matmul", n=24, m=4, k=4))
    q = apply_step(p, Split("C", "i", (2, 3)))
    exts = [l.extent for l in q.stage("C").loops if l.id.startswith("i.")]
    assert exts == [4, 2, 3]
    assert np.prod(exts) == 24


def test_fuse_requires_adjacency():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    q = apply_step(p, Fuse("C", "i", "j"))
    assert [l.id for l in q.stage("C").loops] == ["i@j", "k"]
    assert q.stage("C").loop("i@j").extent == 16
    with pytest.raises(IRError):
        apply_step(p, Fuse("C", "i", "k"))


def test_fuse_blocks_space_reduce_mix():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    with pytest.raises(IRError):
        apply_step(p, Fuse("C", "j", "k"))


def test_reorder_is_a_permutation():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    q = apply_step(p, Reorder("C", ("k", "i", "j")))
    assert [l.id for l in q.stage("C").loops] == ["k", "i", "j"]
    with pytest.raises(IRError):
        apply_step(p, Reorder("C", ("i", "j")))
    assert equivalent(q)


def test_inline_drops_a_live_stage():
    p = naive_program(build("matmul_bias_relu", n=4, m=4, k=4))
    q = apply_step(p, Inline("D"))
    assert len(q.live_stages()) == len(p.live_stages()) - 1
    assert q.stage("C") == p.stage("C")
    assert equivalent(q)


def test_inline_rejects_reductions():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    with pytest.raises(IRError):
        apply_step(p, Inline("C"))


def test_compute_at_shrinks_then_root_restores():
    p = naive_program(build("matmul_bias_relu", n=4, m=6, k=4))
    p = apply_step(p, Inline("D"))
    q = apply_step(p, ComputeAt("C", "E", "j"))
    shrunk = {l.id: l.extent for l in q.stage("C").loops}
    assert shrunk == {"i": 1, "j": 1, "k": 4}
    back = apply_step(q, ComputeAt("C", "", ""))
    assert {l.id: l.extent for l in back.stage("C").loops} == \
        {"i": 4, "j": 6, "k": 4}
    assert back.stage("C").compute_at is None
    assert equivalent(q) and equivalent(back)


def test_compute_at_rejects_reduce_loop_targets():
    p = naive_program(build("matmul_bias_relu", n=4, m=4, k=4))
    p = apply_step(p, Inline("D"))
    with pytest.raises(IRError):
        apply_step(p, ComputeAt("C", "E", "k"))


def test_cache_write_splits_compute_from_copy():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    q = apply_step(p, CacheWrite("C"))
    assert q.stage_names() == ("C.cache", "C")
    assert not q.stage("C").reduce
    assert q.stage("C.cache").reduce == (("k", 4),)
    assert equivalent(q)


def test_rfactor_extents_and_equivalence():
    p = naive_program(build("norm2"))
    p = apply_step(p, Fuse("r", "i", "j"))
    q = apply_step(p, Rfactor("r", "i@j", 32))
    partial = q.stage("r.rf")
    assert dict(partial.space)["rf"] == 32
    assert partial.reduce == (("rk", 32),)
    assert q.stage("r").reduce == (("rf", 32),)
    assert equivalent(q)


def test_rfactor_rejects_space_loops():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    with pytest.raises(IRError):
        apply_step(p, Rfactor("C", "i", 2))


def test_annotate_space_only_and_overwrite():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    q = apply_step(p, Annotate("C", "i", "parallel"))
    assert q.stage("C").loop("i").annotation == "parallel"
    q = apply_step(q, Annotate("C", "i", "vectorize"))
    assert q.stage("C").loop("i").annotation == "vectorize"
    with pytest.raises(IRError):
        apply_step(p, Annotate("C", "k", "parallel"))


def test_pragma_recorded_on_stage():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    q = apply_step(p, SetPragma("C", 64))
    assert q.stage("C").pragma_unroll == 64


def test_simplify_drops_unit_loops():
    p = naive_program(build("matmul", n=4, m=1, k=8))
    q = simplify(p)
    assert [l.id for l in q.stage("C").loops] == ["i", "k"]
    assert equivalent(q)


def test_simplify_is_identity_without_unit_loops():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    assert simplify(p) == p
    assert simplify(p).history[-1] == Simplify()


def test_all_unit_middle_tiles_collapse_to_reorder():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    p = apply_step(p, Split("C", "i", (1, 4)))
    p = apply_step(p, Split("C", "j", (4, 1)))
    q = simplify(p)
    survivors = [l.id for l in q.stage("C").loops]
    assert survivors == ["i.2", "j.1", "k"]
    assert equivalent(q)


def test_replay_reproduces_exact_structure():
    p = naive_program(build("matmul_bias_relu", n=8, m=8, k=8))
    for st in (Inline("D"), Split("E", "i", (2,)),
               Annotate("E", "i.0", "parallel"), ComputeAt("C", "E", "i.1"),
               SetPragma("C", 16)):
        p = apply_step(p, st)
    again = replay(p.dag, p.history)
    assert again == p
    assert again.history == p.history


def test_history_json_round_trip():
    steps = (Split("C", "i", (2, None)), Fuse("C", "i.0", "i.1"),
             Reorder("C", ("k", "i")), ComputeAt("B", "C", "i.1"),
             Inline("D"), CacheWrite("C"), Rfactor("r", "i@j", 4),
             Annotate("C", "i.0", "vectorize"), SetPragma("C", 512),
             LayoutRewrite("B", ((0, 4), (1, 2), (0, 2))), Simplify())
    assert history_from_json(history_to_json(steps)) == steps


def test_validate_accepts_every_naive_workload():
    for name in ("matmul", "matmul_bias_relu", "conv2d", "conv2d_relu",
                 "grouped_conv2d", "norm2", "elemwise_chain"):
        assert validate(naive_program(build(name))) == []


def test_validate_reports_dangling_loops():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    s = p.stage("C")
    broken = p.with_stage(type(s)(**{**s.__dict__, "loops": s.loops[:-1]}))
    assert validate(broken)


def test_unknown_stage_and_loop_errors():
    p = naive_program(build("matmul", n=4, m=4, k=4))
    with pytest.raises(IRError):
        apply_step(p, Split("Z", "i", (2,)))
    with pytest.raises(IRError):
        apply_step(p, Split("C", "w", (2,)))
