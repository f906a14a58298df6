"""Evolutionary search operators and the generation loop."""

import numpy as np
import pytest

from loomtune.annotate import AnnotationPolicy, sample_program
from loomtune.evolve import (
    NOT_APPLICABLE,
    Candidate,
    EvolutionConfig,
    EvolveStats,
    Infeasible,
    crossover,
    evolve,
    mutate_compute_location,
    mutate_parallel,
    mutate_pragma,
    mutate_tile_size,
    select_parent,
)
from loomtune.ir import Split, naive_program, simplify, validate
from loomtune.machine import spot_check
from loomtune.model import CostModel, TrainHyper, TrainingRecord, train
from loomtune.sketch import generate_sketches
from loomtune.workloads import build


def sampled(workload, kw, seed, sketch=None):
    dag = build(workload, **kw)
    sketches = generate_sketches(dag)
    rng = np.random.default_rng(seed)
    if sketch is None:
        sketch = int(rng.integers(len(sketches)))
    return sample_program(sketches[sketch], AnnotationPolicy(), rng)


def iterator_products(p):
    """Per stage, map each connected group of original iterators (joined by
    fusion or splitting) to the product of its loop extents."""
    out = {}
    for s in p.stages:
        if s.inlined:
            continue
        declared = sorted((n for n, _ in (*s.space, *s.reduce)),
                          key=len, reverse=True)
        parent = {n: n for n in declared}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        def base_of(c):
            for n in declared:
                if c == n or c.startswith(n + "."):
                    return n
            raise AssertionError(f"loop {c} matches no iterator of {s.name}")

        groups = {}
        for l in s.loops:
            bases = {base_of(c) for c in l.id.split("@")}
            first, *rest = sorted(bases)
            for b in rest:
                parent[find(b)] = find(first)
        for l in s.loops:
            b = find(base_of(l.id.split("@")[0]))
            groups[b] = groups.get(b, 1) * l.extent
        ext = dict((*s.space, *s.reduce))
        expect = {}
        for n in declared:
            r = find(n)
            expect[r] = expect.get(r, 1) * ext[n]
        for r, prod in groups.items():
            assert prod == expect[r], (s.name, r, prod, expect[r])
        for r, e in expect.items():
            if r not in groups:
                assert e == 1
        out[s.name] = groups
    return out


# ---------------------------------------------------------------------------
# Parent selection
# ---------------------------------------------------------------------------


def test_select_parent_fitness_proportional():
    p = naive_program(build("matmul", n=8, m=8, k=8))
    pop = [Candidate(p, 3.0), Candidate(p, 1.0)]
    rng = np.random.default_rng(0)
    hits = sum(select_parent(pop, rng) is pop[0] for _ in range(10_000))
    assert abs(hits / 10_000 - 0.75) < 0.02


def test_select_parent_zero_fitness_goes_uniform():
    p = naive_program(build("matmul", n=8, m=8, k=8))
    pop = [Candidate(p, 0.0), Candidate(p, 0.0)]
    rng = np.random.default_rng(1)
    stats = EvolveStats()
    hits = sum(select_parent(pop, rng, stats) is pop[0] for _ in range(4000))
    assert abs(hits / 4000 - 0.5) < 0.03
    assert stats.uniform_fallbacks == 4000


def test_select_parent_rejects_bad_input():
    p = naive_program(build("matmul", n=8, m=8, k=8))
    with pytest.raises(ValueError, match="empty"):
        select_parent([], np.random.default_rng(0))
    with pytest.raises(ValueError, match="finite"):
        select_parent([Candidate(p, float("nan"))], np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Mutations
# ---------------------------------------------------------------------------


def test_tile_mutation_conserves_iteration_space():
    rng = np.random.default_rng(2)
    applied = 0
    for seed in range(12):
        p = sampled("matmul", dict(n=64, m=64, k=64), seed)
        before = iterator_products(p)
        for _ in range(16):
            q = mutate_tile_size(p, rng)
            if q is NOT_APPLICABLE:
                break
            assert validate(q) == []
            assert iterator_products(q) == before
            applied += 1
            p = q
    assert applied > 50


def test_tile_mutation_without_splits_is_not_applicable():
    p = naive_program(build("matmul", n=16, m=16, k=16))
    assert mutate_tile_size(p, np.random.default_rng(0)) is NOT_APPLICABLE


def test_tile_mutation_changes_split_factors():
    p = sampled("matmul", dict(n=64, m=64, k=64), 4, sketch=0)
    rng = np.random.default_rng(4)
    changed = 0
    for _ in range(20):
        q = mutate_tile_size(p, rng)
        assert q is not NOT_APPLICABLE
        splits_p = [s for s in p.history if isinstance(s, Split)]
        splits_q = [s for s in q.history if isinstance(s, Split)]
        changed += splits_p != splits_q
    assert changed > 0


def test_parallel_mutation_keeps_semantics():
    rng = np.random.default_rng(5)
    fired = 0
    for seed in range(8):
        p = sampled("matmul", dict(n=32, m=32, k=32), seed)
        q = mutate_parallel(p, rng)
        if q is NOT_APPLICABLE:
            continue
        fired += 1
        assert validate(q) == []
        assert spot_check(q) is None
    assert fired >= 4


def test_pragma_mutation_touches_only_unroll():
    p = sampled("matmul", dict(n=32, m=32, k=32), 1)
    q = mutate_pragma(p, np.random.default_rng(3))
    assert q is not NOT_APPLICABLE
    same = [(a.name, a.loops, a.compute_at) == (b.name, b.loops, b.compute_at)
            for a, b in zip(p.stages, q.stages)]
    assert all(same)
    diffs = [(a.pragma_unroll, b.pragma_unroll)
             for a, b in zip(p.stages, q.stages)
             if a.pragma_unroll != b.pragma_unroll]
    assert len(diffs) == 1


def test_pragma_mutation_needs_a_value_set():
    p = sampled("matmul", dict(n=16, m=16, k=16), 0)
    assert mutate_pragma(p, np.random.default_rng(0), values=(0,)) is NOT_APPLICABLE


def test_location_mutation_moves_a_stage():
    rng = np.random.default_rng(6)
    fired = 0
    for seed in range(10):
        p = sampled("conv2d", dict(h=6, w=6, ci=4, co=4), seed)
        q = mutate_compute_location(p, rng)
        if q is NOT_APPLICABLE:
            continue
        fired += 1
        assert validate(q) == []
        assert spot_check(q) is None
        la = {s.name: s.compute_at for s in p.stages}
        lb = {s.name: s.compute_at for s in q.stages}
        assert la != lb
    assert fired >= 5


# ---------------------------------------------------------------------------
# Crossover
# ---------------------------------------------------------------------------


def test_crossover_identical_parents_is_identity():
    p = sampled("matmul_bias_relu", dict(n=16, m=16, k=16), 3)
    child = crossover(p, p, np.random.default_rng(0))
    assert not isinstance(child, Infeasible)
    assert child == simplify(p)


def test_crossover_mixes_parents_feasibly():
    a = sampled("matmul_bias_relu", dict(n=32, m=32, k=32), 0, sketch=0)
    b = sampled("matmul_bias_relu", dict(n=32, m=32, k=32), 1, sketch=1)
    rng = np.random.default_rng(7)
    ok = 0
    children = []
    for _ in range(40):
        c = crossover(a, b, rng)
        if isinstance(c, Infeasible):
            continue
        ok += 1
        assert validate(c) == []
        children.append(c)
    assert ok / 40 >= 0.95
    for c in children[:5]:
        assert spot_check(c) is None
    assert len({tuple(repr(s) for s in c.history) for c in children}) > 1


def test_crossover_rejects_mismatched_dags():
    a = sampled("matmul", dict(n=16, m=16, k=16), 0)
    b = sampled("conv2d", dict(h=6, w=6, ci=4, co=4), 0)
    with pytest.raises(ValueError, match="share"):
        crossover(a, b, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


def _tiny_model(seed=0):
    rng = np.random.default_rng(seed)
    from loomtune.features import N_FEATURES
    recs = [TrainingRecord(f"d{i}", (), float(rng.random() + 0.1),
                           feats=rng.random((1, N_FEATURES)))
            for i in range(40)]
    return train(recs, TrainHyper(trees=4, depth=3))


def test_evolve_zero_generations_ranks_seeds():
    initial = [sampled("matmul", dict(n=16, m=16, k=16), s, sketch=s % 3)
               for s in range(6)]
    model = _tiny_model()
    out = evolve(initial, model, EvolutionConfig(population=8, generations=0, k=4))
    assert 1 <= len(out) <= 4
    fits = [c.fitness for c in out]
    assert fits == sorted(fits, reverse=True)
    assert fits[0] == max(model.predict(p) for p in initial)


def test_evolve_improves_or_holds_and_validates():
    initial = [sampled("matmul", dict(n=32, m=32, k=32), s) for s in range(4)]
    model = _tiny_model(1)
    stats = EvolveStats()
    out = evolve(initial, model,
                 EvolutionConfig(population=16, generations=3, k=8, seed=11,
                                 validate_fraction=1.0),
                 stats=stats)
    assert stats.validated == 16 * 3
    assert stats.mutations + stats.crossovers + stats.copied_parents > 0
    assert len(stats.generation_best) == 3
    best_seed = max(model.predict(p) for p in initial)
    assert out[0].fitness >= best_seed
    for c in out:
        assert validate(c.program) == []


def test_evolve_deterministic():
    initial = [sampled("matmul", dict(n=32, m=32, k=32), s) for s in range(3)]
    model = _tiny_model(2)
    cfg = EvolutionConfig(population=12, generations=2, k=6, seed=5)
    a = evolve(initial, model, cfg)
    b = evolve(initial, model, cfg)
    assert [c.fitness for c in a] == [c.fitness for c in b]
    assert [c.program.history for c in a] == [c.program.history for c in b]


def test_evolve_single_candidate_population():
    initial = [sampled("matmul", dict(n=16, m=16, k=16), 0)]
    out = evolve(initial, _tiny_model(3),
                 EvolutionConfig(population=1, generations=2, k=1, seed=2))
    assert len(out) == 1
    assert validate(out[0].program) == []


def test_crossover_only_mode_counts():
    initial = [sampled("matmul_bias_relu", dict(n=16, m=16, k=16), s)
               for s in range(3)]
    stats = EvolveStats()
    evolve(initial, _tiny_model(4),
           EvolutionConfig(population=10, generations=2, k=4, seed=9,
                           mutation_prob=0.0, crossover_prob=1.0),
           stats=stats)
    assert stats.crossovers == 20


def test_config_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        EvolutionConfig(mutation_prob=0.5, crossover_prob=0.2)
    with pytest.raises(ValueError, match="population"):
        EvolutionConfig(population=4, k=8)
    with pytest.raises(ValueError, match="weights"):
        EvolutionConfig(operator_weights=(0.0, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError, match="empty"):
        evolve([], CostModel(), EvolutionConfig())
