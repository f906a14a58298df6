"""Boosted-tree cost model: training behavior, serialization, metrics."""

import numpy as np
import pytest

from loomtune.annotate import AnnotationPolicy, sample_program
from loomtune.features import N_FEATURES, extract_features
from loomtune.ir import simplify
from loomtune.model import (
    CostModel,
    TrainHyper,
    TrainingRecord,
    attach_features,
    eval_metrics,
    train,
)
from loomtune.sketch import generate_sketches, generate_sketches_traced
from loomtune.workloads import build


def synthetic_records(n, rng, statements=1):
    """Labels follow two feature columns plus mild noise."""
    out = []
    for i in range(n):
        feats = rng.random((statements, N_FEATURES))
        y = float(2.0 + feats[:, 3].sum() - 0.5 * feats[:, 7].sum()
                  + 0.01 * rng.standard_normal())
        out.append(TrainingRecord(f"dag{i}", (), y, feats=feats))
    return out


class RowZeroModel:
    """Reads the label straight out of column 0; handy for metric identities."""

    def predict_matrix(self, X):
        return float(X[:, 0].sum())


def label_records(values):
    return [TrainingRecord(f"d{i}", (), float(v),
                           feats=np.array([[float(p)] + [0.0] * (N_FEATURES - 1)]))
            for i, (v, p) in enumerate(values)]


def test_stub_model_prices_per_statement():
    stub = CostModel(base=1.0)
    dag = build("matmul", n=16, m=16, k=16)
    rng = np.random.default_rng(0)
    for sk, path in generate_sketches_traced(dag):
        p = sample_program(sk, AnnotationPolicy(), rng)
        expected = 2.0 if path[0] == 5 else 1.0
        assert stub.predict(p) == expected


def test_weighted_loss_formula():
    # one statement, prediction 0.5 against label 1.0, weight = label
    stub = CostModel(base=0.5)
    rec = TrainingRecord("d", (), 1.0,
                         feats=np.zeros((1, N_FEATURES)))
    pred = stub.predict_matrix(rec.feats)
    assert rec.y * (pred - rec.y) ** 2 == 0.25


def test_attach_features_shape():
    p = sample_program(generate_sketches(build("matmul", n=16, m=16, k=16))[0],
                       AnnotationPolicy(), np.random.default_rng(1))
    rec = attach_features(TrainingRecord("matmul", p.history, 1.0), p)
    assert rec.feats.shape == (1, N_FEATURES)


def test_train_loss_monotone_and_learns():
    rng = np.random.default_rng(42)
    recs = synthetic_records(200, rng)
    model = train(recs, TrainHyper(trees=15, depth=4))
    losses = model.train_losses
    assert len(losses) == 16
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.5 * losses[0]


def test_train_generalizes_to_held_out():
    rng = np.random.default_rng(7)
    recs = synthetic_records(250, rng)
    model = train(recs[:200], TrainHyper(trees=25, depth=4))
    m = eval_metrics(model, recs[200:], k=10)
    assert m["pairwise_accuracy"] >= 0.85
    assert m["r2"] > 0.5


def test_train_rejects_bad_inputs():
    with pytest.raises(ValueError, match="positive"):
        train([])
    with pytest.raises(ValueError, match="positive"):
        train([TrainingRecord("d", (), 0.0, feats=np.zeros((1, N_FEATURES)))])
    with pytest.raises(ValueError, match="features"):
        train([TrainingRecord("d", (), 1.0)])
    with pytest.raises(ValueError):
        TrainHyper(shrinkage=0.0)


def test_train_ignores_zero_weight_records():
    rng = np.random.default_rng(5)
    recs = synthetic_records(60, rng)
    padded = recs + [TrainingRecord("junk", (), 0.0,
                                    feats=rng.random((1, N_FEATURES)))]
    a = train(recs, TrainHyper(trees=5, depth=3))
    b = train(padded, TrainHyper(trees=5, depth=3))
    assert a.dumps() == b.dumps()


def test_train_deterministic():
    rng = np.random.default_rng(9)
    recs = synthetic_records(80, rng)
    assert train(recs, TrainHyper(trees=8, depth=3)).dumps() == \
        train(recs, TrainHyper(trees=8, depth=3)).dumps()


def test_serde_round_trip():
    rng = np.random.default_rng(3)
    recs = synthetic_records(100, rng)
    model = train(recs, TrainHyper(trees=10, depth=4))
    clone = CostModel.loads(model.dumps())
    X = rng.random((40, N_FEATURES))
    assert np.allclose(model.predict_rows(X), clone.predict_rows(X))

    bad = model.to_json() | {"n_features": N_FEATURES + 1}
    with pytest.raises(ValueError, match="feature layout"):
        CostModel.from_json(bad)


def test_prediction_invariant_under_simplify():
    rng = np.random.default_rng(12)
    model = train(synthetic_records(60, rng), TrainHyper(trees=5, depth=3))
    p = sample_program(generate_sketches(build("matmul", n=16, m=16, k=16))[1],
                       AnnotationPolicy(), rng)
    assert model.predict(p) == model.predict(simplify(p))


def test_record_json_round_trip():
    p = sample_program(generate_sketches(build("conv2d", h=6, w=6, ci=4, co=4))[0],
                       AnnotationPolicy(), np.random.default_rng(2))
    rec = TrainingRecord("conv2d", p.history, 0.75)
    back = TrainingRecord.from_json(rec.to_json())
    assert back.dag_id == "conv2d"
    assert back.history == p.history
    assert back.y == 0.75


def test_metrics_perfect_predictor():
    recs = label_records([(3.0, 3.0), (2.0, 2.0), (1.0, 1.0), (0.5, 0.5)])
    m = eval_metrics(RowZeroModel(), recs, k=2)
    assert m["rmse"] == 0.0
    assert m["r2"] == 1.0
    assert m["pairwise_accuracy"] == 1.0
    assert m["recall_at_k"] == 1.0


def test_metrics_constant_predictor_scores_half():
    recs = label_records([(3.0, 1.0), (2.0, 1.0), (1.0, 1.0), (0.5, 1.0)])
    m = eval_metrics(RowZeroModel(), recs, k=2)
    assert m["pairwise_accuracy"] == 0.5


def test_recall_counts_overlap():
    # true top-3 is {0,1,2}; predictions promote 3 over 2
    recs = label_records([(4.0, 4.0), (3.0, 3.0), (2.0, 0.5), (1.0, 1.0)])
    m = eval_metrics(RowZeroModel(), recs, k=3)
    assert m["recall_at_k"] == pytest.approx(2 / 3)


def test_pairwise_invariant_under_monotone_transform():
    rng = np.random.default_rng(21)
    ys = rng.random(12)
    preds = rng.random(12)
    base = [(y, p) for y, p in zip(ys, preds)]
    for f in (lambda p: 2 * p + 7, lambda p: p ** 3):
        warped = [(y, f(p)) for y, p in base]
        a = eval_metrics(RowZeroModel(), label_records(base), k=4)
        b = eval_metrics(RowZeroModel(), label_records(warped), k=4)
        assert a["pairwise_accuracy"] == b["pairwise_accuracy"]
        assert a["recall_at_k"] == b["recall_at_k"]


def test_metric_argument_errors():
    recs = label_records([(1.0, 1.0)])
    with pytest.raises(ValueError, match="exceeds"):
        eval_metrics(RowZeroModel(), recs, k=2)
    with pytest.raises(ValueError, match="empty"):
        eval_metrics(RowZeroModel(), [], k=1)
