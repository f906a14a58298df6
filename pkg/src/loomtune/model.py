"""Gradient-boosted regression trees over per-statement features.

A program's score is the sum of the ensemble's outputs on its statements,
and training minimizes the throughput-weighted squared error of that sum:
programs with higher measured throughput pull harder. Each boosting round
fits one depth-limited tree by exact greedy splitting, equal-attributing
the program residual to its statements, and a halving line search on the
round's step keeps the training loss monotone.

From-scratch on purpose; determinism and a transparent loss trump speed
at this scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .features import N_FEATURES, extract_features
from .ir import Program, RewriteStep, history_from_json, history_to_json

EPS_GAIN = 1e-12
MAX_HALVINGS = 12


@dataclass(frozen=True)
class TrainHyper:
    trees: int = 30
    depth: int = 6
    shrinkage: float = 0.3

    def __post_init__(self) -> None:
        if self.trees < 0 or self.depth < 1 or not 0 < self.shrinkage <= 1:
            raise ValueError("bad training hyperparameters")


@dataclass
class TrainingRecord:
    dag_id: str
    history: tuple[RewriteStep, ...]
    y: float
    feats: np.ndarray | None = None
    # in-memory only: raw measured cost and the replayed program, kept so
    # the tuner can re-normalize labels and reseed populations cheaply
    cost: float | None = None
    program: "Program | None" = None

    def to_json(self) -> dict:
        return {"dag": self.dag_id, "history": history_to_json(self.history),
                "y": self.y}

    @staticmethod
    def from_json(obj: dict) -> "TrainingRecord":
        return TrainingRecord(obj["dag"], history_from_json(obj["history"]),
                              float(obj["y"]))


def attach_features(record: TrainingRecord, program: Program) -> TrainingRecord:
    record.feats = extract_features(program)
    return record


@dataclass
class Tree:
    feature: np.ndarray   # int, -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    eta: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(X), dtype=np.int64)
        if len(X) == 0:
            return np.zeros(0)
        for _ in range(64):
            f = self.feature[idx]
            internal = f >= 0
            if not internal.any():
                break
            fx = X[np.arange(len(X)), np.maximum(f, 0)]
            go_left = fx <= self.threshold[idx]
            idx = np.where(internal, np.where(go_left, self.left[idx],
                                              self.right[idx]), idx)
        return self.value[idx] * self.eta


@dataclass
class CostModel:
    base: float = 0.0
    trees: list[Tree] = field(default_factory=list)
    hyper: TrainHyper = TrainHyper()
    train_losses: list[float] = field(default_factory=list)

    def predict_rows(self, X: np.ndarray) -> np.ndarray:
        out = np.full(len(X), self.base)
        for t in self.trees:
            out += t.predict(X)
        return out

    def predict_matrix(self, X: np.ndarray) -> float:
        return float(self.predict_rows(X).sum())

    def predict(self, program: Program) -> float:
        return self.predict_matrix(extract_features(program))

    def to_json(self) -> dict:
        return {
            "base": self.base,
            "n_features": N_FEATURES,
            "shrinkage": self.hyper.shrinkage,
            "depth": self.hyper.depth,
            "trees": [
                {"eta": t.eta,
                 "feature": t.feature.tolist(),
                 "threshold": t.threshold.tolist(),
                 "left": t.left.tolist(),
                 "right": t.right.tolist(),
                 "value": t.value.tolist()}
                for t in self.trees
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "CostModel":
        if obj.get("n_features") != N_FEATURES:
            raise ValueError("model was built for a different feature layout")
        m = CostModel(base=float(obj["base"]),
                      hyper=TrainHyper(trees=len(obj["trees"]),
                                       depth=int(obj.get("depth", 6)),
                                       shrinkage=float(obj["shrinkage"])))
        for t in obj["trees"]:
            m.trees.append(Tree(
                np.asarray(t["feature"], dtype=np.int64),
                np.asarray(t["threshold"], dtype=np.float64),
                np.asarray(t["left"], dtype=np.int64),
                np.asarray(t["right"], dtype=np.int64),
                np.asarray(t["value"], dtype=np.float64),
                float(t["eta"])))
        return m

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def loads(s: str) -> "CostModel":
        return CostModel.from_json(json.loads(s))


# ---------------------------------------------------------------------------
# Tree fitting
# ---------------------------------------------------------------------------


def _fit_tree(X: np.ndarray, target: np.ndarray, w: np.ndarray,
              depth: int) -> Tree:
    n, nf = X.shape
    order = [np.argsort(X[:, f], kind="stable") for f in range(nf)]

    feature = [-1]
    threshold = [0.0]
    left = [0]
    right = [0]
    node_of = np.zeros(n, dtype=np.int64)
    frontier = [0]

    for _ in range(depth):
        if not frontier:
            break
        best: dict[int, tuple[float, int, float]] = {}
        frontier_set = np.zeros(len(feature), dtype=bool)
        for nd in frontier:
            frontier_set[nd] = True
        active = frontier_set[node_of]

        for f in range(nf):
            arr = order[f]
            rows = arr[active[arr]]
            if len(rows) < 2:
                continue
            g = node_of[rows]
            perm = np.argsort(g, kind="stable")
            rows = rows[perm]
            g = g[perm]
            xw = w[rows]
            xt = target[rows]
            xv = X[rows, f]
            cw = np.cumsum(xw)
            cs = np.cumsum(xw * xt)

            starts = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
            ends = np.r_[starts[1:], len(g)]
            counts = ends - starts
            base_w = np.where(starts > 0, cw[starts - 1], 0.0)
            base_s = np.where(starts > 0, cs[starts - 1], 0.0)
            grp_w = cw[ends - 1] - base_w
            grp_s = cs[ends - 1] - base_s

            wl = cw - np.repeat(base_w, counts)
            sl = cs - np.repeat(base_s, counts)
            wr = np.repeat(grp_w, counts) - wl
            sr = np.repeat(grp_s, counts) - sl
            valid = np.ones(len(g), dtype=bool)
            valid[ends - 1] = False
            valid[:-1] &= xv[:-1] != xv[1:]
            valid &= (wl > 0) & (wr > 0)
            if not valid.any():
                continue
            tiny = 1e-300
            gain = np.where(
                valid,
                sl * sl / np.maximum(wl, tiny)
                + sr * sr / np.maximum(wr, tiny)
                - np.repeat(grp_s * grp_s / np.maximum(grp_w, tiny), counts),
                -np.inf)
            gmax = np.maximum.reduceat(gain, starts)
            hit = np.flatnonzero(gain == np.repeat(gmax, counts))
            grp_of = np.searchsorted(starts, hit, side="right") - 1
            uniq, first = np.unique(grp_of, return_index=True)
            for gi, ci in zip(uniq, first):
                if gmax[gi] <= EPS_GAIN or not np.isfinite(gmax[gi]):
                    continue
                p = int(hit[ci])
                nd = int(g[p])
                gn = float(gmax[gi])
                thr = 0.5 * (xv[p] + xv[p + 1])
                if nd not in best or gn > best[nd][0]:
                    best[nd] = (gn, f, float(thr))

        next_frontier = []
        for nd in frontier:
            if nd not in best:
                continue
            _, f, thr = best[nd]
            li, ri = len(feature), len(feature) + 1
            feature[nd] = f
            threshold[nd] = thr
            left[nd] = li
            right[nd] = ri
            feature += [-1, -1]
            threshold += [0.0, 0.0]
            left += [0, 0]
            right += [0, 0]
            mask = node_of == nd
            goes_left = mask & (X[:, f] <= thr)
            node_of[goes_left] = li
            node_of[mask & ~goes_left] = ri
            next_frontier += [li, ri]
        frontier = next_frontier

    value = np.zeros(len(feature))
    for nd in range(len(feature)):
        if feature[nd] >= 0:
            continue
        mask = node_of == nd
        ww = w[mask]
        tot = ww.sum()
        if tot > 0:
            value[nd] = float((ww * target[mask]).sum() / tot)
    return Tree(np.asarray(feature, dtype=np.int64),
                np.asarray(threshold),
                np.asarray(left, dtype=np.int64),
                np.asarray(right, dtype=np.int64),
                value, 1.0)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def train(records: list[TrainingRecord], hyper: TrainHyper = TrainHyper()) -> CostModel:
    """Fit the ensemble on throughput-labeled programs. Records with y = 0
    carry zero weight and are dropped up front; at least one positive
    label is required."""
    usable = [r for r in records if r.y > 0]
    if not usable:
        raise ValueError("training needs at least one record with positive throughput")
    for r in usable:
        if r.feats is None:
            raise ValueError(f"record for {r.dag_id} has no features attached")

    X = np.vstack([r.feats for r in usable])
    prog = np.concatenate([np.full(len(r.feats), i, dtype=np.int64)
                           for i, r in enumerate(usable)])
    y = np.asarray([r.y for r in usable])
    n_stmt = np.asarray([len(r.feats) for r in usable], dtype=np.float64)
    wp = y.copy()
    row_w = wp[prog]

    denom = float((wp * n_stmt * n_stmt).sum())
    base = float((wp * y * n_stmt).sum() / denom) if denom > 0 else 0.0

    model = CostModel(base=base, hyper=hyper)
    pred = base * n_stmt

    def loss_of(p: np.ndarray) -> float:
        return float((wp * (p - y) ** 2).sum())

    loss = loss_of(pred)
    model.train_losses.append(loss)
    for _ in range(hyper.trees):
        resid = y - pred
        target = (resid / n_stmt)[prog]
        tree = _fit_tree(X, target, row_w, hyper.depth)
        per_row = tree.predict(X)
        per_prog = np.bincount(prog, weights=per_row, minlength=len(usable))

        eta = hyper.shrinkage
        for _h in range(MAX_HALVINGS + 1):
            new_loss = loss_of(pred + eta * per_prog)
            if new_loss <= loss:
                break
            eta *= 0.5
        else:
            eta = 0.0
            new_loss = loss

        if eta == 0.0:
            model.train_losses.append(loss)
            continue
        tree.eta = eta
        model.trees.append(tree)
        pred = pred + eta * per_prog
        loss = new_loss
        model.train_losses.append(loss)
    return model


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def eval_metrics(model: CostModel, testset: list[TrainingRecord],
                 k: int) -> dict[str, float]:
    if not testset:
        raise ValueError("empty test set")
    if k > len(testset):
        raise ValueError(f"k={k} exceeds test set size {len(testset)}")
    preds = np.asarray([model.predict_matrix(r.feats) for r in testset])
    ys = np.asarray([r.y for r in testset])

    rmse = float(np.sqrt(np.mean((preds - ys) ** 2)))
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    ss_res = float(((ys - preds) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)

    n = len(testset)
    good = 0.0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            pairs += 1
            if ys[i] == ys[j] or preds[i] == preds[j]:
                good += 0.5
            elif (ys[i] < ys[j]) == (preds[i] < preds[j]):
                good += 1.0
    pairwise = good / pairs if pairs else 1.0

    true_top = set(sorted(range(n), key=lambda i: (-ys[i], i))[:k])
    pred_top = set(sorted(range(n), key=lambda i: (-preds[i], i))[:k])
    recall = len(true_top & pred_top) / k

    return {"rmse": rmse, "r2": r2, "pairwise_accuracy": pairwise,
            "recall_at_k": recall}
