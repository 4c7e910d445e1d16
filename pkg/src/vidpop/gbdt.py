"""Gradient-boosted regression trees with a second-order squared-error
objective, exact greedy split search, k-fold cross-validation, seeded random
hyperparameter search and gain-based feature importance.

Objective per boosting round (squared error): g_i = pred_i - y_i, h_i = 1.
Leaf weight: -G / (H + lambda). Split gain:

    0.5 * [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma

A split is accepted only when this gain is strictly positive. Stored node
gains are the gamma-subtracted values above; ties are broken toward the
lowest feature index, then the lowest threshold.

Numeric discipline: all node aggregates that decide a split (totals, the
winning candidate per feature, leaf weights) are computed by summing
gradients in original row order. Candidate scanning uses prefix sums for
speed, but the cross-feature comparison only ever sees the canonical sums,
so identical partitions yield identical float gains regardless of which
feature produced them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    EmptyData,
    EmptySpace,
    NonFiniteTarget,
    TooFewRows,
    UnknownFeature,
)
from .evaluate import mape, mse
from .features import FeatureMatrix, to_raw_predictions


@dataclass
class GbdtParams:
    n_rounds: int = 400
    max_depth: int = 6
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    gamma: float = 0.0
    learning_rate: float = 0.05
    subsample_rows: float = 0.9
    colsample: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 1 or self.max_depth < 1:
            raise EmptyData("n_rounds and max_depth must be positive")
        if not (0.0 < self.subsample_rows <= 1.0 and 0.0 < self.colsample <= 1.0):
            raise EmptyData("subsample_rows and colsample must lie in (0, 1]")
        if self.learning_rate <= 0 or self.min_child_weight < 0 or self.reg_lambda < 0:
            raise EmptyData("learning_rate must be > 0; regularizers must be >= 0")


@dataclass
class TreeNode:
    # internal node: feature >= 0; leaf: feature == -1
    feature: int = -1
    threshold: float = 0.0
    gain: float = 0.0
    weight: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_json(self) -> dict:
        if self.is_leaf:
            return {"leaf": self.weight}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "gain": self.gain,
            "left": self.left.to_json(),
            "right": self.right.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TreeNode":
        if "leaf" in obj:
            return cls(weight=float(obj["leaf"]))
        return cls(
            feature=int(obj["feature"]),
            threshold=float(obj["threshold"]),
            gain=float(obj["gain"]),
            left=cls.from_json(obj["left"]),
            right=cls.from_json(obj["right"]),
        )


@dataclass
class TreeEnsemble:
    params: GbdtParams
    base_score: float
    trees: list[TreeNode]
    feature_names: list[str]

    def predict_values(self, values: np.ndarray, num_trees: int | None = None) -> np.ndarray:
        """Predict from a matrix whose columns already match feature_names."""
        values = np.asarray(values, dtype=np.float64)
        out = np.full(values.shape[0], self.base_score, dtype=np.float64)
        trees = self.trees if num_trees is None else self.trees[:num_trees]
        lr = self.params.learning_rate
        for tree in trees:
            out += lr * _eval_tree(tree, values)
        return out


@dataclass
class ImportanceReport:
    gains: dict[str, float]
    split_counts: dict[str, int]

    def sorted_rows(self) -> list[tuple[str, float, int]]:
        return sorted(
            ((n, self.gains[n], self.split_counts[n]) for n in self.gains),
            key=lambda row: (-row[1], row[0]),
        )


def _eval_tree(node: TreeNode, values: np.ndarray) -> np.ndarray:
    out = np.empty(values.shape[0], dtype=np.float64)
    idx = np.arange(values.shape[0])
    stack = [(node, idx)]
    while stack:
        nd, rows = stack.pop()
        if nd.is_leaf:
            out[rows] = nd.weight
            continue
        mask = values[rows, nd.feature] < nd.threshold
        stack.append((nd.left, rows[mask]))
        stack.append((nd.right, rows[~mask]))
    return out


def _as_matrix(X) -> tuple[np.ndarray, list[str]]:
    if isinstance(X, FeatureMatrix):
        return X.values, list(X.names)
    values = np.asarray(X, dtype=np.float64)
    if values.ndim != 2:
        raise EmptyData("expected a 2-d matrix of features")
    return values, [f"f{i}" for i in range(values.shape[1])]


def _canonical_gain(
    g_node: np.ndarray, mask: np.ndarray, lam: float, gamma: float, parent_term: float, h_total: float
) -> tuple[float, float, float, float, float]:
    """Gain and child stats for one candidate, sums taken in row order."""
    gl = float(np.sum(g_node[mask]))
    hl = float(np.count_nonzero(mask))
    gr = float(np.sum(g_node[~mask]))
    hr = h_total - hl
    gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent_term) - gamma
    return gain, gl, hl, gr, hr


def _best_split(
    values: np.ndarray,
    g: np.ndarray,
    idx: np.ndarray,
    feats: np.ndarray,
    lam: float,
    gamma: float,
    mcw: float,
):
    """Best (feature, threshold, gain, left mask) over the node, or None.

    Per feature, prefix sums over the sorted column locate the best candidate
    quickly; that winner's statistics are then recomputed canonically before
    features are compared, so tie-breaking (lowest feature index, lowest
    threshold) is stable.
    """
    g_node = g[idx]
    n = len(idx)
    g_total = float(np.sum(g_node))
    h_total = float(n)
    parent_term = g_total * g_total / (h_total + lam)

    best = None  # (gain, feature, threshold, mask)
    for f in feats:
        xs = values[idx, f]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        boundaries = np.flatnonzero(xs_sorted[1:] != xs_sorted[:-1])
        if boundaries.size == 0:
            continue
        counts = boundaries + 1.0
        ok = (counts >= mcw) & ((h_total - counts) >= mcw)
        boundaries = boundaries[ok]
        if boundaries.size == 0:
            continue
        prefix = np.cumsum(g_node[order])
        gl_fast = prefix[boundaries]
        hl_fast = boundaries + 1.0
        gr_fast = g_total - gl_fast
        hr_fast = h_total - hl_fast
        gains_fast = 0.5 * (
            gl_fast * gl_fast / (hl_fast + lam)
            + gr_fast * gr_fast / (hr_fast + lam)
            - parent_term
        ) - gamma
        k = int(np.argmax(gains_fast))  # first max -> lowest threshold
        b = int(boundaries[k])
        threshold = (xs_sorted[b] + xs_sorted[b + 1]) / 2.0
        mask = xs < threshold
        gain, *_ = _canonical_gain(g_node, mask, lam, gamma, parent_term, h_total)
        if best is None or gain > best[0]:
            best = (gain, int(f), float(threshold), mask)

    if best is None or best[0] <= 0.0:
        return None
    return best


def _build_tree(
    values: np.ndarray,
    g: np.ndarray,
    idx: np.ndarray,
    feats: np.ndarray,
    params: GbdtParams,
    depth: int,
) -> TreeNode:
    lam = params.reg_lambda

    def leaf(rows: np.ndarray) -> TreeNode:
        g_sum = float(np.sum(g[rows]))
        return TreeNode(weight=-g_sum / (len(rows) + lam))

    if depth >= params.max_depth or len(idx) < 2:
        return leaf(idx)
    found = _best_split(values, g, idx, feats, lam, params.gamma, params.min_child_weight)
    if found is None:
        return leaf(idx)
    gain, feature, threshold, mask = found
    left_idx = idx[mask]
    right_idx = idx[~mask]
    return TreeNode(
        feature=feature,
        threshold=threshold,
        gain=gain,
        left=_build_tree(values, g, left_idx, feats, params, depth + 1),
        right=_build_tree(values, g, right_idx, feats, params, depth + 1),
    )


def fit_gbdt(X, y, params: GbdtParams) -> TreeEnsemble:
    """Boost squared-error regression trees on a feature matrix."""
    values, names = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    n, n_features = values.shape
    if n < 2:
        raise EmptyData("need at least 2 rows to fit")
    if len(y) != n:
        raise EmptyData("X and y row counts differ")
    if not np.isfinite(y).all():
        raise NonFiniteTarget("targets contain non-finite values")
    if not np.isfinite(values).all():
        raise NonFiniteTarget("features contain non-finite values")

    rng = np.random.default_rng(params.seed)
    base = float(np.mean(y))
    pred = np.full(n, base, dtype=np.float64)
    trees: list[TreeNode] = []
    all_rows = np.arange(n)
    all_feats = np.arange(n_features)

    n_sub = max(2, int(np.floor(params.subsample_rows * n)))
    n_col = max(1, int(np.floor(params.colsample * n_features)))

    for _ in range(params.n_rounds):
        g = pred - y
        rows = all_rows if n_sub >= n else np.sort(rng.choice(n, size=n_sub, replace=False))
        feats = (
            all_feats
            if n_col >= n_features
            else np.sort(rng.choice(n_features, size=n_col, replace=False))
        )
        tree = _build_tree(values, g, rows, feats, params, depth=0)
        trees.append(tree)
        pred += params.learning_rate * _eval_tree(tree, values)

    return TreeEnsemble(params=params, base_score=base, trees=trees, feature_names=names)


def predict_gbdt(model: TreeEnsemble, X, num_trees: int | None = None) -> np.ndarray:
    """Deterministic prediction; X must provide every model feature."""
    if isinstance(X, FeatureMatrix):
        col = {name: i for i, name in enumerate(X.names)}
        take = []
        for name in model.feature_names:
            if name not in col:
                raise UnknownFeature(name)
            take.append(col[name])
        values = X.values[:, take]
    else:
        values = np.asarray(X, dtype=np.float64)
        if values.shape[1] < len(model.feature_names):
            raise UnknownFeature(model.feature_names[values.shape[1]])
        values = values[:, : len(model.feature_names)]
    return model.predict_values(values, num_trees=num_trees)


def feature_importance(model: TreeEnsemble) -> ImportanceReport:
    """Total split gain and split count per feature (zero for unused ones)."""
    gains = {name: 0.0 for name in model.feature_names}
    counts = {name: 0 for name in model.feature_names}
    stack = list(model.trees)
    while stack:
        node = stack.pop()
        if node.is_leaf:
            continue
        name = model.feature_names[node.feature]
        gains[name] += node.gain
        counts[name] += 1
        stack.extend((node.left, node.right))
    return ImportanceReport(gains=gains, split_counts=counts)


# --- persistence ---------------------------------------------------------------


def save_gbdt(model: TreeEnsemble, path: str | Path) -> None:
    doc = {
        "format": "vidpop-gbdt-v1",
        "params": asdict(model.params),
        "base_score": model.base_score,
        "feature_names": model.feature_names,
        "trees": [t.to_json() for t in model.trees],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_gbdt(path: str | Path) -> TreeEnsemble:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "vidpop-gbdt-v1":
        raise EmptyData(f"{path}: not a gbdt model file")
    return TreeEnsemble(
        params=GbdtParams(**doc["params"]),
        base_score=float(doc["base_score"]),
        trees=[TreeNode.from_json(t) for t in doc["trees"]],
        feature_names=list(doc["feature_names"]),
    )


# --- cross-validation / tuning ----------------------------------------------------


def cross_validate(X, y, params: GbdtParams, n_folds: int = 10, seed: int = 0) -> dict:
    """Seeded shuffled k-fold CV.

    y is the transformed (log1p) target; fold metrics are computed on
    inverse-transformed predictions against the raw-scale targets.
    """
    values, names = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n_folds < 2:
        raise TooFewRows("n_folds must be >= 2")
    if n < n_folds:
        raise TooFewRows(f"{n} rows cannot fill {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = []
    for i in range(n_folds):
        val_idx = perm[i * n // n_folds : (i + 1) * n // n_folds]
        train_idx = np.setdiff1d(perm, val_idx)
        model = fit_gbdt(values[train_idx], y[train_idx], params)
        pred_raw = to_raw_predictions(model.predict_values(values[val_idx]))
        y_raw = np.expm1(y[val_idx])
        folds.append({"mape": mape(y_raw, pred_raw), "mse": mse(y_raw, pred_raw)})
    return {
        "mape_mean": float(np.mean([f["mape"] for f in folds])),
        "mse_mean": float(np.mean([f["mse"] for f in folds])),
        "folds": folds,
    }


_INT_PARAMS = {"n_rounds", "max_depth"}
_TUNABLE = {
    "n_rounds",
    "max_depth",
    "min_child_weight",
    "reg_lambda",
    "gamma",
    "learning_rate",
    "subsample_rows",
    "colsample",
}


@dataclass
class TuneResult:
    best: GbdtParams
    trials: list[dict] = field(default_factory=list)


def tune_gbdt(
    X,
    y,
    space: dict,
    budget: int,
    seed: int,
    n_folds: int = 10,
    base: GbdtParams | None = None,
) -> TuneResult:
    """Seeded uniform random search over per-parameter ranges.

    ``space`` maps parameter names to a scalar (fixed), or a [low, high]
    range sampled uniformly (integers for integer-typed parameters). Each
    draw is scored by cross_validate mean MAPE; the argmin wins, ties going
    to the earlier draw.
    """
    if budget < 1:
        raise EmptySpace("budget must be >= 1")
    if not space:
        raise EmptySpace("empty hyperparameter space")
    for name in space:
        if name not in _TUNABLE:
            raise EmptySpace(f"unknown tunable parameter {name!r}")
    base = base if base is not None else GbdtParams(seed=seed)
    rng = np.random.default_rng(seed)

    trials: list[dict] = []
    best_i, best_score, best_params = -1, np.inf, None
    for i in range(budget):
        draw = {}
        for name in sorted(space):
            spec = space[name]
            if np.isscalar(spec):
                value = spec
            else:
                lo, hi = spec
                if name in _INT_PARAMS:
                    value = int(rng.integers(int(lo), int(hi) + 1))
                else:
                    value = float(rng.uniform(float(lo), float(hi)))
            draw[name] = int(value) if name in _INT_PARAMS else float(value)
        params = replace(base, **draw)
        score = cross_validate(X, y, params, n_folds=n_folds, seed=seed)["mape_mean"]
        trials.append({"params": asdict(params), "mape_mean": score})
        if score < best_score:
            best_i, best_score, best_params = i, score, params
    return TuneResult(best=best_params, trials=trials)
