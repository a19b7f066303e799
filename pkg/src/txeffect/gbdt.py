"""Weighted gradient-boosted decision trees for binary targets.

Trees are grown depth-wise with exact split search on sorted feature
values, using the gradients and curvatures of the weighted cross-entropy
at the current margins. Each split additionally learns which branch
receives rows whose split feature is unrecorded, by scoring both
assignments of the missing bucket. Leaf values are Newton steps with an
L2 penalty; training stops early when validation AUC stops improving and
the returned ensemble is truncated at the best validation iteration.

Split-gain ties break toward the lower feature index, then the lower
threshold, then routing the missing bucket left, so fitting is fully
deterministic for a given dataset and configuration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import FeatureMatrix, FeatureVector

__all__ = [
    "CandidateScore",
    "CrossValidation",
    "Dataset",
    "DecisionTree",
    "TrainConfig",
    "TreeEnsemble",
    "auc",
    "cross_validate",
    "fit",
    "load_ensemble",
    "sigmoid",
    "stratified_folds",
]

_MIN_GAIN = 1e-12
SERIALIZATION_VERSION = 1


def sigmoid(margin):
    return 1.0 / (1.0 + np.exp(-np.asarray(margin, dtype=float)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.3
    max_depth: int = 6
    max_trees: int = 200
    l2_leaf_penalty: float = 3.0
    early_stopping_rounds: int = 20
    seed: int = 0
    folds: int = 10

    def __post_init__(self):
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning_rate must be positive and finite")
        if self.max_depth < 1 or self.max_trees < 1:
            raise ValueError("max_depth and max_trees must be positive")
        if self.l2_leaf_penalty < 0 or not math.isfinite(self.l2_leaf_penalty):
            raise ValueError("l2_leaf_penalty must be non-negative and finite")
        if self.early_stopping_rounds < 1:
            raise ValueError("early_stopping_rounds must be positive")
        if self.folds < 1:
            raise ValueError("folds must be positive")

    def to_json_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_depth": self.max_depth,
            "max_trees": self.max_trees,
            "l2_leaf_penalty": self.l2_leaf_penalty,
            "early_stopping_rounds": self.early_stopping_rounds,
            "seed": self.seed,
            "folds": self.folds,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "TrainConfig":
        return cls(**{k: data[k] for k in cls().to_json_dict() if k in data})


@dataclass
class Dataset:
    x: np.ndarray  # (n, m) float64; NaN marks missing
    y: np.ndarray  # (n,) in {0, 1}
    w: np.ndarray | None = None  # (n,) positive; None means unit weights
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2:
            raise ValueError("x must be 2-dimensional")
        self.y = np.asarray(self.y, dtype=float)
        if self.w is None:
            self.w = np.ones(len(self.y))
        self.w = np.asarray(self.w, dtype=float)
        if not (len(self.x) == len(self.y) == len(self.w)):
            raise ValueError("x, y, w lengths differ")
        if not self.feature_names:
            self.feature_names = tuple(f"f{i}" for i in range(self.x.shape[1]))
        if len(self.feature_names) != self.x.shape[1]:
            raise ValueError("feature_names length mismatch")
        if np.isinf(self.x).any():
            raise ValueError("non-finite (infinite) feature values")
        if not np.isin(self.y, (0.0, 1.0)).all():
            raise ValueError("labels must be 0 or 1")
        if not np.isfinite(self.w).all() or (self.w <= 0).any():
            raise ValueError("weights must be finite and positive")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(
            x=self.x[index],
            y=self.y[index],
            w=self.w[index],
            feature_names=self.feature_names,
        )

    @classmethod
    def from_matrix(
        cls,
        matrix: FeatureMatrix,
        labels: Sequence[float] | np.ndarray,
        weights: Sequence[float] | np.ndarray | None = None,
    ) -> "Dataset":
        return cls(
            x=matrix.values, y=np.asarray(labels), w=weights,
            feature_names=matrix.names,
        )


@dataclass
class DecisionTree:
    """Flat-array binary tree; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    def n_nodes(self) -> int:
        return len(self.feature)

    def predict_margin(self, x: np.ndarray) -> np.ndarray:
        node_of = np.zeros(len(x), dtype=np.int32)
        out = np.zeros(len(x))
        for i in range(self.n_nodes()):
            mask = node_of == i
            if not mask.any():
                continue
            f = self.feature[i]
            if f < 0:
                out[mask] = self.value[i]
                continue
            rows = np.where(mask)[0]
            v = x[rows, f]
            missing = np.isnan(v)
            with np.errstate(invalid="ignore"):
                go_left = v <= self.threshold[i]
            go_left = np.where(missing, self.missing_left[i], go_left)
            node_of[rows[go_left]] = self.left[i]
            node_of[rows[~go_left]] = self.right[i]
        return out

    def expected_value(self) -> float:
        """Cover-weighted mean leaf value (the training-distribution output)."""
        leaves = self.feature < 0
        return float(
            np.dot(self.value[leaves], self.cover[leaves]) / self.cover[0]
        )


@dataclass
class TreeEnsemble:
    base_score: float
    trees: list[DecisionTree]
    feature_names: tuple[str, ...]
    best_validation_auc: float | None = None

    def align(
        self, x: FeatureVector | Mapping[str, float | None] | np.ndarray
    ) -> np.ndarray:
        """Map one input to the model's feature order; absent entries -> NaN."""
        if isinstance(x, np.ndarray):
            if x.shape != (len(self.feature_names),):
                raise ValueError(
                    f"expected {len(self.feature_names)} feature values, "
                    f"got shape {x.shape}"
                )
            return np.asarray(x, dtype=float)
        if isinstance(x, FeatureVector):
            pairs = dict(zip(x.names, x.values))
        else:
            pairs = {k: (np.nan if v is None else float(v)) for k, v in x.items()}
        unknown = sorted(set(pairs) - set(self.feature_names))
        if unknown:
            raise ValueError(f"unknown feature names: {unknown}")
        return np.array(
            [pairs.get(name, np.nan) for name in self.feature_names], dtype=float
        )

    def predict_margin(self, x) -> float:
        row = self.align(x)[None, :]
        return float(self.predict_margin_rows(row)[0])

    def predict(self, x) -> float:
        return float(sigmoid(self.predict_margin(x)))

    def predict_margin_rows(self, x: np.ndarray) -> np.ndarray:
        margins = np.full(len(x), self.base_score)
        for tree in self.trees:
            margins += tree.predict_margin(x)
        return margins

    def predict_rows(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(self.predict_margin_rows(x))

    def to_json_dict(self) -> dict:
        return {
            "format_version": SERIALIZATION_VERSION,
            "kind": "tree_ensemble",
            "base_score": self.base_score,
            "feature_names": list(self.feature_names),
            "best_validation_auc": self.best_validation_auc,
            "trees": [_tree_to_dict(t) for t in self.trees],
        }

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "TreeEnsemble":
        if data.get("kind") != "tree_ensemble":
            raise ValueError("not a serialized tree ensemble")
        if data.get("format_version") != SERIALIZATION_VERSION:
            raise ValueError(
                f"unsupported ensemble format version {data.get('format_version')}"
            )
        return cls(
            base_score=float(data["base_score"]),
            trees=[_tree_from_dict(t) for t in data["trees"]],
            feature_names=tuple(data["feature_names"]),
            best_validation_auc=data.get("best_validation_auc"),
        )


def load_ensemble(path: str | Path) -> TreeEnsemble:
    with open(path, "r", encoding="utf-8") as fh:
        return TreeEnsemble.from_json_dict(json.load(fh))


def _tree_to_dict(tree: DecisionTree) -> dict:
    leaf = tree.feature < 0
    return {
        "feature": tree.feature.tolist(),
        "threshold": [
            None if leaf[i] else float(tree.threshold[i])
            for i in range(tree.n_nodes())
        ],
        "missing_left": tree.missing_left.tolist(),
        "left": tree.left.tolist(),
        "right": tree.right.tolist(),
        "value": tree.value.tolist(),
        "cover": tree.cover.tolist(),
    }


def _tree_from_dict(data: Mapping) -> DecisionTree:
    threshold = np.array(
        [np.nan if t is None else float(t) for t in data["threshold"]]
    )
    return DecisionTree(
        feature=np.asarray(data["feature"], dtype=np.int32),
        threshold=threshold,
        missing_left=np.asarray(data["missing_left"], dtype=bool),
        left=np.asarray(data["left"], dtype=np.int32),
        right=np.asarray(data["right"], dtype=np.int32),
        value=np.asarray(data["value"], dtype=float),
        cover=np.asarray(data["cover"], dtype=float),
    )


@dataclass
class _Split:
    gain: float
    feature: int
    threshold: float
    missing_left: bool


def _gain(gl, hl, gr, hr, g, h, lam):
    return 0.5 * (
        gl * gl / (hl + lam) + gr * gr / (hr + lam) - g * g / (h + lam)
    )


def _best_split_for_feature(
    values: np.ndarray, g: np.ndarray, h: np.ndarray, lam: float
) -> tuple[float, float, bool] | None:
    """Best (gain, threshold, missing_left) on one feature, or None."""
    missing = np.isnan(values)
    observed = ~missing
    n_obs = int(observed.sum())
    if n_obs < 2:
        return None
    v = values[observed]
    order = np.argsort(v, kind="stable")
    v = v[order]
    g_sorted = g[observed][order]
    h_sorted = h[observed][order]
    boundaries = np.nonzero(v[:-1] < v[1:])[0]
    if boundaries.size == 0:
        return None
    g_total = float(g.sum())
    h_total = float(h.sum())
    g_missing = float(g[missing].sum())
    h_missing = float(h[missing].sum())
    gl_obs = np.cumsum(g_sorted)[boundaries]
    hl_obs = np.cumsum(h_sorted)[boundaries]
    thresholds = (v[boundaries] + v[boundaries + 1]) / 2.0

    best: tuple[float, float, bool] | None = None
    for missing_left in (True, False):
        gl = gl_obs + g_missing if missing_left else gl_obs
        hl = hl_obs + h_missing if missing_left else hl_obs
        gains = _gain(gl, hl, g_total - gl, h_total - hl, g_total, h_total, lam)
        k = int(np.argmax(gains))
        if gains[k] > _MIN_GAIN and (best is None or gains[k] > best[0]):
            best = (float(gains[k]), float(thresholds[k]), missing_left)
    return best


def _find_split(
    x: np.ndarray, rows: np.ndarray, g: np.ndarray, h: np.ndarray, lam: float
) -> _Split | None:
    best: _Split | None = None
    g_node = g[rows]
    h_node = h[rows]
    for f in range(x.shape[1]):
        found = _best_split_for_feature(x[rows, f], g_node, h_node, lam)
        if found is not None and (best is None or found[0] > best.gain):
            best = _Split(
                gain=found[0], feature=f, threshold=found[1], missing_left=found[2]
            )
    return best


def _grow_tree(
    x: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    w: np.ndarray,
    config: TrainConfig,
) -> tuple[DecisionTree, np.ndarray]:
    """Grow one tree; returns the tree and per-row margin increments."""
    feature: list[int] = []
    threshold: list[float] = []
    missing_left: list[bool] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []
    cover: list[float] = []
    increments = np.zeros(len(g))

    # queue entries: (node index, row indices, depth)
    queue: list[tuple[int, np.ndarray, int]] = []

    def new_node(rows: np.ndarray) -> int:
        idx = len(feature)
        feature.append(-1)
        threshold.append(np.nan)
        missing_left.append(True)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        cover.append(float(w[rows].sum()))
        return idx

    root_rows = np.arange(len(g))
    queue.append((new_node(root_rows), root_rows, 0))
    while queue:
        node, rows, depth = queue.pop(0)
        split = (
            _find_split(x, rows, g, h, config.l2_leaf_penalty)
            if depth < config.max_depth and len(rows) >= 2
            else None
        )
        if split is None:
            leaf_value = -config.learning_rate * (
                g[rows].sum() / (h[rows].sum() + config.l2_leaf_penalty)
            )
            value[node] = float(leaf_value)
            increments[rows] = leaf_value
            continue
        v = x[rows, split.feature]
        with np.errstate(invalid="ignore"):
            go_left = v <= split.threshold
        go_left = np.where(np.isnan(v), split.missing_left, go_left)
        feature[node] = split.feature
        threshold[node] = split.threshold
        missing_left[node] = split.missing_left
        left_rows = rows[go_left]
        right_rows = rows[~go_left]
        left[node] = new_node(left_rows)
        right[node] = new_node(right_rows)
        queue.append((left[node], left_rows, depth + 1))
        queue.append((right[node], right_rows, depth + 1))

    tree = DecisionTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=float),
        missing_left=np.asarray(missing_left, dtype=bool),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        value=np.asarray(value, dtype=float),
        cover=np.asarray(cover, dtype=float),
    )
    return tree, increments


def cross_entropy(margins: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Weighted cross-entropy of labels given margins (log-odds)."""
    m = np.asarray(margins, dtype=float)
    # log(1 + exp(m)) - y*m, computed stably
    softplus = np.logaddexp(0.0, m)
    return float(np.dot(w, softplus - y * m))


def gradient_hessian(
    margins: np.ndarray, y: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivatives of the weighted cross-entropy wrt margins."""
    p = sigmoid(margins)
    return w * (p - y), w * p * (1.0 - p)


def _weighted_base_score(y: np.ndarray, w: np.ndarray) -> float:
    p = float(np.dot(w, y) / w.sum())
    p = min(max(p, 1e-6), 1.0 - 1e-6)
    return math.log(p / (1.0 - p))


def fit(train: Dataset, valid: Dataset, config: TrainConfig) -> TreeEnsemble:
    """Boost trees on the training set, early-stopping on validation AUC."""
    if len(train) == 0 or len(valid) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if train.y.min() == train.y.max():
        raise ValueError("degenerate labels: training set has a single class")
    if train.feature_names != valid.feature_names:
        raise ValueError("train/validation feature names differ")

    base = _weighted_base_score(train.y, train.w)
    margins_train = np.full(len(train), base)
    margins_valid = np.full(len(valid), base)
    trees: list[DecisionTree] = []
    best_auc = -np.inf
    best_n = 0
    stall = 0
    for _ in range(config.max_trees):
        g, h = gradient_hessian(margins_train, train.y, train.w)
        tree, increments = _grow_tree(train.x, g, h, train.w, config)
        trees.append(tree)
        margins_train += increments
        margins_valid += tree.predict_margin(valid.x)
        score = auc(margins_valid, valid.y)
        if score > best_auc:
            best_auc = score
            best_n = len(trees)
            stall = 0
        else:
            # a tie is not an improvement, but the tied iteration is still a
            # best-validation iteration: keep the longer (better calibrated)
            # ensemble while the tie counts toward the stopping patience
            if score == best_auc:
                best_n = len(trees)
            stall += 1
            if stall >= config.early_stopping_rounds:
                break
    return TreeEnsemble(
        base_score=base,
        trees=trees[:best_n],
        feature_names=train.feature_names,
        best_validation_auc=float(best_auc),
    )


def auc(scores, labels) -> float:
    """Rank-based AUC (Mann-Whitney) with half credit for tied scores."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(s) != len(y):
        raise ValueError("scores and labels length mismatch")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def stratified_folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Deterministic per-class round-robin fold assignment after a shuffle."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int32)
    for cls in (0, 1):
        idx = np.where(y == cls)[0]
        if len(idx) < k:
            raise ValueError(
                f"{k} folds exceed the {len(idx)} rows of class {cls}"
            )
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = np.arange(len(idx)) % k
    return fold_of


@dataclass(frozen=True)
class CandidateScore:
    config: TrainConfig
    fold_aucs: tuple[float, ...]
    mean_auc: float
    std_auc: float


@dataclass(frozen=True)
class CrossValidation:
    candidates: tuple[CandidateScore, ...]
    best: TrainConfig


def cross_validate(
    data: Dataset,
    config: TrainConfig,
    candidates: Sequence[TrainConfig] | None = None,
) -> CrossValidation:
    """Stratified k-fold AUC per hyperparameter candidate; argmax selected.

    The held-out fold doubles as the early-stopping validation set, as is
    conventional for boosted-tree cross-validation.
    """
    if len(data) < config.folds:
        raise ValueError("fewer rows than folds")
    fold_of = stratified_folds(data.y, config.folds, config.seed)
    pool = list(candidates) if candidates is not None else [config]
    scores: list[CandidateScore] = []
    for candidate in pool:
        fold_aucs = []
        for fold in range(config.folds):
            held = fold_of == fold
            model = fit(data.subset(~held), data.subset(held), candidate)
            margins = model.predict_margin_rows(data.x[held])
            fold_aucs.append(auc(margins, data.y[held]))
        fold_aucs = tuple(float(a) for a in fold_aucs)
        scores.append(
            CandidateScore(
                config=candidate,
                fold_aucs=fold_aucs,
                mean_auc=float(np.mean(fold_aucs)),
                std_auc=float(np.std(fold_aucs)),
            )
        )
    best = max(range(len(scores)), key=lambda i: (scores[i].mean_auc, -i))
    return CrossValidation(candidates=tuple(scores), best=pool[best])
