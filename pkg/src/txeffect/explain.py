"""Exact per-feature attributions for tree-ensemble predictions.

Attributions are Shapley values of the cover-weighted tree game: a feature
set "present" routes by comparison, an "absent" feature averages both
children by their training cover. The polynomial-time path algorithm keeps,
for every root-to-leaf walk, the fractions of feature subsets that reach
the leaf with each path feature included or excluded, so each leaf adds its
exact weight to every feature on the path. Contributions are reported on
the margin (log-odds) scale and satisfy local accuracy: base value plus
contributions equals the predicted margin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .gbdt import DecisionTree, TreeEnsemble, sigmoid

__all__ = [
    "ForceData",
    "ForceEntry",
    "ShapExplanation",
    "SummaryData",
    "dependence_data",
    "force_data",
    "summary_data",
    "tree_shap",
]


@dataclass(frozen=True)
class ShapExplanation:
    feature_names: tuple[str, ...]
    feature_values: np.ndarray  # aligned input, NaN for missing
    base_value: float
    contributions: np.ndarray
    prediction_margin: float

    @property
    def prediction_probability(self) -> float:
        return float(sigmoid(self.prediction_margin))

    def to_json_dict(self) -> dict:
        return {
            "base_value": self.base_value,
            "final_value": self.prediction_margin,
            "probability": self.prediction_probability,
            "contributions": [
                {
                    "feature": name,
                    "value": None if np.isnan(value) else float(value),
                    "contribution": float(c),
                }
                for name, value, c in zip(
                    self.feature_names, self.feature_values, self.contributions
                )
            ],
        }


def _extend(path: list[list], pz: float, po: float, pf: int) -> list[list]:
    out = [entry.copy() for entry in path]
    depth = len(out)
    out.append([pf, pz, po, 1.0 if depth == 0 else 0.0])
    for i in range(depth - 1, -1, -1):
        out[i + 1][3] += po * out[i][3] * (i + 1) / (depth + 1)
        out[i][3] = pz * out[i][3] * (depth - i) / (depth + 1)
    return out


def _unwind(path: list[list], index: int) -> list[list]:
    out = [entry.copy() for entry in path]
    last = len(out) - 1
    zero_fraction = out[index][1]
    one_fraction = out[index][2]
    carry = out[last][3]
    for j in range(last - 1, -1, -1):
        if one_fraction != 0.0:
            kept = out[j][3]
            out[j][3] = carry * (last + 1) / ((j + 1) * one_fraction)
            carry = kept - out[j][3] * zero_fraction * (last - j) / (last + 1)
        else:
            out[j][3] = out[j][3] * (last + 1) / (zero_fraction * (last - j))
    for j in range(index, last):
        out[j][0], out[j][1], out[j][2] = out[j + 1][0], out[j + 1][1], out[j + 1][2]
    return out[:-1]


def _unwound_sum(path: list[list], index: int) -> float:
    last = len(path) - 1
    zero_fraction = path[index][1]
    one_fraction = path[index][2]
    total = 0.0
    if one_fraction != 0.0:
        carry = path[last][3]
        for j in range(last - 1, -1, -1):
            term = carry * (last + 1) / ((j + 1) * one_fraction)
            total += term
            carry = path[j][3] - term * zero_fraction * (last - j) / (last + 1)
    else:
        for j in range(last - 1, -1, -1):
            total += path[j][3] * (last + 1) / (zero_fraction * (last - j))
    return total


def _shap_one_tree(tree: DecisionTree, x: np.ndarray, phi: np.ndarray) -> None:
    def recurse(node: int, path: list[list], pz: float, po: float, pf: int):
        path = _extend(path, pz, po, pf)
        feature = int(tree.feature[node])
        if feature < 0:
            for i in range(1, len(path)):
                weight = _unwound_sum(path, i)
                d, z, o, _ = path[i]
                phi[d] += weight * (o - z) * tree.value[node]
            return
        value = x[feature]
        if np.isnan(value):
            hot = tree.left[node] if tree.missing_left[node] else tree.right[node]
        elif value <= tree.threshold[node]:
            hot = tree.left[node]
        else:
            hot = tree.right[node]
        cold = tree.right[node] if hot == tree.left[node] else tree.left[node]
        hot_fraction = tree.cover[hot] / tree.cover[node]
        cold_fraction = tree.cover[cold] / tree.cover[node]
        incoming_zero = 1.0
        incoming_one = 1.0
        seen = next(
            (i for i in range(1, len(path)) if path[i][0] == feature), None
        )
        if seen is not None:
            incoming_zero, incoming_one = path[seen][1], path[seen][2]
            path = _unwind(path, seen)
        recurse(int(hot), path, incoming_zero * hot_fraction, incoming_one, feature)
        recurse(int(cold), path, incoming_zero * cold_fraction, 0.0, feature)

    recurse(0, [], 1.0, 1.0, -1)


def tree_shap(model: TreeEnsemble, x) -> ShapExplanation:
    """Exact attributions for one input, summed across the ensemble's trees."""
    row = model.align(x)
    phi = np.zeros(len(model.feature_names))
    base = model.base_score
    for tree in model.trees:
        _shap_one_tree(tree, row, phi)
        base += tree.expected_value()
    margin = model.predict_margin_rows(row[None, :])[0]
    return ShapExplanation(
        feature_names=model.feature_names,
        feature_values=row,
        base_value=float(base),
        contributions=phi,
        prediction_margin=float(margin),
    )


@dataclass(frozen=True)
class ForceEntry:
    feature: str
    value: float | None
    contribution: float


@dataclass(frozen=True)
class ForceData:
    base_value: float
    final_value: float
    entries: tuple[ForceEntry, ...]

    def to_json_dict(self) -> dict:
        return {
            "base": self.base_value,
            "final": self.final_value,
            "entries": [
                {
                    "feature": e.feature,
                    "value": e.value,
                    "contribution": e.contribution,
                }
                for e in self.entries
            ],
        }


def force_data(
    explanation: ShapExplanation,
    feature_display_values: Mapping[str, float] | None = None,
) -> ForceData:
    """Push-pull list for one prediction, largest |contribution| first."""
    order = sorted(
        range(len(explanation.feature_names)),
        key=lambda i: (-abs(explanation.contributions[i]), i),
    )
    entries = []
    for i in order:
        contribution = float(explanation.contributions[i])
        if contribution == 0.0:
            continue
        name = explanation.feature_names[i]
        if feature_display_values is not None and name in feature_display_values:
            value = feature_display_values[name]
        else:
            raw = explanation.feature_values[i]
            value = None if np.isnan(raw) else float(raw)
        entries.append(
            ForceEntry(feature=name, value=value, contribution=contribution)
        )
    return ForceData(
        base_value=explanation.base_value,
        final_value=explanation.prediction_margin,
        entries=tuple(entries),
    )


@dataclass
class SummaryData:
    feature_names: tuple[str, ...]
    shap_values: np.ndarray  # (n instances, m features)
    feature_values: np.ndarray
    ranking: tuple[int, ...]  # feature indices by mean |shap| descending

    def ranked_names(self) -> tuple[str, ...]:
        return tuple(self.feature_names[i] for i in self.ranking)

    def mean_abs_shap(self) -> np.ndarray:
        return np.abs(self.shap_values).mean(axis=0)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance", "feature", "feature_value", "shap_value"])
            for rank in self.ranking:
                for i in range(len(self.shap_values)):
                    value = self.feature_values[i, rank]
                    writer.writerow(
                        [
                            i,
                            self.feature_names[rank],
                            "" if np.isnan(value) else repr(float(value)),
                            repr(float(self.shap_values[i, rank])),
                        ]
                    )


def summary_data(model: TreeEnsemble, rows: np.ndarray) -> SummaryData:
    """Per-instance attributions for a matrix of inputs, ranked by impact."""
    explanations = [tree_shap(model, row) for row in np.asarray(rows, dtype=float)]
    shap_values = np.vstack([e.contributions for e in explanations])
    feature_values = np.vstack([e.feature_values for e in explanations])
    importance = np.abs(shap_values).mean(axis=0)
    ranking = tuple(
        sorted(range(len(model.feature_names)), key=lambda i: (-importance[i], i))
    )
    return SummaryData(
        feature_names=model.feature_names,
        shap_values=shap_values,
        feature_values=feature_values,
        ranking=ranking,
    )


def dependence_data(
    summary: SummaryData, feature: str
) -> tuple[np.ndarray, np.ndarray]:
    """(feature value, attribution) pairs for one feature across instances."""
    try:
        j = summary.feature_names.index(feature)
    except ValueError:
        raise KeyError(f"unknown feature {feature!r}") from None
    return summary.feature_values[:, j], summary.shap_values[:, j]
