"""Propensity modeling, stabilized treatment weights, and balance checks.

The propensity model is a boosted-tree classifier of the treatment flag on
pre-treatment covariates, trained on the full eligible cohort with an
internal stratified 80:20 validation split. Scores are clipped before
weighting so a handful of extreme propensities cannot dominate the
weighted analyses. Stabilized weights put the marginal treated fraction
in the numerator: treated rows get P/(p) and untreated rows (1-P)/(1-p),
which keeps the pseudo-population near its original size.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gbdt
from .features import FeatureMatrix
from .gbdt import Dataset, TrainConfig, TreeEnsemble

__all__ = [
    "BalanceReport",
    "CovariateBalance",
    "PropensityResult",
    "balance_report",
    "effective_sample_size",
    "fit_propensity",
    "stabilized_weights",
]

DEFAULT_CLIP_BOUNDS = (0.01, 0.99)


@dataclass
class PropensityResult:
    model: TreeEnsemble
    scores: np.ndarray
    marginal_treated: float
    weights: np.ndarray
    clip_bounds: tuple[float, float]
    validation_auc: float


def stabilized_weights(
    scores: np.ndarray,
    treated: np.ndarray,
    marginal_treated: float,
    clip_bounds: tuple[float, float] = DEFAULT_CLIP_BOUNDS,
) -> np.ndarray:
    low, high = clip_bounds
    if not (0.0 <= low < high <= 1.0):
        raise ValueError(f"invalid clip bounds {clip_bounds}")
    p = np.clip(np.asarray(scores, dtype=float), low, high)
    treated = np.asarray(treated, dtype=bool)
    weights = np.where(
        treated,
        marginal_treated / p,
        (1.0 - marginal_treated) / (1.0 - p),
    )
    return weights


def _internal_split(
    treated: np.ndarray, ratio: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified boolean train mask keeping at least one row per class aside."""
    rng = np.random.default_rng(seed)
    train_mask = np.zeros(len(treated), dtype=bool)
    for cls in (False, True):
        idx = np.where(treated == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(ratio * len(idx)))
        n_train = max(1, min(len(idx) - 1, n_train))
        train_mask[idx[:n_train]] = True
    return train_mask, ~train_mask


def fit_propensity(
    features: FeatureMatrix,
    treated: np.ndarray,
    config: TrainConfig,
    clip_bounds: tuple[float, float] = DEFAULT_CLIP_BOUNDS,
    split_ratio: float = 0.8,
) -> PropensityResult:
    """Fit treatment-probability model and derive stabilized weights."""
    treated = np.asarray(treated, dtype=bool)
    n_treated = int(treated.sum())
    n_untreated = len(treated) - n_treated
    if n_treated < 2 or n_untreated < 2:
        raise ValueError(
            f"propensity fit needs >= 2 rows per arm, got {n_treated} treated "
            f"and {n_untreated} untreated"
        )
    labels = treated.astype(float)
    train_mask, valid_mask = _internal_split(treated, split_ratio, config.seed)
    train = Dataset(
        x=features.values[train_mask],
        y=labels[train_mask],
        feature_names=features.names,
    )
    valid = Dataset(
        x=features.values[valid_mask],
        y=labels[valid_mask],
        feature_names=features.names,
    )
    model = gbdt.fit(train, valid, config)
    scores = model.predict_rows(features.values)
    marginal = float(treated.mean())
    weights = stabilized_weights(scores, treated, marginal, clip_bounds)
    return PropensityResult(
        model=model,
        scores=scores,
        marginal_treated=marginal,
        weights=weights,
        clip_bounds=clip_bounds,
        validation_auc=float(model.best_validation_auc),
    )


@dataclass(frozen=True)
class CovariateBalance:
    name: str
    pre_smd: float
    post_smd: float
    degenerate: bool = False


@dataclass
class BalanceReport:
    covariates: tuple[CovariateBalance, ...]
    ess_treated: float
    ess_untreated: float
    n_treated: int
    n_untreated: int
    degenerate_arms: tuple[str, ...] = ()

    def max_post_smd(self) -> float:
        values = [c.post_smd for c in self.covariates if not c.degenerate]
        return max(values) if values else 0.0

    def to_json_dict(self) -> dict:
        return {
            "covariates": [
                {
                    "name": c.name,
                    "pre_smd": c.pre_smd,
                    "post_smd": c.post_smd,
                    "degenerate": c.degenerate,
                }
                for c in self.covariates
            ],
            "effective_sample_size": {
                "treated": self.ess_treated,
                "untreated": self.ess_untreated,
            },
            "n_treated": self.n_treated,
            "n_untreated": self.n_untreated,
            "degenerate_arms": list(self.degenerate_arms),
        }

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["covariate", "pre_smd", "post_smd", "degenerate"])
            for c in self.covariates:
                writer.writerow([c.name, repr(c.pre_smd), repr(c.post_smd),
                                 int(c.degenerate)])


def effective_sample_size(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=float)
    if len(w) == 0 or w.sum() == 0.0:
        return 0.0
    return float(w.sum() ** 2 / np.dot(w, w))


def _weighted_mean(x: np.ndarray, w: np.ndarray) -> float:
    return float(np.dot(w, x) / w.sum())


def _smd(
    x: np.ndarray, treated: np.ndarray, weights: np.ndarray
) -> tuple[float, bool]:
    """|weighted mean difference| / pooled unweighted SD, NaNs dropped."""
    observed = ~np.isnan(x)
    t = observed & treated
    u = observed & ~treated
    if t.sum() == 0 or u.sum() == 0:
        return 0.0, True
    mean_t = _weighted_mean(x[t], weights[t])
    mean_u = _weighted_mean(x[u], weights[u])
    var_t = float(np.var(x[t], ddof=1)) if t.sum() > 1 else 0.0
    var_u = float(np.var(x[u], ddof=1)) if u.sum() > 1 else 0.0
    pooled = np.sqrt((var_t + var_u) / 2.0)
    if pooled == 0.0:
        if mean_t == mean_u:
            return 0.0, False
        return float("inf"), True
    return abs(mean_t - mean_u) / pooled, False


def balance_report(
    features: FeatureMatrix, treated: np.ndarray, weights: np.ndarray
) -> BalanceReport:
    treated = np.asarray(treated, dtype=bool)
    weights = np.asarray(weights, dtype=float)
    if not (len(features.values) == len(treated) == len(weights)):
        raise ValueError("features, treated, weights lengths differ")
    unit = np.ones(len(treated))
    rows = []
    for j, name in enumerate(features.names):
        column = features.values[:, j]
        pre, pre_bad = _smd(column, treated, unit)
        post, post_bad = _smd(column, treated, weights)
        rows.append(
            CovariateBalance(
                name=name, pre_smd=pre, post_smd=post,
                degenerate=pre_bad or post_bad,
            )
        )
    ess_t = effective_sample_size(weights[treated])
    ess_u = effective_sample_size(weights[~treated])
    degenerate_arms = []
    if ess_t == 0.0:
        degenerate_arms.append("treated")
    if ess_u == 0.0:
        degenerate_arms.append("untreated")
    return BalanceReport(
        covariates=tuple(rows),
        ess_treated=ess_t,
        ess_untreated=ess_u,
        n_treated=int(treated.sum()),
        n_untreated=int((~treated).sum()),
        degenerate_arms=tuple(degenerate_arms),
    )
