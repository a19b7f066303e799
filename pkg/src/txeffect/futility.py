"""Dummy-outcome futility check for a suspected treatment-effect signal.

A second model is trained on the same adjusted design but with the outcome
replaced by coin flips, so it can select patients only through residual
structure in the covariates and weights. Both the real model's selected
population and the dummy model's selected population are then compared
treated-vs-untreated on the training set. The signal is trusted only when
the dummy selection loses significance while the real selection keeps it;
otherwise the apparent effect is attributed to confounding and the drug's
survival conclusions are withdrawn.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gbdt
from .gbdt import Dataset, TrainConfig
from .survival import CoxFit, WeightedSurvivalRecord, fit_cox

__all__ = ["FutilityVerdict", "run_futility"]

DEFAULT_AUC_BAND = (0.40, 0.60)
MAX_ATTEMPTS = 5
VERDICT_TRUSTED = "signal_trusted"
VERDICT_CONFOUNDED = "confounded_abort"


@dataclass
class FutilityVerdict:
    drug: str
    dummy_model_auc: float
    te_selection_fit: CoxFit | None
    futile_selection_fit: CoxFit | None
    verdict: str
    attempts: int
    te_selection_n: int
    futile_selection_n: int

    def to_json_dict(self) -> dict:
        return {
            "drug": self.drug,
            "dummy_model_auc": self.dummy_model_auc,
            "verdict": self.verdict,
            "attempts": self.attempts,
            "te_selection_n": self.te_selection_n,
            "futile_selection_n": self.futile_selection_n,
            "te_selection_fit": (
                None
                if self.te_selection_fit is None
                else self.te_selection_fit.to_json_dict()
            ),
            "futile_selection_fit": (
                None
                if self.futile_selection_fit is None
                else self.futile_selection_fit.to_json_dict()
            ),
        }


def _selection_fit(
    records: Sequence[WeightedSurvivalRecord], mask: np.ndarray
) -> CoxFit | None:
    """Adjusted treated-vs-untreated fit in the selected population."""
    selected = [r for r, keep in zip(records, mask) if keep]
    if not selected:
        return None
    try:
        return fit_cox(selected, include_covariates=True, use_weights=True)
    except ValueError:
        return None


def _is_significant(fit: CoxFit | None, alpha: float) -> bool:
    if fit is None or not fit.converged:
        return False
    return fit.p_value("treated") < alpha


def run_futility(
    train: Dataset,
    valid: Dataset,
    survival_records: Sequence[WeightedSurvivalRecord],
    te_indicated: np.ndarray,
    drug: str,
    config: TrainConfig,
    seed: int,
    indication_threshold: float = 0.5,
    alpha: float = 0.05,
    auc_band: tuple[float, float] = DEFAULT_AUC_BAND,
    max_attempts: int = MAX_ATTEMPTS,
) -> FutilityVerdict:
    """Train a dummy-outcome model and compare its selection with the real one.

    ``survival_records`` and ``te_indicated`` are aligned with the rows of
    ``train``: the check deliberately stays inside the training set. Dummy
    labels are Bernoulli(1/2). A dummy model whose validation AUC falls
    outside ``auc_band`` is redrawn with the next derived seed; failing
    ``max_attempts`` times raises, since the dummy is then not futile.
    """
    if len(survival_records) != len(train) or len(te_indicated) != len(train):
        raise ValueError("survival records and indication mask must align with train")
    low, high = auc_band
    model = None
    dummy_auc = float("nan")
    attempts = 0
    for attempt in range(max_attempts):
        attempts = attempt + 1
        rng = np.random.default_rng(seed + attempt)
        dummy_train = rng.integers(0, 2, len(train)).astype(float)
        dummy_valid = rng.integers(0, 2, len(valid)).astype(float)
        if dummy_train.min() == dummy_train.max() or (
            dummy_valid.min() == dummy_valid.max()
        ):
            continue
        candidate = gbdt.fit(
            Dataset(train.x, dummy_train, train.w, train.feature_names),
            Dataset(valid.x, dummy_valid, valid.w, valid.feature_names),
            config,
        )
        dummy_auc = float(candidate.best_validation_auc)
        if low <= dummy_auc <= high:
            model = candidate
            break
    if model is None:
        raise RuntimeError(
            f"dummy model not futile: validation AUC {dummy_auc:.3f} outside "
            f"[{low}, {high}] after {max_attempts} attempts"
        )

    scores = model.predict_rows(train.x)
    futile_mask = scores > indication_threshold
    te_mask = np.asarray(te_indicated, dtype=bool)

    futile_fit = _selection_fit(survival_records, futile_mask)
    te_fit = _selection_fit(survival_records, te_mask)

    trusted = _is_significant(te_fit, alpha) and not _is_significant(
        futile_fit, alpha
    )
    return FutilityVerdict(
        drug=drug,
        dummy_model_auc=dummy_auc,
        te_selection_fit=te_fit,
        futile_selection_fit=futile_fit,
        verdict=VERDICT_TRUSTED if trusted else VERDICT_CONFOUNDED,
        attempts=attempts,
        te_selection_n=int(te_mask.sum()),
        futile_selection_n=int(futile_mask.sum()),
    )
