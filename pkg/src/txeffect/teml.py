"""Treatment-effect model training, indication, and analysis subgroups.

The treatment-effect model is a boosted-tree classifier of the combined
response class (improved-if-treated vs worsened-if-untreated) on baseline
features only, with each row carrying its stabilized treatment weight. A
patient is "indicated" when the predicted benefit probability strictly
exceeds the indication threshold. The test population splits into four
analysis subgroups: everyone, those with any supplemental-oxygen day
(daily severity score of 4 or more), the model-indicated, and the rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import gbdt
from .cohort import derive_who_daily
from .features import ROLE_TE, FeatureCatalog, FeatureVector
from .gbdt import Dataset, TrainConfig, TreeEnsemble
from .records import AdmissionRecord

__all__ = [
    "SubgroupPartition",
    "TeModel",
    "fit_te_model",
    "indicate",
    "load_te_model",
    "partition_subgroups",
]

DEFAULT_INDICATION_THRESHOLD = 0.5
BUNDLE_VERSION = 1


@dataclass
class TeModel:
    drug: str
    ensemble: TreeEnsemble
    indication_threshold: float = DEFAULT_INDICATION_THRESHOLD
    validation_auc: float | None = None
    test_auc: float | None = None

    def __post_init__(self):
        if not 0.0 < self.indication_threshold < 1.0:
            raise ValueError(
                f"indication threshold {self.indication_threshold} outside (0, 1)"
            )

    def to_json_dict(self) -> dict:
        return {
            "format_version": BUNDLE_VERSION,
            "kind": "te_model_bundle",
            "drug": self.drug,
            "indication_threshold": self.indication_threshold,
            "validation_auc": self.validation_auc,
            "test_auc": self.test_auc,
            "ensemble": self.ensemble.to_json_dict(),
        }

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "TeModel":
        if data.get("kind") != "te_model_bundle":
            raise ValueError("not a serialized treatment-effect model bundle")
        return cls(
            drug=str(data["drug"]),
            ensemble=TreeEnsemble.from_json_dict(data["ensemble"]),
            indication_threshold=float(data["indication_threshold"]),
            validation_auc=data.get("validation_auc"),
            test_auc=data.get("test_auc"),
        )


def load_te_model(path: str | Path) -> TeModel:
    with open(path, "r", encoding="utf-8") as fh:
        return TeModel.from_json_dict(json.load(fh))


def fit_te_model(
    train: Dataset,
    valid: Dataset,
    drug: str,
    config: TrainConfig,
    indication_threshold: float = DEFAULT_INDICATION_THRESHOLD,
) -> TeModel:
    """Weighted boosted-tree fit of the response class; AUC recorded."""
    ensemble = gbdt.fit(train, valid, config)
    return TeModel(
        drug=drug,
        ensemble=ensemble,
        indication_threshold=indication_threshold,
        validation_auc=float(ensemble.best_validation_auc),
    )


def indicate(model: TeModel, x: FeatureVector | Mapping | np.ndarray) -> tuple[float, bool]:
    """Benefit probability and the strict-threshold indication flag."""
    score = model.ensemble.predict(x)
    return score, score > model.indication_threshold


@dataclass(frozen=True)
class SubgroupPartition:
    full: frozenset[str]
    supplemental_oxygen: frozenset[str]
    ml_indicated: frozenset[str]
    ml_non_indicated: frozenset[str]

    def __post_init__(self):
        if self.ml_indicated | self.ml_non_indicated != self.full:
            raise ValueError("indicated/non-indicated sets do not cover the cohort")
        if self.ml_indicated & self.ml_non_indicated:
            raise ValueError("indicated and non-indicated sets overlap")
        if not self.supplemental_oxygen <= self.full:
            raise ValueError("supplemental-oxygen set outside the cohort")

    def to_rows(self) -> list[dict]:
        return [
            {
                "admission_id": admission_id,
                "supplemental_oxygen": admission_id in self.supplemental_oxygen,
                "ml_indicated": admission_id in self.ml_indicated,
            }
            for admission_id in sorted(self.full)
        ]


def partition_subgroups(
    records: Sequence[AdmissionRecord],
    model: TeModel,
    catalog: FeatureCatalog,
    who_daily: Mapping[str, Sequence[int]] | None = None,
) -> SubgroupPartition:
    full = set()
    oxygen = set()
    indicated = set()
    for record in records:
        full.add(record.admission_id)
        who = (
            who_daily[record.admission_id]
            if who_daily is not None
            else derive_who_daily(record)
        )
        if any(score >= 4 for score in who):
            oxygen.add(record.admission_id)
        _, flagged = indicate(
            model, catalog.vector(record, ROLE_TE, model.drug)
        )
        if flagged:
            indicated.add(record.admission_id)
    return SubgroupPartition(
        full=frozenset(full),
        supplemental_oxygen=frozenset(oxygen),
        ml_indicated=frozenset(indicated),
        ml_non_indicated=frozenset(full - indicated),
    )
