"""Per-drug analysis pipeline: ingest through report.

One run ingests a cohort, normalizes lab names, applies the selection
criteria, splits by held-out departments plus a seeded 80:20 shuffle, and
then, for each drug independently: ascertains treatment, fits the
propensity model on the whole eligible cohort, derives stabilized weights
and a balance report, trains the weighted treatment-effect model, runs the
four-subgroup survival comparison on the held-out departments, applies the
dummy-outcome futility check when the indicated-subgroup result is
significant (a confounded verdict suppresses that drug's survival
conclusions), and collects attribution summaries. One drug's failure is
recorded and the run continues.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import causal, explain, futility, gbdt, labs, teml
from .cohort import (
    CohortSplit,
    ascertain_treatment,
    derive_who_daily,
    label_outcome,
    select_covid_admissions,
    split_cohort,
)
from .features import ROLE_PROPENSITY, ROLE_TE, FeatureCatalog, FeatureMatrix
from .gbdt import Dataset, TrainConfig
from .labs import LabClusterConfig, LabClusteringResult, cluster_labs
from .records import AdmissionRecord, read_cohort
from .survival import (
    SurvivalTable,
    WeightedSurvivalRecord,
    analyze_treatment,
    km_by_arm,
)
from .teml import SubgroupPartition, TeModel, fit_te_model, partition_subgroups

__all__ = ["DEFAULT_DRUGS", "DrugReport", "RunConfig", "RunReport", "run"]

DEFAULT_DRUGS = (
    "azithromycin",
    "chloroquine_hydroxychloroquine",
    "systemic_corticosteroids",
    "lopinavir_ritonavir",
    "remdesivir",
    "tocilizumab",
)


@dataclass(frozen=True)
class RunConfig:
    held_out_departments: tuple[str, ...]
    input_paths: tuple[str, ...] = ()
    drugs: tuple[str, ...] = DEFAULT_DRUGS
    split_ratio: float = 0.8
    seed: int = 0
    output_dir: str | None = None
    propensity: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            learning_rate=0.3, max_depth=3, max_trees=100,
            early_stopping_rounds=20, l2_leaf_penalty=0.5,
        )
    )
    te: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            learning_rate=0.3, max_depth=3, max_trees=100,
            early_stopping_rounds=20, l2_leaf_penalty=3.0,
        )
    )
    clip_bounds: tuple[float, float] = causal.DEFAULT_CLIP_BOUNDS
    indication_threshold: float = 0.5
    alpha: float = 0.05
    futility_auc_band: tuple[float, float] = futility.DEFAULT_AUC_BAND
    futility_max_attempts: int = futility.MAX_ATTEMPTS
    lab_clustering: LabClusterConfig = field(default_factory=LabClusterConfig)
    training_departments: tuple[str, ...] | None = None
    max_cox_covariates: int | None = None
    select_hyperparams: bool = False
    hyperparam_grid: tuple[TrainConfig, ...] = ()
    shap_sample: int = 200

    def validate(self) -> None:
        if not self.held_out_departments:
            raise ValueError("held-out department list must be non-empty")
        if self.training_departments is not None:
            overlap = set(self.held_out_departments) & set(
                self.training_departments
            )
            if overlap:
                raise ValueError(
                    f"held-out departments overlap training set: {sorted(overlap)}"
                )
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split ratio outside (0, 1)")
        if not 0.0 < self.indication_threshold < 1.0:
            raise ValueError("indication threshold outside (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("significance level outside (0, 1)")

    def to_json_dict(self) -> dict:
        return {
            "held_out_departments": list(self.held_out_departments),
            "input_paths": list(self.input_paths),
            "drugs": list(self.drugs),
            "split_ratio": self.split_ratio,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "propensity": self.propensity.to_json_dict(),
            "te": self.te.to_json_dict(),
            "clip_bounds": list(self.clip_bounds),
            "indication_threshold": self.indication_threshold,
            "alpha": self.alpha,
            "futility_auc_band": list(self.futility_auc_band),
            "futility_max_attempts": self.futility_max_attempts,
            "lab_clustering": {
                "max_normalized_distance": self.lab_clustering.max_normalized_distance,
                "min_t_pvalue": self.lab_clustering.min_t_pvalue,
                "median_ratio_bounds": list(self.lab_clustering.median_ratio_bounds),
            },
            "training_departments": (
                None
                if self.training_departments is None
                else list(self.training_departments)
            ),
            "max_cox_covariates": self.max_cox_covariates,
            "select_hyperparams": self.select_hyperparams,
            "shap_sample": self.shap_sample,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "RunConfig":
        kwargs = dict(data)
        for key in ("held_out_departments", "input_paths", "drugs",
                    "training_departments"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        for key in ("clip_bounds", "futility_auc_band"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        for key in ("propensity", "te"):
            if key in kwargs:
                kwargs[key] = TrainConfig.from_json_dict(kwargs[key])
        if "lab_clustering" in kwargs:
            lc = dict(kwargs["lab_clustering"])
            if "median_ratio_bounds" in lc:
                lc["median_ratio_bounds"] = tuple(lc["median_ratio_bounds"])
            kwargs["lab_clustering"] = LabClusterConfig(**lc)
        if "hyperparam_grid" in kwargs:
            kwargs["hyperparam_grid"] = tuple(
                TrainConfig.from_json_dict(c) for c in kwargs["hyperparam_grid"]
            )
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in kwargs.items() if k in known})

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class DrugReport:
    drug: str
    failed: bool = False
    error: str | None = None
    n_treated: int = 0
    n_untreated: int = 0
    n_excluded: int = 0
    propensity_auc: float | None = None
    te_validation_auc: float | None = None
    te_test_auc: float | None = None
    balance: causal.BalanceReport | None = None
    survival: SurvivalTable | None = None
    partition: SubgroupPartition | None = None
    futility_required: bool = False
    futility_verdict: futility.FutilityVerdict | None = None
    conclusions_suppressed: bool = False
    top_features: tuple[tuple[str, float], ...] = ()
    cv_selection: gbdt.CrossValidation | None = None

    def to_json_dict(self) -> dict:
        out = {
            "drug": self.drug,
            "failed": self.failed,
            "error": self.error,
            "n_treated": self.n_treated,
            "n_untreated": self.n_untreated,
            "n_excluded": self.n_excluded,
            "propensity_auc": self.propensity_auc,
            "te_validation_auc": self.te_validation_auc,
            "te_test_auc": self.te_test_auc,
            "balance": None if self.balance is None else self.balance.to_json_dict(),
            "survival": (
                None if self.survival is None else self.survival.to_rows()
            ),
            "futility_required": self.futility_required,
            "futility": (
                None
                if self.futility_verdict is None
                else self.futility_verdict.to_json_dict()
            ),
            "conclusions_suppressed": self.conclusions_suppressed,
            "top_features": [
                {"feature": name, "mean_abs_contribution": value}
                for name, value in self.top_features
            ],
        }
        if self.cv_selection is not None:
            out["cv_selection"] = {
                "best": self.cv_selection.best.to_json_dict(),
                "candidates": [
                    {
                        "config": c.config.to_json_dict(),
                        "fold_aucs": list(c.fold_aucs),
                        "mean_auc": c.mean_auc,
                        "std_auc": c.std_auc,
                    }
                    for c in self.cv_selection.candidates
                ],
            }
        return out


@dataclass
class RunReport:
    config: RunConfig
    n_input: int
    n_selected: int
    n_dropped_non_covid: int
    split_sizes: dict[str, int]
    descriptives: dict
    lab_summary: dict
    drugs: dict[str, DrugReport]

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_json_dict(),
            "n_input": self.n_input,
            "n_selected": self.n_selected,
            "n_dropped_non_covid": self.n_dropped_non_covid,
            "split_sizes": dict(sorted(self.split_sizes.items())),
            "descriptives": self.descriptives,
            "lab_clusters": self.lab_summary,
            "drugs": {
                drug: self.drugs[drug].to_json_dict()
                for drug in sorted(self.drugs)
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


def _descriptives(records: Sequence[AdmissionRecord]) -> dict:
    if not records:
        return {"n": 0}
    ages = np.array([r.age for r in records], dtype=float)
    male = sum(r.gender == "male" for r in records)
    deaths = sum(r.death_in_hospital for r in records)
    icu = sum(1 for r in records if r.icu_days)
    los = np.array([r.length_of_stay() for r in records], dtype=float)
    return {
        "n": len(records),
        "age_mean": float(ages.mean()),
        "age_sd": float(ages.std(ddof=1)) if len(ages) > 1 else 0.0,
        "age_min": float(ages.min()),
        "age_max": float(ages.max()),
        "pct_male": 100.0 * male / len(records),
        "mortality_pct": 100.0 * deaths / len(records),
        "icu_pct": 100.0 * icu / len(records),
        "length_of_stay_mean": float(los.mean()),
        "length_of_stay_max": float(los.max()),
    }


def _drug_seed(base: int, index: int, salt: int) -> int:
    return base + salt * (index + 1)


def _survival_time(record: AdmissionRecord) -> float:
    days = (
        record.death_day if record.death_in_hospital else record.last_followup_day
    )
    return float(days) if days and days > 0 else 0.5


def _complete_columns(
    matrix: FeatureMatrix, rows: np.ndarray, cap: int | None
) -> list[int]:
    """Adjustment-ready column indices over the given rows.

    Keeps columns that are fully observed and non-constant, and greedily
    drops any column nearly collinear (|r| > 0.995) with one already kept,
    so the hazards model sees a well-conditioned design.
    """
    sub = matrix.values[rows]
    keep: list[int] = []
    basis: list[np.ndarray] = []  # orthonormal, intercept-free
    for j in range(sub.shape[1]):
        column = sub[:, j]
        if np.isnan(column).any():
            continue
        sd = column.std()
        if sd == 0.0:
            continue
        residual = (column - column.mean()) / sd
        for q in basis:
            residual = residual - float(residual @ q) * q
        norm = float(np.linalg.norm(residual))
        # relative residual below 5% of the column norm => (nearly) in span
        if norm < 0.05 * np.sqrt(len(column)):
            continue
        keep.append(j)
        basis.append(residual / norm)
    if cap is not None:
        keep = keep[:cap]
    return keep


def _survival_records(
    records: Sequence[AdmissionRecord],
    assignments: Mapping[str, str],
    weights: Mapping[str, float],
    matrix: FeatureMatrix,
    row_of: Mapping[str, int],
    covariate_columns: Sequence[int],
) -> dict[str, WeightedSurvivalRecord]:
    out = {}
    for record in records:
        rid = record.admission_id
        row = matrix.values[row_of[rid]]
        covariates = {
            matrix.names[j]: float(row[j])
            for j in covariate_columns
            if not np.isnan(row[j])
        }
        out[rid] = WeightedSurvivalRecord(
            time=_survival_time(record),
            event=record.death_in_hospital,
            treated=assignments[rid] == "treated",
            weight=float(weights[rid]),
            covariates=covariates,
        )
    return out


def _analyze_drug(
    drug: str,
    drug_index: int,
    config: RunConfig,
    split: CohortSplit,
    catalog: FeatureCatalog,
    who_by_id: Mapping[str, tuple[int, ...]],
    output_dir: Path | None,
) -> DrugReport:
    report = DrugReport(drug=drug)
    parts: dict[str, list[AdmissionRecord]] = {}
    statuses: dict[str, str] = {}
    n_excluded = 0
    for name, records in (
        ("train", split.train), ("valid", split.valid), ("test", split.test)
    ):
        eligible = []
        for record in records:
            assignment = ascertain_treatment(record, drug)
            if assignment.status == "excluded":
                n_excluded += 1
                continue
            statuses[record.admission_id] = assignment.status
            eligible.append(record)
        parts[name] = eligible
    report.n_excluded = n_excluded
    report.n_treated = sum(1 for s in statuses.values() if s == "treated")
    report.n_untreated = sum(1 for s in statuses.values() if s == "untreated")

    eligible_all = parts["train"] + parts["valid"] + parts["test"]
    row_of = {r.admission_id: i for i, r in enumerate(eligible_all)}
    treated_flags = np.array(
        [statuses[r.admission_id] == "treated" for r in eligible_all]
    )

    prop_matrix = catalog.matrix(eligible_all, ROLE_PROPENSITY, drug)
    prop_config = replace(
        config.propensity, seed=_drug_seed(config.seed, drug_index, 101)
    )
    propensity = causal.fit_propensity(
        prop_matrix, treated_flags, prop_config, clip_bounds=config.clip_bounds
    )
    report.propensity_auc = propensity.validation_auc
    report.balance = causal.balance_report(
        prop_matrix, treated_flags, propensity.weights
    )
    weight_of = {
        r.admission_id: float(propensity.weights[row_of[r.admission_id]])
        for r in eligible_all
    }

    def te_dataset(records: Sequence[AdmissionRecord]) -> Dataset:
        matrix = catalog.matrix(records, ROLE_TE, drug)
        labels = []
        for record in records:
            assignment = ascertain_treatment(record, drug)
            outcome = label_outcome(
                record, assignment, who_by_id[record.admission_id]
            )
            labels.append(1.0 if outcome.te_class == "positive" else 0.0)
        weights = [weight_of[r.admission_id] for r in records]
        return Dataset.from_matrix(matrix, labels, weights)

    train_ds = te_dataset(parts["train"])
    valid_ds = te_dataset(parts["valid"])

    te_config = replace(config.te, seed=_drug_seed(config.seed, drug_index, 211))
    if config.select_hyperparams and config.hyperparam_grid:
        selection = gbdt.cross_validate(
            train_ds, te_config, candidates=config.hyperparam_grid
        )
        report.cv_selection = selection
        te_config = replace(
            selection.best, seed=_drug_seed(config.seed, drug_index, 211)
        )
    model = fit_te_model(
        train_ds, valid_ds, drug, te_config,
        indication_threshold=config.indication_threshold,
    )
    report.te_validation_auc = model.validation_auc

    test_ds = te_dataset(parts["test"]) if parts["test"] else None
    if test_ds is not None and 0.0 < test_ds.y.mean() < 1.0:
        margins = model.ensemble.predict_margin_rows(test_ds.x)
        model.test_auc = float(gbdt.auc(margins, test_ds.y))
        report.te_test_auc = model.test_auc

    partition = partition_subgroups(
        parts["test"], model, catalog, who_daily=who_by_id
    )
    report.partition = partition

    test_rows = np.array([row_of[r.admission_id] for r in parts["test"]])
    covariate_columns = _complete_columns(
        prop_matrix, test_rows, config.max_cox_covariates
    )
    survival_by_id = _survival_records(
        parts["test"], statuses, weight_of, prop_matrix, row_of, covariate_columns
    )
    report.survival = analyze_treatment(
        survival_by_id, partition, alpha=config.alpha
    )

    indicated_cell = report.survival.get("ml_indicated", adjusted=True)
    report.futility_required = bool(indicated_cell.significant)
    if report.futility_required:
        train_rows = np.array([row_of[r.admission_id] for r in parts["train"]])
        train_columns = _complete_columns(
            prop_matrix, train_rows, config.max_cox_covariates
        )
        train_survival = _survival_records(
            parts["train"], statuses, weight_of, prop_matrix, row_of,
            train_columns,
        )
        aligned = [train_survival[r.admission_id] for r in parts["train"]]
        te_indicated = np.array(
            [
                teml.indicate(
                    model, catalog.vector(record, ROLE_TE, drug)
                )[1]
                for record in parts["train"]
            ]
        )
        report.futility_verdict = futility.run_futility(
            train_ds,
            valid_ds,
            aligned,
            te_indicated,
            drug,
            te_config,
            seed=_drug_seed(config.seed, drug_index, 7919),
            indication_threshold=config.indication_threshold,
            alpha=config.alpha,
            auc_band=config.futility_auc_band,
            max_attempts=config.futility_max_attempts,
        )
        report.conclusions_suppressed = (
            report.futility_verdict.verdict == futility.VERDICT_CONFOUNDED
        )

    shap_source = parts["test"] or parts["valid"]
    shap_matrix = catalog.matrix(shap_source[: config.shap_sample], ROLE_TE, drug)
    summary = explain.summary_data(model.ensemble, shap_matrix.values)
    importance = summary.mean_abs_shap()
    report.top_features = tuple(
        (summary.feature_names[i], float(importance[i]))
        for i in summary.ranking[:10]
        if importance[i] > 0.0
    )

    if output_dir is not None:
        slug = _slug(drug)
        model.to_json(output_dir / f"bundle_{slug}.json")
        report.survival.to_csv(output_dir / f"survival_{slug}.csv", drug=drug)
        report.balance.to_csv(output_dir / f"balance_{slug}.csv")
        _write_partition_csv(partition, output_dir / f"subgroups_{slug}.csv")
        _write_km_csv(
            survival_by_id, output_dir / f"km_{slug}.csv"
        )
        shap_matrix.to_csv(
            output_dir / f"features_te_{slug}.csv",
            ids=[r.admission_id for r in shap_source[: config.shap_sample]],
        )
    return report


def _slug(drug: str) -> str:
    return re.sub(r"[^A-Za-z0-9_]+", "_", drug)


def _write_partition_csv(partition: SubgroupPartition, path: Path) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["admission_id", "supplemental_oxygen", "ml_indicated"])
        for row in partition.to_rows():
            writer.writerow(
                [
                    row["admission_id"],
                    int(row["supplemental_oxygen"]),
                    int(row["ml_indicated"]),
                ]
            )


def _write_km_csv(
    survival_by_id: Mapping[str, WeightedSurvivalRecord], path: Path
) -> None:
    import csv as _csv

    curves = km_by_arm(list(survival_by_id.values()))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["arm", "time", "survival"])
        for arm in sorted(curves, reverse=True):
            for t, s in curves[arm].steps():
                writer.writerow(
                    ["treated" if arm else "untreated", repr(t), repr(s)]
                )


def run(
    config: RunConfig, records: Sequence[AdmissionRecord] | None = None
) -> RunReport:
    """Execute the full pipeline; per-drug failures do not abort the run."""
    config.validate()
    if records is None:
        records = []
        for path in config.input_paths:
            records.extend(read_cohort(path))
    records = list(records)
    for record in records:
        record.validate()

    lab_result = cluster_labs(
        [obs for r in records for obs in r.lab_observations],
        config.lab_clustering,
    )
    selected = select_covid_admissions(records)
    dropped = len(records) - len(selected)

    split = split_cohort(
        selected, config.held_out_departments, config.split_ratio, config.seed
    )
    if config.drugs and not split.test:
        raise ValueError(
            "no admissions in the held-out departments; cannot evaluate"
        )

    catalog = (
        FeatureCatalog(selected, labs=lab_result, drugs=config.drugs)
        if selected
        else None
    )
    who_by_id = {
        r.admission_id: tuple(int(v) for v in derive_who_daily(r))
        for r in selected
    }

    output_dir = None
    if config.output_dir is not None:
        output_dir = Path(config.output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)

    drug_reports: dict[str, DrugReport] = {}
    for index, drug in enumerate(config.drugs):
        try:
            drug_reports[drug] = _analyze_drug(
                drug, index, config, split, catalog, who_by_id, output_dir
            )
        except (ValueError, RuntimeError) as exc:
            drug_reports[drug] = DrugReport(
                drug=drug, failed=True, error=str(exc)
            )

    report = RunReport(
        config=config,
        n_input=len(records),
        n_selected=len(selected),
        n_dropped_non_covid=dropped,
        split_sizes={
            "train": len(split.train),
            "valid": len(split.valid),
            "test": len(split.test),
        },
        descriptives=_descriptives(selected),
        lab_summary={
            "n_clusters": len(lab_result.clusters),
            "n_raw_names": sum(
                len(c.member_raw_names) for c in lab_result.clusters
            ),
            "n_rejected_observations": len(lab_result.rejected),
        },
        drugs=drug_reports,
    )
    if output_dir is not None:
        with open(output_dir / "report.json", "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        with open(output_dir / "lab_clusters.json", "w", encoding="utf-8") as fh:
            json.dump(lab_result.to_json_dict(), fh, sort_keys=True)
    return report
