"""Synthetic admission cohorts with known treatment-effect ground truth.

Treatment is assigned by a logistic model on drawn confounders; survival
times are exponential with a log-linear hazard in the confounders, an
optional latent (unmeasured) confounder, and the treatment effect, which
a configurable subgroup rule can strengthen. Censoring is independent and
exponential with an administrative cap. Every generated admission carries
daily series, labs, doses, and discharge fields shaped so the cohort
module's selection rules, severity trajectories, and labels all apply
unchanged; the sidecar ground truth records the exact hazards, propensities
and subgroup membership the pipeline is supposed to recover.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .records import AdmissionRecord, DoseEvent, LabObservation

__all__ = [
    "ConfounderSpec",
    "GroundTruth",
    "SubgroupRule",
    "SynthCohort",
    "SynthConfig",
    "generate",
    "measured_confounding_preset",
    "null_effect_preset",
    "subgroup_benefit_preset",
    "unmeasured_confounding_preset",
]

_EPOCH = date(2020, 3, 1)
_GENDERS = ("female", "male")
_COMORBIDITY_RATES = {
    "diabetes_type2": 0.20,
    "heart_chronic": 0.15,
    "respiratory_chronic": 0.15,
    "active_malignancy": 0.05,
}


@dataclass(frozen=True)
class ConfounderSpec:
    """One observed covariate: its sampling law and its log-hazard effect."""

    name: str
    dist: str  # "normal" | "bernoulli" | "uniform"
    params: tuple[float, ...]
    hazard_coef: float = 0.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.dist == "normal":
            mean, sd = self.params
            return rng.normal(mean, sd, n)
        if self.dist == "bernoulli":
            (p,) = self.params
            return (rng.random(n) < p).astype(float)
        if self.dist == "uniform":
            low, high = self.params
            return rng.uniform(low, high, n)
        raise ValueError(f"unknown confounder distribution {self.dist!r}")


@dataclass(frozen=True)
class SubgroupRule:
    """Threshold predicate over one confounder, e.g. marker_b > 0."""

    feature: str
    op: str  # ">" | ">=" | "<" | "<="
    threshold: float

    def __call__(self, confounders: Mapping[str, float]) -> bool:
        value = confounders[self.feature]
        if self.op == ">":
            return value > self.threshold
        if self.op == ">=":
            return value >= self.threshold
        if self.op == "<":
            return value < self.threshold
        if self.op == "<=":
            return value <= self.threshold
        raise ValueError(f"unknown comparison {self.op!r}")

    def to_json_dict(self) -> dict:
        return {"feature": self.feature, "op": self.op,
                "threshold": self.threshold}


@dataclass(frozen=True)
class SynthConfig:
    n: int
    seed: int
    confounders: tuple[ConfounderSpec, ...]
    treatment_logit_coefs: tuple[float, ...]
    treatment_logit_intercept: float
    baseline_hazard: float  # events per day at covariates 0, untreated
    true_log_hr_treatment: float
    censoring_rate: float  # censoring events per day
    benefit_subgroup_rule: SubgroupRule | Callable | None = None
    subgroup_extra_log_hr: float = 0.0
    missingness_rate: float = 0.0
    unmeasured_confounder_strength: float = 0.0
    drug: str = "drug_x"
    co_drug: str = "co_drug_a"
    departments: tuple[str, ...] = ("d01", "d02", "d03", "d04", "d05", "d06")
    max_followup_days: float = 60.0
    late_dose_fraction: float = 0.0
    with_labs: bool = True

    def __post_init__(self):
        if self.n < 100:
            raise ValueError("cohort size must be at least 100")
        if len(self.treatment_logit_coefs) != len(self.confounders):
            raise ValueError("one treatment logit coefficient per confounder")
        if self.baseline_hazard <= 0 or self.censoring_rate <= 0:
            raise ValueError("hazard rates must be positive")
        if not 0.0 <= self.missingness_rate <= 1.0:
            raise ValueError("missingness_rate outside [0, 1]")
        if not 0.0 <= self.late_dose_fraction <= 1.0:
            raise ValueError("late_dose_fraction outside [0, 1]")

    def to_json_dict(self) -> dict:
        rule = self.benefit_subgroup_rule
        if rule is not None and not isinstance(rule, SubgroupRule):
            raise ValueError("only SubgroupRule predicates are serializable")
        return {
            "n": self.n,
            "seed": self.seed,
            "confounders": [
                {
                    "name": c.name,
                    "dist": c.dist,
                    "params": list(c.params),
                    "hazard_coef": c.hazard_coef,
                }
                for c in self.confounders
            ],
            "treatment_logit_coefs": list(self.treatment_logit_coefs),
            "treatment_logit_intercept": self.treatment_logit_intercept,
            "baseline_hazard": self.baseline_hazard,
            "true_log_hr_treatment": self.true_log_hr_treatment,
            "censoring_rate": self.censoring_rate,
            "benefit_subgroup_rule": None if rule is None else rule.to_json_dict(),
            "subgroup_extra_log_hr": self.subgroup_extra_log_hr,
            "missingness_rate": self.missingness_rate,
            "unmeasured_confounder_strength": self.unmeasured_confounder_strength,
            "drug": self.drug,
            "co_drug": self.co_drug,
            "departments": list(self.departments),
            "max_followup_days": self.max_followup_days,
            "late_dose_fraction": self.late_dose_fraction,
            "with_labs": self.with_labs,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "SynthConfig":
        kwargs = dict(data)
        kwargs["confounders"] = tuple(
            ConfounderSpec(
                name=c["name"],
                dist=c["dist"],
                params=tuple(c["params"]),
                hazard_coef=c.get("hazard_coef", 0.0),
            )
            for c in kwargs.get("confounders", ())
        )
        kwargs["treatment_logit_coefs"] = tuple(kwargs["treatment_logit_coefs"])
        if kwargs.get("benefit_subgroup_rule") is not None:
            kwargs["benefit_subgroup_rule"] = SubgroupRule(
                **kwargs["benefit_subgroup_rule"]
            )
        if "departments" in kwargs:
            kwargs["departments"] = tuple(kwargs["departments"])
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in kwargs.items() if k in known})


@dataclass
class GroundTruth:
    config: SynthConfig
    admission_ids: tuple[str, ...]
    treated: np.ndarray
    excluded: np.ndarray  # dosed beyond the ascertainment window
    in_subgroup: np.ndarray
    propensity: np.ndarray
    hazard: np.ndarray
    event_time_true: np.ndarray
    censor_time: np.ndarray
    event: np.ndarray
    latent_confounder: np.ndarray
    confounder_values: dict[str, np.ndarray]

    def to_json_dict(self) -> dict:
        return {
            "true_log_hr_treatment": self.config.true_log_hr_treatment,
            "subgroup_extra_log_hr": self.config.subgroup_extra_log_hr,
            "unmeasured_confounder_strength": (
                self.config.unmeasured_confounder_strength
            ),
            "baseline_hazard": self.config.baseline_hazard,
            "censoring_rate": self.config.censoring_rate,
            "seed": self.config.seed,
            "admission_ids": list(self.admission_ids),
            "treated": self.treated.astype(int).tolist(),
            "excluded": self.excluded.astype(int).tolist(),
            "in_subgroup": self.in_subgroup.astype(int).tolist(),
            "propensity": self.propensity.tolist(),
            "hazard": self.hazard.tolist(),
            "event": self.event.astype(int).tolist(),
            "confounders": {
                name: values.tolist()
                for name, values in sorted(self.confounder_values.items())
            },
        }

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)


@dataclass
class SynthCohort:
    records: list[AdmissionRecord]
    truth: GroundTruth


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def generate(config: SynthConfig) -> SynthCohort:
    """Draw one cohort; identical config (seed included) gives identical data."""
    rng = np.random.default_rng(config.seed)
    n = config.n
    z = np.column_stack(
        [spec.sample(rng, n) for spec in config.confounders]
    ) if config.confounders else np.zeros((n, 0))
    names = [spec.name for spec in config.confounders]
    latent = rng.standard_normal(n)

    logit = config.treatment_logit_intercept + z @ np.asarray(
        config.treatment_logit_coefs
    )
    logit = logit + config.unmeasured_confounder_strength * latent
    propensity = _sigmoid(logit)
    treated = rng.random(n) < propensity

    if config.benefit_subgroup_rule is not None:
        in_subgroup = np.array(
            [
                bool(config.benefit_subgroup_rule(dict(zip(names, row))))
                for row in z
            ]
        )
        if not in_subgroup.any():
            raise ValueError("benefit subgroup rule selects no admissions")
    else:
        in_subgroup = np.zeros(n, dtype=bool)

    hazard_coefs = np.asarray([spec.hazard_coef for spec in config.confounders])
    log_hazard = (
        math.log(config.baseline_hazard)
        + (z @ hazard_coefs if len(hazard_coefs) else 0.0)
        - config.unmeasured_confounder_strength * latent
        + treated
        * (
            config.true_log_hr_treatment
            + config.subgroup_extra_log_hr * in_subgroup
        )
    )
    hazard = np.exp(log_hazard)
    event_time = rng.exponential(1.0 / hazard)
    censor_time = rng.exponential(1.0 / config.censoring_rate, n)
    observed = np.minimum(
        np.minimum(event_time, censor_time), config.max_followup_days
    )
    event = (event_time <= censor_time) & (event_time <= config.max_followup_days)

    risk = z @ hazard_coefs if len(hazard_coefs) else np.zeros(n)
    risk = risk - config.unmeasured_confounder_strength * latent
    risk_sd = float(risk.std()) or 1.0
    risk_std = (risk - risk.mean()) / risk_sd

    late_dose = treated & (rng.random(n) < config.late_dose_fraction)

    records = []
    for i in range(n):
        records.append(
            _build_record(
                rng,
                config,
                index=i,
                confounders=dict(zip(names, z[i])),
                treated=bool(treated[i]),
                late_dose=bool(late_dose[i]),
                days=max(1, int(math.floor(observed[i])) + 1),
                died=bool(event[i]),
                risk_std=float(risk_std[i]),
            )
        )

    truth = GroundTruth(
        config=config,
        admission_ids=tuple(r.admission_id for r in records),
        treated=treated,
        excluded=late_dose,
        in_subgroup=in_subgroup,
        propensity=propensity,
        hazard=hazard,
        event_time_true=event_time,
        censor_time=censor_time,
        event=event,
        latent_confounder=latent,
        confounder_values={name: z[:, j] for j, name in enumerate(names)},
    )
    return SynthCohort(records=records, truth=truth)


def _series(
    rng: np.random.Generator,
    rate: float,
    entries: list[tuple[int, float]],
) -> list[tuple[int, float]]:
    """Apply completely-at-random dropout to the entries of one channel."""
    if rate <= 0.0:
        return entries
    return [entry for entry in entries if rng.random() >= rate]


def _build_record(
    rng: np.random.Generator,
    config: SynthConfig,
    index: int,
    confounders: dict[str, float],
    treated: bool,
    late_dose: bool,
    days: int,
    died: bool,
    risk_std: float,
) -> AdmissionRecord:
    admission_id = f"a{index:06d}"
    department = config.departments[int(rng.integers(len(config.departments)))]
    if "age" in confounders:
        age = int(np.clip(round(confounders["age"]), 18, 100))
    else:
        age = int(rng.integers(25, 96))
    gender = _GENDERS[int(rng.random() < 0.55)]
    admit = _EPOCH + timedelta(days=int(rng.integers(0, 240)))

    flags = {
        name: bool(rng.random() < rate)
        for name, rate in _COMORBIDITY_RATES.items()
    }

    rate = config.missingness_rate
    series: dict[str, list[tuple[int, float]]] = {}
    for name, value in confounders.items():
        if name == "age":
            continue
        day1 = float(value) + rng.normal(0.0, 0.1)
        series[name] = _series(rng, rate, [(-1, float(value)), (0, day1)])

    sato2 = float(np.clip(97.0 - 2.5 * risk_std + rng.normal(0, 1.2), 70, 99))
    fio2 = 21.0 + max(0.0, 4.0 * risk_std + rng.normal(0, 2.0))
    series["sato2"] = _series(
        rng, rate,
        [(-1, round(sato2, 1)),
         (0, round(float(np.clip(sato2 - 1.0 + rng.normal(0, 1.0), 60, 99)), 1))],
    )
    series["fio2"] = _series(
        rng, rate,
        [(-1, round(fio2, 1)), (0, round(fio2 + max(0.0, rng.normal(2.0, 2.0)), 1))],
    )
    series["temperature"] = _series(
        rng, rate,
        [(-1, round(36.6 + rng.normal(0, 0.5), 1)),
         (0, round(37.0 + 0.15 * risk_std + rng.normal(0, 0.5), 1))],
    )
    series["heart_rate"] = _series(
        rng, rate,
        [(-1, round(88.0 + rng.normal(0, 9.0), 0)),
         (0, round(92.0 + 2.0 * risk_std + rng.normal(0, 9.0), 0))],
    )

    # Oxygen support shapes the severity trajectory but is never a feature.
    needs_oxygen = rng.random() < float(_sigmoid(0.9 * risk_std - 0.2))
    oxygen_days: list[tuple[int, float]] = []
    if needs_oxygen or died:
        last_ward_day = max(0, days - 1)
        flow = 10.0 + rng.uniform(0, 5) if died else rng.uniform(2, 12)
        for day in range(0, last_ward_day + 1):
            oxygen_days.append((day, round(float(flow), 1)))
    if oxygen_days:
        series["oxygen_flow"] = oxygen_days
    icu_days = None
    if died and rng.random() < 0.35:
        icu_days = int(rng.integers(1, min(5, days) + 1))
        series["invasive_vent"] = [
            (day, 1.0) for day in range(max(0, days - icu_days), days)
        ]

    labs: list[LabObservation] = []
    if config.with_labs:
        crp_name = ("c-reactive protein", "c reactive protein")[index % 2]
        crp = math.exp(3.0 + 0.5 * risk_std + rng.normal(0, 0.3))
        for day in (-1, 0):
            if rng.random() >= rate:
                labs.append(
                    LabObservation(
                        raw_name=crp_name, value=round(crp + rng.normal(0, 2), 1),
                        unit="mg/L", day=day,
                    )
                )
        hgb_name = ("hemoglobin", "haemoglobin")[index % 2]
        if rng.random() >= rate:
            labs.append(
                LabObservation(
                    raw_name=hgb_name, value=round(13.5 + rng.normal(0, 1.4), 1),
                    unit="g/dL", day=-1, code="718-7",
                )
            )

    treatments: list[DoseEvent] = []
    if treated:
        if late_dose:
            first_day = int(rng.integers(5, 9))
        else:
            first_day = min(int(rng.integers(0, 5)), days)
        dose = float(100 * rng.integers(1, 4))
        treatments.append(DoseEvent(drug=config.drug, day=first_day, dose=dose))
    if rng.random() < float(_sigmoid(-1.0 + 0.8 * risk_std)):
        treatments.append(DoseEvent(drug=config.co_drug, day=0, dose=50.0))

    if died:
        destination = "address"  # unused: the death day dominates the trajectory
    else:
        roll = rng.random()
        if roll < 0.80:
            destination = "address"
        elif roll < 0.95:
            destination = "home hospitalization"
        else:
            destination = "transfer to acute hospital"

    record = AdmissionRecord(
        admission_id=admission_id,
        patient_id=f"p{index:06d}",
        department=department,
        age=age,
        gender=gender,
        admit_date=admit,
        discharge_date=admit + timedelta(days=days),
        discharge_destination=destination,
        death_in_hospital=died,
        last_followup_day=days,
        death_day=days if died else None,
        icu_days=icu_days,
        comorbidity_flags=flags,
        daily_series=series,
        lab_observations=labs,
        treatments=treatments,
        radiological_covid_flag=bool(rng.random() < 0.8),
        rtpcr_positive_days=[-2],
        covid_coded_diagnosis=True,
    )
    record.validate()
    return record


def null_effect_preset(n: int = 1000, seed: int = 0) -> SynthConfig:
    """No treatment effect, no confounding: assignment is pure chance."""
    confounders = (
        ConfounderSpec("marker_a", "normal", (0.0, 1.0), hazard_coef=0.3),
    )
    return SynthConfig(
        n=n,
        seed=seed,
        confounders=confounders,
        treatment_logit_coefs=(0.0,),
        treatment_logit_intercept=-0.7,
        baseline_hazard=0.012,
        true_log_hr_treatment=0.0,
        censoring_rate=0.02,
    )


def measured_confounding_preset(
    n: int = 2000, seed: int = 0, true_log_hr: float = math.log(0.5)
) -> SynthConfig:
    """Sicker patients are treated more and die faster; fully measured."""
    confounders = (
        ConfounderSpec("frailty", "normal", (0.0, 1.0), hazard_coef=0.8),
        ConfounderSpec("marker_a", "normal", (0.0, 1.0), hazard_coef=0.4),
        ConfounderSpec("marker_b", "normal", (0.0, 1.0), hazard_coef=0.2),
    )
    return SynthConfig(
        n=n,
        seed=seed,
        confounders=confounders,
        treatment_logit_coefs=(0.55, 0.40, 0.35),
        treatment_logit_intercept=-0.8,
        baseline_hazard=0.012,
        true_log_hr_treatment=true_log_hr,
        censoring_rate=0.02,
    )


def unmeasured_confounding_preset(n: int = 1500, seed: int = 0) -> SynthConfig:
    """Null effect masked by a latent factor: resilient patients get treated."""
    confounders = (
        ConfounderSpec("frailty", "normal", (0.0, 1.0), hazard_coef=0.5),
        ConfounderSpec("marker_a", "normal", (0.0, 1.0), hazard_coef=0.0),
    )
    return SynthConfig(
        n=n,
        seed=seed,
        confounders=confounders,
        treatment_logit_coefs=(0.3, 0.0),
        treatment_logit_intercept=-0.8,
        baseline_hazard=0.015,
        true_log_hr_treatment=0.0,
        censoring_rate=0.02,
        unmeasured_confounder_strength=1.2,
    )


def subgroup_benefit_preset(
    n: int = 1500,
    seed: int = 0,
    base_log_hr: float = math.log(1.8),
    subgroup_net_log_hr: float = math.log(0.22),
) -> SynthConfig:
    """Treatment helps where marker_b is positive and harms elsewhere.

    The benefit/harm split gives the response label a class balance near
    one half and a strong within-treated contrast, so the signal is
    learnable from the marker channel; prescribing is still confounded by
    frailty.
    """
    confounders = (
        ConfounderSpec("frailty", "normal", (0.0, 1.0), hazard_coef=0.8),
        ConfounderSpec("marker_b", "normal", (0.0, 1.0), hazard_coef=0.0),
    )
    return SynthConfig(
        n=n,
        seed=seed,
        confounders=confounders,
        treatment_logit_coefs=(1.0, 0.0),
        treatment_logit_intercept=-0.7,
        baseline_hazard=0.02,
        true_log_hr_treatment=base_log_hr,
        censoring_rate=0.015,
        benefit_subgroup_rule=SubgroupRule("marker_b", ">", 0.0),
        subgroup_extra_log_hr=subgroup_net_log_hr - base_log_hr,
    )
