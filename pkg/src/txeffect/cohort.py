"""Cohort selection, composite clinical scores, and treatment/outcome labels.

Selection keeps admissions with a positive RT-PCR within three weeks before
admission up to discharge, a coded or radiological COVID finding, and a stay
extending beyond the emergency ward. Daily WHO-style severity scores, the
critical-respiratory flag, the 1-5 severity grade, and the Charlson index
are derived per admission; treatment status and the binary treatment-effect
label follow from the dosing window and the final WHO score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .records import AdmissionRecord

__all__ = [
    "CompositeVariables",
    "CohortSplit",
    "OutcomeLabel",
    "TreatmentAssignment",
    "ascertain_treatment",
    "derive_charlson",
    "derive_composites",
    "derive_critical_respiratory",
    "derive_severity_grade",
    "derive_who_daily",
    "discharge_who_score",
    "label_outcome",
    "select_covid_admissions",
    "split_cohort",
]

# Discharge-destination surrogates for the final-day score. Matching is
# case-insensitive on the full string; unknown destinations are a hard error.
DISCHARGE_SCORE_3 = frozenset(
    {
        "transfer to acute hospital",
        "transfer to another hospital",
        "transfer to another acute hospital",
    }
)
DISCHARGE_SCORE_2 = frozenset(
    {
        "transfer of residence or assisted socio-sanitary center",
        "residence or socio-sanitary center",
        "medium and long stay hospital",
        "home hospitalization unit",
        "medium long stay hospital transfer",
        "home care",
        "home hospitalization",
    }
)
DISCHARGE_SCORE_1 = frozenset(
    {
        "primary care team",
        "outpatient consultations",
        "address",
        "day hospital",
        "specialty center",
        "voluntary discharge",
        "escaped",
        "general practitioner",
        "midwife",
        "mental health unit",
    }
)

# Oxygen flow at or above this rate marks critical respiratory illness.
CRITICAL_FLOW_LMIN = 10.0
# FiO2 above room air implies supplemental oxygen.
ROOM_AIR_FIO2 = 21.0
# First systemic dose must fall within this many days of admission.
TREATMENT_WINDOW_DAYS = 4

VENTILATION_CHANNELS = ("noninvasive_vent", "invasive_vent", "ecmo")

CHARLSON_CONDITION_WEIGHTS = {
    "diabetes_type1": 1,
    "diabetes_type2": 1,
    "heart_chronic": 1,
    "respiratory_chronic": 1,
    "liver_chronic": 1,
    "renal_chronic": 2,
    "active_malignancy": 2,
    "immunocompromised": 2,
    # tracked risk factors that do not score
    "high_blood_pressure": 0,
    "lipidemias": 0,
    "tobacco_use": 0,
}


@dataclass(frozen=True)
class CompositeVariables:
    who_daily: tuple[int, ...]
    critical_respiratory_illness: bool
    severity_grade: int
    charlson_index: int
    charlson_10y_survival: float


@dataclass(frozen=True)
class TreatmentAssignment:
    drug: str
    status: str  # "treated" | "untreated" | "excluded"
    first_dose_day: int | None


@dataclass(frozen=True)
class OutcomeLabel:
    improved: bool
    te_class: str  # "positive" | "negative"


@dataclass(frozen=True)
class CohortSplit:
    train: list[AdmissionRecord]
    valid: list[AdmissionRecord]
    test: list[AdmissionRecord]


def select_covid_admissions(records: list[AdmissionRecord]) -> list[AdmissionRecord]:
    """Keep admissions that satisfy all selection criteria, order preserved."""
    return [r for r in records if _is_covid_admission(r)]


def _is_covid_admission(record: AdmissionRecord) -> bool:
    los = record.length_of_stay()
    has_positive_test = any(-21 <= day <= los for day in record.rtpcr_positive_days)
    has_covid_evidence = record.covid_coded_diagnosis or record.radiological_covid_flag
    beyond_emergency = los >= 1
    return has_positive_test and has_covid_evidence and beyond_emergency


def discharge_who_score(destination: str) -> int:
    key = destination.strip().lower()
    if key in DISCHARGE_SCORE_3:
        return 3
    if key in DISCHARGE_SCORE_2:
        return 2
    if key in DISCHARGE_SCORE_1:
        return 1
    raise ValueError(f"unknown discharge destination {destination!r}")


def _daily_severity_score(record: AdmissionRecord, day: int) -> int:
    """In-hospital score for one day: worst criterion met wins."""
    if record.day_flag("invasive_vent", day) or record.day_flag("ecmo", day):
        return 6
    if record.day_flag("high_flow_oxygen", day) or record.day_flag(
        "noninvasive_vent", day
    ):
        return 5
    flow = record.series_value("oxygen_flow", day)
    fio2 = record.series_value("fio2", day)
    if (flow is not None and flow > 0) or (fio2 is not None and fio2 > ROOM_AIR_FIO2):
        return 4
    return 3


def derive_who_daily(record: AdmissionRecord) -> np.ndarray:
    """One ordinal score per day from admission (day 0) to discharge day."""
    los = record.length_of_stay()
    death_day = record.death_day if record.death_in_hospital else None
    scores = np.empty(los + 1, dtype=np.int64)
    for day in range(los + 1):
        if death_day is not None and day >= death_day:
            scores[day] = 7
        elif day == los:
            scores[day] = discharge_who_score(record.discharge_destination)
        else:
            scores[day] = _daily_severity_score(record, day)
    return scores


def derive_critical_respiratory(record: AdmissionRecord) -> bool:
    if record.death_in_hospital:
        return True
    los = record.length_of_stay()
    for day in range(-1, los + 1):
        flow = record.series_value("oxygen_flow", day)
        if flow is not None and flow >= CRITICAL_FLOW_LMIN:
            return True
        if record.day_flag("high_flow_oxygen", day):
            return True
        if record.day_flag("noninvasive_vent", day):
            return True
        if record.day_flag("invasive_vent", day):
            return True
        if record.day_flag("ecmo", day):
            return True
    return False


def _ever_ventilated(record: AdmissionRecord) -> bool:
    return any(
        any(value > 0 for _, value in record.daily_series.get(channel, ()))
        for channel in VENTILATION_CHANNELS
    )


def derive_severity_grade(record: AdmissionRecord) -> int:
    if record.death_in_hospital:
        return 5
    icu = record.icu_days is not None and record.icu_days > 0
    if icu or _ever_ventilated(record):
        return 4
    los = record.length_of_stay()
    if los > 5:
        return 3
    if los >= 1:
        return 2
    return 1


def _charlson_age_points(age: int) -> int:
    if age < 50:
        return 0
    return min(4, 1 + (age - 50) // 10)


def derive_charlson(record: AdmissionRecord) -> tuple[int, float]:
    """Comorbidity index (0-24) and the matching expected 10-year survival %."""
    weight_sum = sum(
        CHARLSON_CONDITION_WEIGHTS.get(name, 0)
        for name, present in record.comorbidity_flags.items()
        if present
    )
    index = min(24, weight_sum + _charlson_age_points(record.age))
    survival = 100.0 * 0.983 ** math.exp(0.9 * index)
    return index, survival


def derive_composites(record: AdmissionRecord) -> CompositeVariables:
    index, survival = derive_charlson(record)
    return CompositeVariables(
        who_daily=tuple(int(v) for v in derive_who_daily(record)),
        critical_respiratory_illness=derive_critical_respiratory(record),
        severity_grade=derive_severity_grade(record),
        charlson_index=index,
        charlson_10y_survival=survival,
    )


def ascertain_treatment(record: AdmissionRecord, drug: str) -> TreatmentAssignment:
    dose_days = sorted(
        event.day
        for event in record.treatments
        if event.drug == drug and event.dose > 0
    )
    if not dose_days:
        return TreatmentAssignment(drug=drug, status="untreated", first_dose_day=None)
    first = dose_days[0]
    if first < 0:
        raise ValueError(
            f"{record.admission_id}: pre-admission dosing of {drug} "
            f"(day {first}) is not modeled"
        )
    status = "treated" if first <= TREATMENT_WINDOW_DAYS else "excluded"
    return TreatmentAssignment(drug=drug, status=status, first_dose_day=first)


def label_outcome(
    record: AdmissionRecord,
    assignment: TreatmentAssignment,
    who_daily: np.ndarray | tuple[int, ...] | None = None,
) -> OutcomeLabel:
    if assignment.status == "excluded":
        raise ValueError(
            f"{record.admission_id}: excluded admissions must be filtered "
            "before outcome labeling"
        )
    who = derive_who_daily(record) if who_daily is None else np.asarray(who_daily)
    if who.size == 0:
        raise ValueError(f"{record.admission_id}: empty severity trajectory")
    improved = bool(who[-1] < 4)
    treated = assignment.status == "treated"
    te_class = "positive" if improved == treated else "negative"
    return OutcomeLabel(improved=improved, te_class=te_class)


def split_cohort(
    records: list[AdmissionRecord],
    held_out_departments: set[str] | frozenset[str] | list[str],
    ratio: float = 0.8,
    seed: int = 0,
) -> CohortSplit:
    """Department-held-out test set plus a seeded train/validation split."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio {ratio} outside (0, 1)")
    held = set(held_out_departments)
    test = [r for r in records if r.department in held]
    rest = [r for r in records if r.department not in held]
    order = np.random.default_rng(seed).permutation(len(rest))
    n_train = int(round(ratio * len(rest)))
    train = [rest[i] for i in order[:n_train]]
    valid = [rest[i] for i in order[n_train:]]
    return CohortSplit(train=train, valid=valid, test=test)
