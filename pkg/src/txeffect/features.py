"""Model-input assembly: feature roles, encodings, and the leakage denylist.

Two feature roles exist. The treatment-effect role carries baseline patient
state only; the propensity role additionally carries context that predicts
*prescription* (department, admission date, and first-day doses of every
other tracked drug except the one under study). Daily series contribute
exactly two values each: the pre-admission baseline (day -1) and the first
24 in-hospital hours (day 0, written ``day1`` in feature names). Anything
that encodes the outcome, the discharge, or later hospital course is never
emitted; a missing measurement stays missing (NaN), never zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import derive_charlson
from .labs import LabClusteringResult
from .records import AdmissionRecord

__all__ = [
    "FeatureCatalog",
    "FeatureMatrix",
    "FeatureVector",
    "ROLE_PROPENSITY",
    "ROLE_TE",
    "assemble_features",
    "assert_no_leakage",
]

ROLE_TE = "te_feature"
ROLE_PROPENSITY = "propensity_covariate"
_ROLES = (ROLE_TE, ROLE_PROPENSITY)

# Daily channels that encode hospital course or outcome, never model input.
DENY_CHANNELS = frozenset(
    {
        "who_score",
        "oxygen_flow",
        "high_flow_oxygen",
        "noninvasive_vent",
        "invasive_vent",
        "ecmo",
    }
)

# Name fragments that must never appear in an emitted feature name.
LEAKAGE_TOKENS = (
    "length_of_stay",
    "icu_days",
    "discharge",
    "death",
    "who_score",
    "severity_grade",
    "critical_respiratory",
    "last_followup",
    "survival_10y",
    "oxygen_flow",
    "_vent",
    "ecmo",
    "te_class",
    "improved",
)

_ADMIT_EPOCH = date(2020, 1, 1)
ONE_HOT_MAX_LEVELS = 16


def assert_no_leakage(names: Iterable[str]) -> None:
    offenders = [
        name for name in names if any(token in name for token in LEAKAGE_TOKENS)
    ]
    if offenders:
        raise ValueError(f"leakage-denylisted feature names emitted: {offenders}")


@dataclass(frozen=True)
class FeatureVector:
    names: tuple[str, ...]
    values: np.ndarray  # float64, NaN marks missing
    role: str

    def __post_init__(self):
        if len(self.names) != len(self.values):
            raise ValueError("names and values length mismatch")

    def as_dict(self) -> dict[str, float | None]:
        return {
            name: (None if np.isnan(value) else float(value))
            for name, value in zip(self.names, self.values)
        }


@dataclass(frozen=True)
class FeatureMatrix:
    names: tuple[str, ...]
    values: np.ndarray  # (n, m) float64, NaN marks missing

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> "FeatureMatrix":
        if not vectors:
            raise ValueError("no vectors")
        names = vectors[0].names
        for v in vectors:
            if v.names != names:
                raise ValueError("inconsistent feature names across vectors")
        return cls(names=names, values=np.vstack([v.values for v in vectors]))

    def to_csv(self, path: str | Path, ids: Sequence[str] | None = None) -> None:
        """Write with a header row; missing cells are left empty."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            header = list(self.names)
            if ids is not None:
                header = ["admission_id"] + header
            writer.writerow(header)
            for i, row in enumerate(self.values):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
                if ids is not None:
                    cells = [ids[i]] + cells
                writer.writerow(cells)


class _CategoricalEncoder:
    """One-hot up to a level cap, target-mean ordered above it."""

    def __init__(
        self,
        field: str,
        levels: Sequence[str],
        target_means: Mapping[str, float] | None = None,
    ):
        self.field = field
        levels = sorted(set(levels))
        if len(levels) <= ONE_HOT_MAX_LEVELS:
            self.kind = "one_hot"
            self.levels = tuple(levels)
            self.names = tuple(f"{field}={level}" for level in levels)
            self.rank: dict[str, float] = {}
        else:
            if target_means is None:
                raise ValueError(
                    f"{field}: {len(levels)} levels exceed the one-hot cap; "
                    "training-fold target labels are required"
                )
            self.kind = "target_rank"
            self.levels = tuple(levels)
            self.names = (f"{field}~rank",)
            ordered = sorted(levels, key=lambda lv: (target_means.get(lv, 0.5), lv))
            self.rank = {level: float(i) for i, level in enumerate(ordered)}

    def encode(self, value: str) -> np.ndarray:
        if self.kind == "one_hot":
            out = np.zeros(len(self.levels))
            for i, level in enumerate(self.levels):
                if value == level:
                    out[i] = 1.0
            return out
        return np.array([self.rank.get(value, np.nan)])


class FeatureCatalog:
    """Feature-name vocabulary learned from a cohort.

    The catalog fixes, once per run, the categorical vocabularies, the set
    of daily channels, the canonical lab names, and the tracked drug list,
    so every record maps to an identically shaped vector. Target-mean
    encoding of high-cardinality categoricals (when triggered) must be fit
    with labels from training folds only.
    """

    def __init__(
        self,
        records: Sequence[AdmissionRecord],
        labs: LabClusteringResult | None = None,
        drugs: Sequence[str] = (),
        encoder_labels: Mapping[str, float] | None = None,
    ):
        if not records:
            raise ValueError("cannot build a feature catalog from no records")
        genders = sorted({r.gender for r in records})
        departments = sorted({r.department for r in records})
        self.flag_names = tuple(
            sorted({name for r in records for name in r.comorbidity_flags})
        )
        self.channel_names = tuple(
            sorted(
                {
                    name
                    for r in records
                    for name in r.daily_series
                    if name not in DENY_CHANNELS
                }
            )
        )
        self._lab_map = labs.canonical_map() if labs is not None else {}
        lab_names = {
            self._lab_map.get(o.raw_name, o.raw_name)
            for r in records
            for o in r.lab_observations
        }
        self.lab_names = tuple(sorted(lab_names))
        observed_drugs = {t.drug for r in records for t in r.treatments}
        self.drugs = tuple(sorted(set(drugs) | observed_drugs))

        self._gender = _CategoricalEncoder(
            "gender", genders, _means_by_level(records, "gender", encoder_labels)
        )
        self._department = _CategoricalEncoder(
            "department",
            departments,
            _means_by_level(records, "department", encoder_labels),
        )

        base = ["age"]
        base += list(self._gender.names)
        base += [f"cm:{name}" for name in self.flag_names]
        base += ["charlson_index", "radiological_covid"]
        for channel in self.channel_names:
            base += [f"{channel}@basal", f"{channel}@day1"]
        for lab in self.lab_names:
            base += [f"lab:{lab}@basal", f"lab:{lab}@day1"]
        self._te_names = tuple(base)

        context = list(self._department.names) + ["admit_day_offset"]
        self._prop_extra = tuple(context)
        assert_no_leakage(self._te_names + self._prop_extra)

    def names(self, role: str, drug: str | None = None) -> tuple[str, ...]:
        if role == ROLE_TE:
            return self._te_names
        if role == ROLE_PROPENSITY:
            rx = tuple(f"rx:{d}@day1" for d in self.drugs if d != drug)
            return self._te_names + self._prop_extra + rx
        raise ValueError(f"unknown feature role {role!r}")

    def feature_roles(self, name: str) -> frozenset[str]:
        roles = set()
        if name in self._te_names:
            roles.update(_ROLES)
        elif name in self._prop_extra or name.startswith("rx:"):
            roles.add(ROLE_PROPENSITY)
        return frozenset(roles)

    def vector(
        self, record: AdmissionRecord, role: str, drug: str | None = None
    ) -> FeatureVector:
        names = self.names(role, drug)
        values: list[float] = [float(record.age)]
        values.extend(self._gender.encode(record.gender))
        for flag in self.flag_names:
            values.append(float(record.comorbidity_flags.get(flag, False)))
        values.append(float(derive_charlson(record)[0]))
        values.append(float(record.radiological_covid_flag))
        for channel in self.channel_names:
            values.append(_or_nan(record.series_value(channel, -1)))
            values.append(_or_nan(record.series_value(channel, 0)))
        lab_values = self._lab_day_values(record)
        for lab in self.lab_names:
            basal, day1 = lab_values.get(lab, (np.nan, np.nan))
            values.append(basal)
            values.append(day1)
        if role == ROLE_PROPENSITY:
            values.extend(self._department.encode(record.department))
            values.append(float((record.admit_date - _ADMIT_EPOCH).days))
            doses = _first_day_doses(record)
            for other in self.drugs:
                if other != drug:
                    values.append(doses.get(other, 0.0))
        return FeatureVector(names=names, values=np.asarray(values, float), role=role)

    def matrix(
        self, records: Sequence[AdmissionRecord], role: str, drug: str | None = None
    ) -> FeatureMatrix:
        return FeatureMatrix.from_vectors(
            [self.vector(r, role, drug) for r in records]
        )

    def _lab_day_values(
        self, record: AdmissionRecord
    ) -> dict[str, tuple[float, float]]:
        buckets: dict[str, dict[str, list[float]]] = {}
        for obs in record.lab_observations:
            canonical = self._lab_map.get(obs.raw_name, obs.raw_name)
            slot = "basal" if obs.day <= -1 else "day1" if obs.day == 0 else None
            if slot is None:
                continue
            buckets.setdefault(canonical, {"basal": [], "day1": []})[slot].append(
                obs.value
            )
        return {
            lab: (
                float(np.mean(vals["basal"])) if vals["basal"] else np.nan,
                float(np.mean(vals["day1"])) if vals["day1"] else np.nan,
            )
            for lab, vals in buckets.items()
        }


def _or_nan(value: float | None) -> float:
    return np.nan if value is None else float(value)


def _first_day_doses(record: AdmissionRecord) -> dict[str, float]:
    doses: dict[str, float] = {}
    for event in record.treatments:
        if event.day == 0:
            doses[event.drug] = doses.get(event.drug, 0.0) + event.dose
    return doses


def _means_by_level(
    records: Sequence[AdmissionRecord],
    field: str,
    labels: Mapping[str, float] | None,
) -> dict[str, float] | None:
    """Per-level mean label for target encoding; None without labels."""
    if labels is None:
        return None
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for record in records:
        if record.admission_id not in labels:
            continue
        level = getattr(record, field)
        sums[level] = sums.get(level, 0.0) + labels[record.admission_id]
        counts[level] = counts.get(level, 0) + 1
    return {level: sums[level] / counts[level] for level in sums}


def assemble_features(
    record: AdmissionRecord,
    role: str,
    drug: str | None = None,
    catalog: FeatureCatalog | None = None,
) -> FeatureVector:
    """Single-record convenience wrapper around :class:`FeatureCatalog`."""
    if role not in _ROLES:
        raise ValueError(f"unknown feature role {role!r}")
    if catalog is None:
        catalog = FeatureCatalog([record], drugs=[drug] if drug else ())
    return catalog.vector(record, role, drug)
