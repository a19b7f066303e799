"""Admission-level data model and cohort file IO.

One :class:`AdmissionRecord` describes a single hospitalization. Daily
clinical values are indexed from the pre-admission baseline (day -1)
through the day of discharge; day 0 covers the first 24 in-hospital hours
and the last valid index equals the length of stay in days.

Cohorts are exchanged as JSON-Lines (one record per line) or as a wide
CSV. Column conventions for the CSV form:

* scalar fields use their plain names; empty cells mean absent,
* ``cm:<flag>`` columns carry comorbidity booleans (0/1),
* ``<channel>@<day>`` columns carry daily-series values,
* ``lab:<raw name>[<unit>]@<day>`` columns carry laboratory values,
* ``rx:<drug>@<day>`` columns carry administered doses,
* ``rtpcr_positive_days`` is a space-separated list of day indices.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Iterator

__all__ = [
    "AdmissionRecord",
    "DoseEvent",
    "LabObservation",
    "read_cohort",
    "read_cohort_csv",
    "read_jsonl",
    "record_from_dict",
    "record_to_dict",
    "write_cohort_csv",
    "write_jsonl",
]


@dataclass(frozen=True)
class LabObservation:
    """A single raw laboratory measurement, possibly carrying a standard code."""

    raw_name: str
    value: float
    unit: str
    day: int
    code: str | None = None


@dataclass(frozen=True)
class DoseEvent:
    """One drug administration: day index from admission and dose given."""

    drug: str
    day: int
    dose: float


@dataclass
class AdmissionRecord:
    admission_id: str
    patient_id: str
    department: str
    age: int
    gender: str
    admit_date: date
    discharge_date: date
    discharge_destination: str
    death_in_hospital: bool
    last_followup_day: int
    death_day: int | None = None
    icu_days: int | None = None
    comorbidity_flags: dict[str, bool] = field(default_factory=dict)
    daily_series: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    lab_observations: list[LabObservation] = field(default_factory=list)
    treatments: list[DoseEvent] = field(default_factory=list)
    radiological_covid_flag: bool = False
    rtpcr_positive_days: list[int] = field(default_factory=list)
    covid_coded_diagnosis: bool = False

    def length_of_stay(self) -> int:
        """Whole days between admission and discharge."""
        return (self.discharge_date - self.admit_date).days

    def series_value(self, channel: str, day: int) -> float | None:
        """Value of a daily series on one day; mean if several, None if absent."""
        entries = [v for d, v in self.daily_series.get(channel, ()) if d == day]
        if not entries:
            return None
        return float(sum(entries)) / len(entries)

    def day_flag(self, channel: str, day: int) -> bool:
        """True when a daily series has a positive value on the given day."""
        value = self.series_value(channel, day)
        return value is not None and value > 0

    def validate(self) -> None:
        """Raise ValueError on the first violated structural invariant."""
        los = self.length_of_stay()
        if los < 0:
            raise ValueError(
                f"{self.admission_id}: discharge_date precedes admit_date"
            )
        if self.age < 0:
            raise ValueError(f"{self.admission_id}: negative age")
        if self.last_followup_day < 0:
            raise ValueError(f"{self.admission_id}: negative last_followup_day")
        if self.death_day is not None and self.death_day > self.last_followup_day:
            raise ValueError(
                f"{self.admission_id}: death_day beyond last_followup_day"
            )
        if self.death_in_hospital and self.death_day is None:
            raise ValueError(
                f"{self.admission_id}: death_in_hospital without death_day"
            )
        if self.icu_days is not None and self.icu_days < 0:
            raise ValueError(f"{self.admission_id}: negative icu_days")
        for channel, entries in self.daily_series.items():
            for day, value in entries:
                if day < -1 or day > los:
                    raise ValueError(
                        f"{self.admission_id}: day {day} of series {channel!r} "
                        f"outside [-1, {los}]"
                    )
                if not math.isfinite(value):
                    raise ValueError(
                        f"{self.admission_id}: non-finite value in series "
                        f"{channel!r} on day {day}"
                    )
        for obs in self.lab_observations:
            if not math.isfinite(obs.value):
                raise ValueError(
                    f"{self.admission_id}: non-finite lab value for {obs.raw_name!r}"
                )
            if not obs.unit:
                raise ValueError(
                    f"{self.admission_id}: lab {obs.raw_name!r} has a value "
                    "but no unit"
                )
        for event in self.treatments:
            if event.dose < 0:
                raise ValueError(
                    f"{self.admission_id}: negative dose of {event.drug}"
                )


def record_to_dict(record: AdmissionRecord) -> dict:
    return {
        "admission_id": record.admission_id,
        "patient_id": record.patient_id,
        "department": record.department,
        "age": record.age,
        "gender": record.gender,
        "admit_date": record.admit_date.isoformat(),
        "discharge_date": record.discharge_date.isoformat(),
        "discharge_destination": record.discharge_destination,
        "death_in_hospital": record.death_in_hospital,
        "last_followup_day": record.last_followup_day,
        "death_day": record.death_day,
        "icu_days": record.icu_days,
        "comorbidity_flags": dict(sorted(record.comorbidity_flags.items())),
        "daily_series": {
            name: [[day, value] for day, value in entries]
            for name, entries in sorted(record.daily_series.items())
        },
        "lab_observations": [
            {
                "raw_name": o.raw_name,
                "code": o.code,
                "value": o.value,
                "unit": o.unit,
                "day": o.day,
            }
            for o in record.lab_observations
        ],
        "treatments": [
            {"drug": t.drug, "day": t.day, "dose": t.dose}
            for t in record.treatments
        ],
        "radiological_covid_flag": record.radiological_covid_flag,
        "rtpcr_positive_days": list(record.rtpcr_positive_days),
        "covid_coded_diagnosis": record.covid_coded_diagnosis,
    }


def record_from_dict(data: dict) -> AdmissionRecord:
    return AdmissionRecord(
        admission_id=str(data["admission_id"]),
        patient_id=str(data["patient_id"]),
        department=str(data["department"]),
        age=int(data["age"]),
        gender=str(data["gender"]),
        admit_date=date.fromisoformat(data["admit_date"]),
        discharge_date=date.fromisoformat(data["discharge_date"]),
        discharge_destination=str(data["discharge_destination"]),
        death_in_hospital=bool(data["death_in_hospital"]),
        last_followup_day=int(data["last_followup_day"]),
        death_day=None if data.get("death_day") is None else int(data["death_day"]),
        icu_days=None if data.get("icu_days") is None else int(data["icu_days"]),
        comorbidity_flags={
            str(k): bool(v) for k, v in data.get("comorbidity_flags", {}).items()
        },
        daily_series={
            str(name): [(int(day), float(value)) for day, value in entries]
            for name, entries in data.get("daily_series", {}).items()
        },
        lab_observations=[
            LabObservation(
                raw_name=str(o["raw_name"]),
                code=None if o.get("code") is None else str(o["code"]),
                value=float(o["value"]),
                unit=str(o["unit"]),
                day=int(o["day"]),
            )
            for o in data.get("lab_observations", [])
        ],
        treatments=[
            DoseEvent(drug=str(t["drug"]), day=int(t["day"]), dose=float(t["dose"]))
            for t in data.get("treatments", [])
        ],
        radiological_covid_flag=bool(data.get("radiological_covid_flag", False)),
        rtpcr_positive_days=[int(d) for d in data.get("rtpcr_positive_days", [])],
        covid_coded_diagnosis=bool(data.get("covid_coded_diagnosis", False)),
    )


def write_jsonl(records: Iterable[AdmissionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record), sort_keys=True))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[AdmissionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_dict(json.loads(line)))
    return records


_SCALAR_COLUMNS = (
    "admission_id",
    "patient_id",
    "department",
    "age",
    "gender",
    "admit_date",
    "discharge_date",
    "discharge_destination",
    "death_in_hospital",
    "last_followup_day",
    "death_day",
    "icu_days",
    "radiological_covid_flag",
    "covid_coded_diagnosis",
    "rtpcr_positive_days",
)

_LAB_COLUMN = re.compile(r"^lab:(?P<name>.+)\[(?P<unit>[^\[\]]*)\]@(?P<day>-?\d+)$")
_SERIES_COLUMN = re.compile(r"^(?P<name>[^@:]+)@(?P<day>-?\d+)$")
_RX_COLUMN = re.compile(r"^rx:(?P<drug>.+)@(?P<day>-?\d+)$")


def _parse_bool(text: str) -> bool:
    return text.strip().lower() in {"1", "true", "yes"}


def write_cohort_csv(records: list[AdmissionRecord], path: str | Path) -> None:
    """Wide one-row-per-admission CSV; lab codes are not representable here."""
    flags: set[str] = set()
    series: set[tuple[str, int]] = set()
    labs: set[tuple[str, str, int]] = set()
    doses: set[tuple[str, int]] = set()
    for record in records:
        flags.update(record.comorbidity_flags)
        for name, entries in record.daily_series.items():
            series.update((name, day) for day, _ in entries)
        labs.update((o.raw_name, o.unit, o.day) for o in record.lab_observations)
        doses.update((t.drug, t.day) for t in record.treatments)

    columns = list(_SCALAR_COLUMNS)
    columns += [f"cm:{name}" for name in sorted(flags)]
    columns += [f"{name}@{day}" for name, day in sorted(series)]
    columns += [f"lab:{name}[{unit}]@{day}" for name, unit, day in sorted(labs)]
    columns += [f"rx:{drug}@{day}" for drug, day in sorted(doses)]

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for record in records:
            row: dict[str, object] = {
                "admission_id": record.admission_id,
                "patient_id": record.patient_id,
                "department": record.department,
                "age": record.age,
                "gender": record.gender,
                "admit_date": record.admit_date.isoformat(),
                "discharge_date": record.discharge_date.isoformat(),
                "discharge_destination": record.discharge_destination,
                "death_in_hospital": int(record.death_in_hospital),
                "last_followup_day": record.last_followup_day,
                "death_day": "" if record.death_day is None else record.death_day,
                "icu_days": "" if record.icu_days is None else record.icu_days,
                "radiological_covid_flag": int(record.radiological_covid_flag),
                "covid_coded_diagnosis": int(record.covid_coded_diagnosis),
                "rtpcr_positive_days": " ".join(
                    str(d) for d in record.rtpcr_positive_days
                ),
            }
            for name, value in record.comorbidity_flags.items():
                row[f"cm:{name}"] = int(value)
            for name, entries in record.daily_series.items():
                for day, value in entries:
                    row[f"{name}@{day}"] = repr(value)
            for obs in record.lab_observations:
                row[f"lab:{obs.raw_name}[{obs.unit}]@{obs.day}"] = repr(obs.value)
            for event in record.treatments:
                row[f"rx:{event.drug}@{event.day}"] = repr(event.dose)
            writer.writerow(row)


def read_cohort_csv(path: str | Path) -> list[AdmissionRecord]:
    records = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(_record_from_csv_row(row))
    return records


def _record_from_csv_row(row: dict[str, str]) -> AdmissionRecord:
    record = AdmissionRecord(
        admission_id=row["admission_id"],
        patient_id=row["patient_id"],
        department=row["department"],
        age=int(row["age"]),
        gender=row["gender"],
        admit_date=date.fromisoformat(row["admit_date"]),
        discharge_date=date.fromisoformat(row["discharge_date"]),
        discharge_destination=row["discharge_destination"],
        death_in_hospital=_parse_bool(row["death_in_hospital"]),
        last_followup_day=int(row["last_followup_day"]),
        death_day=int(row["death_day"]) if row.get("death_day") else None,
        icu_days=int(row["icu_days"]) if row.get("icu_days") else None,
        radiological_covid_flag=_parse_bool(row["radiological_covid_flag"]),
        covid_coded_diagnosis=_parse_bool(row["covid_coded_diagnosis"]),
        rtpcr_positive_days=[
            int(d) for d in row.get("rtpcr_positive_days", "").split()
        ],
    )
    for column, cell in row.items():
        if column in _SCALAR_COLUMNS or cell is None or cell == "":
            continue
        if column.startswith("cm:"):
            record.comorbidity_flags[column[3:]] = _parse_bool(cell)
            continue
        lab = _LAB_COLUMN.match(column)
        if lab:
            record.lab_observations.append(
                LabObservation(
                    raw_name=lab["name"],
                    unit=lab["unit"],
                    day=int(lab["day"]),
                    value=float(cell),
                )
            )
            continue
        rx = _RX_COLUMN.match(column)
        if rx:
            record.treatments.append(
                DoseEvent(drug=rx["drug"], day=int(rx["day"]), dose=float(cell))
            )
            continue
        plain = _SERIES_COLUMN.match(column)
        if plain:
            record.daily_series.setdefault(plain["name"], []).append(
                (int(plain["day"]), float(cell))
            )
            continue
        raise ValueError(f"unrecognized CSV column {column!r}")
    for entries in record.daily_series.values():
        entries.sort()
    record.lab_observations.sort(key=lambda o: (o.raw_name, o.day))
    record.treatments.sort(key=lambda t: (t.drug, t.day))
    return record


def read_cohort(path: str | Path) -> list[AdmissionRecord]:
    """Read a cohort file; format chosen by extension (.jsonl/.json or .csv)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_cohort_csv(path)
    return read_jsonl(path)
