"""Weighted Kaplan-Meier curves and Cox proportional-hazards fits.

The Cox partial likelihood uses Breslow handling of tied event times and
is maximized by Newton-Raphson with step halving. With non-unit case
weights the reported standard errors switch to the robust sandwich
estimator built from per-subject score residuals, the standard choice for
weighted pseudo-populations. A coefficient path running away (|beta| above
20) is reported as non-convergence with a complete-separation note rather
than as an exception.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

__all__ = [
    "CoxFit",
    "KmCurve",
    "SurvivalCell",
    "SurvivalTable",
    "WeightedSurvivalRecord",
    "analyze_treatment",
    "cox_loglik",
    "fit_cox",
    "km_by_arm",
    "km_curve",
]

MAX_ABS_COEFFICIENT = 20.0
MAX_ITERATIONS = 50
CONVERGENCE_TOL = 1e-9
SUBGROUPS = ("full", "supplemental_oxygen", "ml_indicated", "ml_non_indicated")


@dataclass(frozen=True)
class WeightedSurvivalRecord:
    time: float
    event: bool
    treated: bool
    weight: float = 1.0
    covariates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValueError(f"survival time must be finite and positive: {self.time}")
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise ValueError(f"weight must be finite and positive: {self.weight}")


@dataclass
class KmCurve:
    """Step survival function: S(t) jumps at event times, starts at S(0)=1."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray  # weighted mass at risk just before each event time
    events: np.ndarray  # weighted event mass at each event time
    n: int

    def survival_at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])

    def steps(self) -> list[tuple[float, float]]:
        return [(0.0, 1.0)] + [
            (float(t), float(s)) for t, s in zip(self.times, self.survival)
        ]


def km_curve(records: Sequence[WeightedSurvivalRecord]) -> KmCurve:
    """Weighted product-limit estimator over one group of subjects."""
    if not records:
        raise ValueError("cannot estimate a survival curve from no records")
    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records], dtype=bool)
    weights = np.array([r.weight for r in records])
    event_times = np.unique(times[events])
    survival = []
    at_risk = []
    event_mass = []
    s = 1.0
    for t in event_times:
        risk = float(weights[times >= t].sum())
        dead = float(weights[events & (times == t)].sum())
        s *= 1.0 - dead / risk
        survival.append(s)
        at_risk.append(risk)
        event_mass.append(dead)
    return KmCurve(
        times=event_times,
        survival=np.asarray(survival),
        at_risk=np.asarray(at_risk),
        events=np.asarray(event_mass),
        n=len(records),
    )


def km_by_arm(records: Sequence[WeightedSurvivalRecord]) -> dict[bool, KmCurve]:
    out = {}
    for arm in (True, False):
        group = [r for r in records if r.treated == arm]
        if group:
            out[arm] = km_curve(group)
    return out


def cox_loglik(
    x: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    weights: np.ndarray,
    beta: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Breslow weighted log partial likelihood, score vector, and Hessian."""
    n, p = x.shape
    eta = x @ beta
    r = weights * np.exp(eta)
    order = np.argsort(-times, kind="mergesort")
    loglik = 0.0
    score = np.zeros(p)
    hessian = np.zeros((p, p))
    s0 = 0.0
    s1 = np.zeros(p)
    s2 = np.zeros((p, p))
    i = 0
    while i < n:
        t = times[order[i]]
        # absorb the whole risk-set slice tied at this time
        j = i
        while j < n and times[order[j]] == t:
            idx = order[j]
            s0 += r[idx]
            s1 += r[idx] * x[idx]
            s2 += r[idx] * np.outer(x[idx], x[idx])
            j += 1
        event_rows = [order[k] for k in range(i, j) if events[order[k]]]
        if event_rows:
            dw = float(weights[event_rows].sum())
            loglik += float(weights[event_rows] @ eta[event_rows]) - dw * math.log(s0)
            xbar = s1 / s0
            score += weights[event_rows] @ x[event_rows] - dw * xbar
            hessian -= dw * (s2 / s0 - np.outer(xbar, xbar))
        i = j
    return loglik, score, hessian


def _score_residuals(
    x: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    weights: np.ndarray,
    beta: np.ndarray,
) -> np.ndarray:
    """Per-subject score contributions U_i; sum(w_i * U_i) equals the score."""
    n, p = x.shape
    eta = x @ beta
    r = weights * np.exp(eta)
    event_times = np.unique(times[events])
    k = len(event_times)
    base_increment = np.zeros(k)  # dw / S0 at each event time
    xbar = np.zeros((k, p))
    for idx, t in enumerate(event_times):
        in_risk = times >= t
        s0 = float(r[in_risk].sum())
        s1 = r[in_risk] @ x[in_risk]
        dw = float(weights[events & (times == t)].sum())
        base_increment[idx] = dw / s0
        xbar[idx] = s1 / s0
    cum_increment = np.cumsum(base_increment)
    cum_xbar_increment = np.cumsum(xbar * base_increment[:, None], axis=0)

    residuals = np.zeros((n, p))
    last_event = np.searchsorted(event_times, times, side="right") - 1
    own_event = np.searchsorted(event_times, times)
    for i in range(n):
        li = last_event[i]
        if li >= 0:
            a = cum_increment[li]
            b = cum_xbar_increment[li]
            residuals[i] -= math.exp(eta[i]) * (x[i] * a - b)
        if events[i]:
            residuals[i] += x[i] - xbar[own_event[i]]
    return residuals


@dataclass
class CoxFit:
    names: tuple[str, ...]
    coefficients: np.ndarray
    hazard_ratios: np.ndarray
    standard_errors: np.ndarray
    wald_z: np.ndarray
    p_values: np.ndarray
    ci_95: tuple[tuple[float, float], ...]
    log_partial_likelihood: float
    converged: bool
    n: int
    n_events: int
    robust: bool
    dropped_columns: tuple[str, ...] = ()
    n_dropped_missing: int = 0
    note: str | None = None

    def _index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no coefficient named {name!r}") from None

    def coefficient(self, name: str = "treated") -> float:
        return float(self.coefficients[self._index(name)])

    def hazard_ratio(self, name: str = "treated") -> float:
        return float(self.hazard_ratios[self._index(name)])

    def p_value(self, name: str = "treated") -> float:
        return float(self.p_values[self._index(name)])

    def ci(self, name: str = "treated") -> tuple[float, float]:
        return self.ci_95[self._index(name)]

    def to_json_dict(self) -> dict:
        return {
            "names": list(self.names),
            "coefficients": self.coefficients.tolist(),
            "hazard_ratios": self.hazard_ratios.tolist(),
            "standard_errors": self.standard_errors.tolist(),
            "wald_z": self.wald_z.tolist(),
            "p_values": self.p_values.tolist(),
            "ci_95": [list(ci) for ci in self.ci_95],
            "log_partial_likelihood": self.log_partial_likelihood,
            "converged": self.converged,
            "n": self.n,
            "n_events": self.n_events,
            "robust": self.robust,
            "dropped_columns": list(self.dropped_columns),
            "n_dropped_missing": self.n_dropped_missing,
            "note": self.note,
        }


def _design_matrix(
    records: Sequence[WeightedSurvivalRecord], include_covariates: bool
) -> tuple[np.ndarray, tuple[str, ...], np.ndarray, int]:
    """Design matrix, its column names, a row keep-mask, and the drop count."""
    names: list[str] = ["treated"]
    if include_covariates:
        names += sorted({k for r in records for k in r.covariates})
    design = np.empty((len(records), len(names)))
    for i, record in enumerate(records):
        design[i, 0] = float(record.treated)
        for j, name in enumerate(names[1:], start=1):
            design[i, j] = record.covariates.get(name, np.nan)
    keep = ~np.isnan(design).any(axis=1)
    return design, tuple(names), keep, int((~keep).sum())


def fit_cox(
    records: Sequence[WeightedSurvivalRecord],
    include_covariates: bool = True,
    use_weights: bool = True,
) -> CoxFit:
    """Maximize the weighted Breslow partial likelihood over the records.

    Rows with a missing adjustment covariate are dropped (complete case)
    and constant design columns are removed, both reported on the fit.
    """
    if not records:
        raise ValueError("cannot fit a hazards model on no records")
    design, names, keep, n_dropped = _design_matrix(records, include_covariates)
    kept = [records[i] for i in range(len(records)) if keep[i]]
    design = design[keep]
    if not kept:
        raise ValueError("all rows dropped for missing covariates")
    times = np.array([r.time for r in kept])
    events = np.array([r.event for r in kept], dtype=bool)
    weights = (
        np.array([r.weight for r in kept]) if use_weights else np.ones(len(kept))
    )
    n_events = int(events.sum())
    if n_events == 0:
        raise ValueError("no events: hazards model is not estimable")

    constant = design.min(axis=0) == design.max(axis=0)
    dropped = [name for name, c in zip(names, constant) if c]
    if constant[0]:
        raise ValueError("treatment indicator is constant in this population")
    design = design[:, ~constant]
    names = tuple(name for name, c in zip(names, constant) if not c)

    # A nuisance covariate with a monotone likelihood (its coefficient runs
    # away) has no finite estimate: drop it with a note and refit, so the
    # treatment contrast stays estimable. A runaway treatment coefficient is
    # reported as complete separation instead.
    note = None
    while True:
        state = _newton(design, times, events, weights)
        runaway = state.runaway_index
        if runaway is None or names[runaway] == "treated":
            break
        dropped.append(names[runaway])
        note = "monotone likelihood: dropped " + names[runaway]
        keep_cols = [j for j in range(design.shape[1]) if j != runaway]
        design = design[:, keep_cols]
        names = tuple(names[j] for j in keep_cols)
    converged = state.converged
    loglik = state.loglik
    if state.runaway_index is not None:
        converged = False
        note = "complete separation suspected (runaway treatment coefficient)"
    elif state.note is not None:
        note = state.note

    info = -state.hessian
    try:
        info_inv = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        info_inv = np.full_like(info, np.nan)
        converged = False
        note = note or "singular information matrix"

    robust = bool(np.any(weights != 1.0))
    beta = state.beta
    if robust and np.isfinite(info_inv).all() and np.isfinite(beta).all():
        residuals = _score_residuals(state.design, times, events, weights, beta)
        scaled = residuals * weights[:, None]
        meat = scaled.T @ scaled
        covariance = info_inv @ meat @ info_inv
    else:
        covariance = info_inv

    # back to the natural covariate scale
    beta = beta / state.scale
    covariance = covariance / np.outer(state.scale, state.scale)

    se = np.sqrt(np.maximum(np.diag(covariance), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.nan)
    p = 2.0 * stats.norm.sf(np.abs(z))
    z_crit = float(stats.norm.ppf(0.975))
    ci = tuple(
        (float(np.exp(b - z_crit * s)), float(np.exp(b + z_crit * s)))
        for b, s in zip(beta, se)
    )
    return CoxFit(
        names=names,
        coefficients=beta,
        hazard_ratios=np.exp(beta),
        standard_errors=se,
        wald_z=z,
        p_values=p,
        ci_95=ci,
        log_partial_likelihood=float(loglik),
        converged=converged,
        n=len(kept),
        n_events=n_events,
        robust=robust,
        dropped_columns=dropped,
        n_dropped_missing=n_dropped,
        note=note,
    )


@dataclass
class SurvivalCell:
    subgroup: str
    adjusted: bool
    n: int
    n_events: int
    fit: CoxFit | None
    estimable: bool
    reason: str | None
    significant: bool | None

    def to_row(self) -> dict:
        row = {
            "subgroup": self.subgroup,
            "adjusted": self.adjusted,
            "n": self.n,
            "events": self.n_events,
            "estimable": self.estimable,
            "reason": self.reason,
            "significant": self.significant,
            "hr": None,
            "ci_low": None,
            "ci_high": None,
            "p": None,
        }
        if self.fit is not None:
            low, high = self.fit.ci("treated")
            row.update(
                hr=self.fit.hazard_ratio("treated"),
                ci_low=low,
                ci_high=high,
                p=self.fit.p_value("treated"),
            )
        return row


@dataclass
class SurvivalTable:
    cells: list[SurvivalCell]
    alpha: float

    def get(self, subgroup: str, adjusted: bool) -> SurvivalCell:
        for cell in self.cells:
            if cell.subgroup == subgroup and cell.adjusted == adjusted:
                return cell
        raise KeyError(f"no cell for {subgroup!r} adjusted={adjusted}")

    def to_rows(self) -> list[dict]:
        return [cell.to_row() for cell in self.cells]

    def to_csv(self, path: str | Path, drug: str = "") -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["drug", "subgroup", "adjusted", "hr", "ci_low", "ci_high",
                 "p", "n", "events", "significant"]
            )
            for cell in self.cells:
                row = cell.to_row()
                writer.writerow(
                    [drug, row["subgroup"], int(row["adjusted"]),
                     _repr_or_empty(row["hr"]), _repr_or_empty(row["ci_low"]),
                     _repr_or_empty(row["ci_high"]), _repr_or_empty(row["p"]),
                     row["n"], row["events"],
                     "" if row["significant"] is None else int(row["significant"])]
                )


def _repr_or_empty(value) -> str:
    return "" if value is None else repr(float(value))


def _fit_cell(
    subgroup: str,
    adjusted: bool,
    records: list[WeightedSurvivalRecord],
    alpha: float,
) -> SurvivalCell:
    n = len(records)
    n_events = sum(r.event for r in records)
    try:
        fit = fit_cox(
            records, include_covariates=adjusted, use_weights=adjusted
        )
    except ValueError as exc:
        return SurvivalCell(
            subgroup=subgroup, adjusted=adjusted, n=n, n_events=n_events,
            fit=None, estimable=False, reason=str(exc), significant=None,
        )
    significant = bool(fit.converged and fit.p_value("treated") < alpha)
    return SurvivalCell(
        subgroup=subgroup, adjusted=adjusted, n=n, n_events=n_events,
        fit=fit, estimable=True, reason=None, significant=significant,
    )


def analyze_treatment(
    records_by_id: Mapping[str, WeightedSurvivalRecord],
    partition,
    alpha: float = 0.05,
    adjusted: bool | None = None,
) -> SurvivalTable:
    """Unadjusted and adjusted treated-vs-untreated fits per subgroup.

    ``partition`` provides the id sets named in :data:`SUBGROUPS`. Passing
    ``adjusted=True``/``False`` restricts the table to one model family.
    """
    id_sets = {
        "full": partition.full,
        "supplemental_oxygen": partition.supplemental_oxygen,
        "ml_indicated": partition.ml_indicated,
        "ml_non_indicated": partition.ml_non_indicated,
    }
    kinds = (False, True) if adjusted is None else (adjusted,)
    cells = []
    for subgroup in SUBGROUPS:
        members = [
            records_by_id[i] for i in sorted(id_sets[subgroup])
            if i in records_by_id
        ]
        for kind in kinds:
            cells.append(_fit_cell(subgroup, kind, members, alpha))
    return SurvivalTable(cells=cells, alpha=alpha)
