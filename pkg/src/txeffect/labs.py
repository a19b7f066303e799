"""Laboratory-name normalization by fuzzy clustering.

Raw lab names that carry a standard code are grouped by that code. Uncoded
names are attached to the closest existing cluster, where closeness mixes
spelling distance (normalized Levenshtein), agreement of value medians, and
a two-sample t-test on the value distributions. A candidate cluster that
fails any single criterion is rejected outright, so dissimilar names stay
singleton; the resulting clusters partition the raw-name catalog.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

__all__ = [
    "LabCluster",
    "LabClusterConfig",
    "LabClusteringResult",
    "cluster_lab_names",
    "cluster_labs",
    "levenshtein",
    "normalized_levenshtein",
]


def levenshtein(a: str, b: str) -> int:
    """Edit distance (insert/delete/substitute) between two strings."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(
                min(
                    previous[j] + 1,  # delete
                    current[j - 1] + 1,  # insert
                    previous[j - 1] + (ca != cb),  # substitute
                )
            )
        previous = current
    return previous[-1]


def normalized_levenshtein(a: str, b: str) -> float:
    """Edit distance divided by the longer length; 0.0 for two empty strings."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein(a, b) / longest


@dataclass(frozen=True)
class LabClusterConfig:
    """Rejection thresholds for merging an uncoded name into a cluster."""

    max_normalized_distance: float = 0.25
    min_t_pvalue: float = 0.01
    median_ratio_bounds: tuple[float, float] = (0.5, 2.0)


@dataclass
class LabCluster:
    canonical_name: str
    member_raw_names: frozenset[str]
    target_unit: str


@dataclass
class LabClusteringResult:
    clusters: list[LabCluster]
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def canonical_map(self) -> dict[str, str]:
        return {
            member: cluster.canonical_name
            for cluster in self.clusters
            for member in cluster.member_raw_names
        }

    def to_json_dict(self) -> dict:
        return {
            "clusters": [
                {
                    "canonical_name": c.canonical_name,
                    "member_raw_names": sorted(c.member_raw_names),
                    "target_unit": c.target_unit,
                }
                for c in sorted(self.clusters, key=lambda c: c.canonical_name)
            ],
            "rejected_observations": [
                {"raw_name": name, "reason": reason}
                for name, reason in self.rejected
            ],
        }


class _NameStats:
    def __init__(self, name: str):
        self.name = name
        self.values: list[float] = []
        self.units: Counter[str] = Counter()
        self.codes: Counter[str] = Counter()

    @property
    def median(self) -> float:
        return float(np.median(self.values))


def _two_sample_pvalue(a: list[float], b: list[float]) -> float:
    """Student's t-test p-value; 1.0 when either side is too small to test."""
    if len(a) < 2 or len(b) < 2:
        return 1.0
    if np.var(a) == 0.0 and np.var(b) == 0.0:
        return 1.0 if np.mean(a) == np.mean(b) else 0.0
    result = stats.ttest_ind(a, b, equal_var=True)
    p = float(result.pvalue)
    return 1.0 if math.isnan(p) else p


def _median_ratio(a: float, b: float) -> float | None:
    """Ratio of medians, or None when undefined (opposite signs / lone zero)."""
    if a == 0.0 and b == 0.0:
        return 1.0
    if b == 0.0 or a * b < 0:
        return None
    return a / b


def _merge_score(
    distance: float, ratio: float, pvalue: float, config: LabClusterConfig
) -> float | None:
    """Combined closeness (lower = closer); None when any criterion rejects."""
    if distance > config.max_normalized_distance:
        return None
    if pvalue < config.min_t_pvalue:
        return None
    low, high = config.median_ratio_bounds
    if not (low <= ratio <= high):
        return None
    return distance + abs(math.log(ratio)) / math.log(high) + (1.0 - pvalue)


class _Cluster:
    def __init__(self, stats_list: list[_NameStats]):
        self.members = stats_list

    @property
    def values(self) -> list[float]:
        return [v for s in self.members for v in s.values]

    @property
    def median(self) -> float:
        return float(np.median(self.values))

    def finalize(self) -> LabCluster:
        # canonical = most observed member name, ties lexicographic
        canonical = min(self.members, key=lambda s: (-len(s.values), s.name)).name
        units: Counter[str] = Counter()
        for member in self.members:
            units.update(member.units)
        target_unit = min(units, key=lambda u: (-units[u], u)) if units else ""
        return LabCluster(
            canonical_name=canonical,
            member_raw_names=frozenset(s.name for s in self.members),
            target_unit=target_unit,
        )


def cluster_labs(observations, config: LabClusterConfig | None = None) -> LabClusteringResult:
    """Cluster raw lab names; returns clusters plus rejected-value diagnostics."""
    config = config or LabClusterConfig()
    by_name: dict[str, _NameStats] = {}
    rejected: list[tuple[str, str]] = []
    for obs in observations:
        if not obs.raw_name:
            raise ValueError("lab observation with empty raw_name")
        if not math.isfinite(obs.value):
            rejected.append((obs.raw_name, f"non-numeric value {obs.value!r}"))
            continue
        entry = by_name.setdefault(obs.raw_name, _NameStats(obs.raw_name))
        entry.values.append(float(obs.value))
        if obs.unit:
            entry.units[obs.unit] += 1
        if obs.code:
            entry.codes[obs.code] += 1

    # Names whose every observation was rejected still need a home.
    for name, _reason in rejected:
        by_name.setdefault(name, _NameStats(name))

    if not by_name:
        return LabClusteringResult(clusters=[], rejected=rejected)

    coded: dict[str, _Cluster] = {}
    uncoded: list[_NameStats] = []
    for name in sorted(by_name):
        entry = by_name[name]
        if entry.codes:
            code = min(entry.codes, key=lambda c: (-entry.codes[c], c))
            if code in coded:
                coded[code].members.append(entry)
            else:
                coded[code] = _Cluster([entry])
        else:
            uncoded.append(entry)

    clusters: list[_Cluster] = [coded[code] for code in sorted(coded)]

    # Attach uncoded names, most-observed first so merge targets stabilize.
    uncoded.sort(key=lambda s: (-len(s.values), s.name))
    for entry in uncoded:
        best: tuple[float, int] | None = None
        if entry.values:
            for idx, cluster in enumerate(clusters):
                if not cluster.values:
                    continue
                distance = min(
                    normalized_levenshtein(entry.name, member.name)
                    for member in cluster.members
                )
                ratio = _median_ratio(entry.median, cluster.median)
                if ratio is None:
                    continue
                pvalue = _two_sample_pvalue(entry.values, cluster.values)
                score = _merge_score(distance, ratio, pvalue, config)
                if score is not None and (best is None or score < best[0]):
                    best = (score, idx)
        if best is None:
            clusters.append(_Cluster([entry]))
        else:
            clusters[best[1]].members.append(entry)

    return LabClusteringResult(
        clusters=[c.finalize() for c in clusters], rejected=rejected
    )


def cluster_lab_names(observations, config: LabClusterConfig | None = None) -> list[LabCluster]:
    return cluster_labs(observations, config).clusters
