"""Retrospective treatment-effect analysis for hospital admission cohorts.

Subpackages cover the full per-drug pipeline: cohort normalization and
labeling, weighted gradient-boosted trees, propensity scores with
stabilized treatment weights, weighted survival models, the dummy-outcome
futility check, exact tree attributions, synthetic ground-truth cohorts,
and the orchestration layer with its CLI and scoring service.
"""

__version__ = "0.1.0"
