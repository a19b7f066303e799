"""HTTP scoring service for fitted per-drug model bundles.

Stateless JSON API consumed by the what-if console:

* ``GET /drugs`` lists the loaded drugs.
* ``POST /score/{drug}`` scores one feature payload and returns the benefit
  probability, the indication flag, and the ranked margin-scale
  contribution breakdown (base + contributions = final margin).

Feature payloads may omit any feature (missing-capable models route them),
but unknown feature names and non-numeric values are rejected with a
validation error naming the offending fields.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .explain import force_data, tree_shap
from .teml import TeModel, load_te_model

__all__ = ["ScoringService", "create_app"]


class ScoreRequest(BaseModel):
    features: dict[str, float | None] = {}


class ScoringService:
    """Holds the loaded bundles; reload swaps the whole mapping atomically."""

    def __init__(self, bundle_dir: str | Path):
        self.bundle_dir = Path(bundle_dir)
        self._models: dict[str, TeModel] = {}
        self.reload()

    def reload(self) -> None:
        models: dict[str, TeModel] = {}
        for path in sorted(self.bundle_dir.glob("bundle_*.json")):
            model = load_te_model(path)
            models[model.drug] = model
        self._models = models  # atomic swap

    def drugs(self) -> list[str]:
        return sorted(self._models)

    def get(self, drug: str) -> TeModel:
        try:
            return self._models[drug]
        except KeyError:
            raise HTTPException(
                status_code=404, detail=f"unknown drug {drug!r}"
            ) from None

    def score(self, drug: str, features: dict[str, float | None]) -> dict:
        model = self.get(drug)
        known = set(model.ensemble.feature_names)
        unknown = sorted(set(features) - known)
        if unknown:
            raise HTTPException(
                status_code=422,
                detail={"unknown_features": unknown},
            )
        explanation = tree_shap(model.ensemble, features)
        force = force_data(explanation)
        probability = explanation.prediction_probability
        return {
            "drug": drug,
            "benefit_score": probability,
            "indicated": probability > model.indication_threshold,
            "threshold": model.indication_threshold,
            "base_value": force.base_value,
            "margin": force.final_value,
            "contributions": [
                {
                    "feature": entry.feature,
                    "value": entry.value,
                    "contribution": entry.contribution,
                }
                for entry in force.entries
            ],
        }


def create_app(bundle_dir: str | Path) -> FastAPI:
    service = ScoringService(bundle_dir)
    app = FastAPI(title="treatment-benefit scoring service")
    app.state.service = service

    @app.get("/drugs")
    def list_drugs() -> dict:
        return {"drugs": service.drugs()}

    @app.post("/score/{drug}")
    def score(drug: str, request: ScoreRequest) -> dict:
        return service.score(drug, request.features)

    return app
