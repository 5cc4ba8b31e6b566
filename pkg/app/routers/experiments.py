from typing import List

from fastapi import APIRouter, Depends, HTTPException, status

from app.config import Settings, get_settings
from app.errors import PathSpaceError
from app.harness import apply_overrides, run_comparison, run_scalability
from app.schemas import ComparisonResponse, ExperimentConfig, ScalabilityCell, ScalabilityRequest

router = APIRouter(prefix="/experiments", tags=["Experiments"])


@router.post("/run", response_model=ComparisonResponse)
def run(config: ExperimentConfig, settings: Settings = Depends(get_settings)):
    """Run the per-lap backend comparison on one simulated stream"""
    try:
        result = run_comparison(apply_overrides(config, settings))
    except PathSpaceError as exc:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=exc.detail)
    return result.to_response()


@router.post("/scalability", response_model=List[ScalabilityCell])
def scalability(request: ScalabilityRequest, settings: Settings = Depends(get_settings)):
    """Time one update cycle per map size and readings count"""
    try:
        return run_scalability(
            apply_overrides(request.config, settings),
            request.map_sizes,
            request.readings_per_update,
            request.repeats,
        )
    except PathSpaceError as exc:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=exc.detail)
