from fastapi import APIRouter, HTTPException, status

from app.errors import PathSpaceError
from app.schemas import TrackGroundTruthSchema, TrackSpec
from app.simworld import generate_track

router = APIRouter(prefix="/tracks", tags=["Tracks"])


@router.post("/generate", response_model=TrackGroundTruthSchema)
def generate(spec: TrackSpec):
    """Generate a closed circuit with its centerline and cone boundaries"""
    try:
        truth = generate_track(spec)
    except PathSpaceError as exc:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=exc.detail)
    return truth.to_schema()
