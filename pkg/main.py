from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import configure_logging
from app.routers import experiments, tracks

configure_logging()

app = FastAPI(
    title="PathSpace Mapping API",
    description="Boundary-spline mapping backend, landmark baseline and experiment harness",
    version="1.0.0"
)

# CORS middleware for dashboard access
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(tracks.router)
app.include_router(experiments.router)


@app.get("/")
async def root():
    return {
        "message": "PathSpace Mapping API",
        "version": "1.0.0",
        "docs": "/docs",
        "backends": ["pathspace", "ckf"]
    }


@app.get("/health")
async def health_check():
    return {"status": "healthy"}
