from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
import time
import logging

from qgrom.core.config import settings
from qgrom.core.errors import ArtifactIncompleteError, ArtifactMismatchError, InvalidArgumentError, QGRomError
from qgrom.core.logging_config import setup_logging
from qgrom.core.models import (
    VARIABLES,
    HealthResponse,
    NearestRequest,
    NearestResponse,
    PredictRequest,
    PredictResponse,
)
from qgrom.services.prediction_service import prediction_service

setup_logging()
logger = logging.getLogger(__name__)

app = FastAPI(
    title="QG Reduced Order Model API",
    description="Online rPOD-LSTM predictions of time-averaged two-layer QG fields",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, ArtifactIncompleteError):
        return HTTPException(status_code=404, detail=str(e))
    if isinstance(e, (InvalidArgumentError, ArtifactMismatchError)):
        return HTTPException(status_code=422, detail=str(e))
    return HTTPException(status_code=500, detail=f"Prediction failed: {e}")


@app.get("/", response_model=HealthResponse, tags=["Health"])
async def health_check():
    """Health check endpoint"""
    try:
        artifacts = prediction_service.load()
        return HealthResponse(status="healthy", manifest_loaded=True, fingerprint=artifacts.fingerprint,
                              variables=[v for v in VARIABLES if v in artifacts.models])
    except QGRomError:
        return HealthResponse(status="healthy", manifest_loaded=False)


@app.get("/api/health", response_model=HealthResponse, tags=["Health"])
async def api_health():
    return await health_check()


@app.post("/predict", response_model=PredictResponse, tags=["Prediction"])
async def predict(request: PredictRequest):
    """Reconstruct the time-averaged field of one variable for a parameter vector."""
    start_time = time.time()
    try:
        k, nearest_mu, field = prediction_service.predict(request.variable, request.mu, request.horizon_steps)
    except Exception as e:
        logger.error(f"Prediction failed: {e}")
        raise _http_error(e)
    processing_time = time.time() - start_time
    logger.info(f"Predicted {request.variable} for mu={request.mu} in {processing_time:.2f} seconds")
    return PredictResponse(
        variable=request.variable, mu=request.mu, nearest_sample=k, nearest_mu=nearest_mu.tolist(),
        nx=field.grid.nx, ny=field.grid.ny, values=field.values.tolist(), processing_time=processing_time,
    )


@app.post("/nearest", response_model=NearestResponse, tags=["Prediction"])
async def nearest(request: NearestRequest):
    try:
        k, mu = prediction_service.nearest(request.mu)
    except Exception as e:
        logger.error(f"Nearest-sample lookup failed: {e}")
        raise _http_error(e)
    return NearestResponse(index=k, mu=mu.tolist())


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host=settings.API_HOST, port=settings.API_PORT)
