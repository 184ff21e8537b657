"""
Certification Service

HTTP front end for stored checkpoints: certify a single input with IBP
and branch and bound, or attack it with PGD. Checkpoints are read only
from the configured checkpoint root.
"""

import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from routes.certify import router as certify_router
from services.tensor import configure_determinism
from utils.logging_config import configure_logging
from utils.settings import get_settings

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    settings = get_settings()
    configure_logging()
    configure_determinism(settings.num_threads)
    logger.info("Certification service starting up...")
    logger.info("Checkpoint root: %s", settings.checkpoint_root or "(not configured)")
    yield
    logger.info("Certification service stopped")


app = FastAPI(
    title="IBP Certification API",
    description="Certify and attack classifiers against l-infinity perturbations",
    version="1.0.0",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    logger.error("Unhandled exception: %s", exc, exc_info=True)
    return JSONResponse(
        status_code=500,
        content={
            "error": "Internal server error",
            "message": "The certification service encountered an error",
            "service": "ibp-certifier",
        },
    )


app.include_router(certify_router)


@app.get("/")
async def root():
    """Root endpoint"""
    return {
        "message": "IBP Certification API",
        "version": "1.0.0",
        "endpoints": {
            "certify": "/api/certify",
            "attack": "/api/attack",
            "health": "/api/health",
        },
    }


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host="0.0.0.0", port=get_settings().service_port)
