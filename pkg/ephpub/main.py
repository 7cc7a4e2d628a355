from fastapi import FastAPI

from ephpub import __version__
from ephpub.config import settings
from ephpub.routers import analysis, epo

app = FastAPI(
    title="EphPub API",
    description="Local API for EPO inspection and protocol estimates",
    version=__version__,
    docs_url="/api/docs",
    redoc_url="/api/redoc"
)

# Include routers
app.include_router(analysis.router, prefix="/api/analysis", tags=["Analysis"])
app.include_router(epo.router, prefix="/api/epo", tags=["EPO"])

@app.get("/")
async def root():
    return {
        "message": "EphPub API",
        "docs": "/api/docs",
        "version": __version__,
        "environment": settings.ENVIRONMENT
    }

@app.get("/api/health")
async def health_check():
    return {
        "status": "healthy",
        "environment": settings.ENVIRONMENT,
        "key_bits": settings.KEY_BITS
    }

@app.get("/health")
async def health_check_simple():
    return {"status": "ok"}
