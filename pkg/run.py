import uvicorn

from ephpub.config import settings

if __name__ == "__main__":
    uvicorn.run(
        "ephpub.main:app",
        host=settings.API_HOST,
        port=settings.API_PORT,
        reload=settings.ENVIRONMENT == "development",
        log_level=settings.LOG_LEVEL.lower()
    )
