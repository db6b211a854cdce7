import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

# Load environment variables BEFORE importing config
from dotenv import load_dotenv
load_dotenv()

from config import configure_logging, settings
from errors import EVPError
from routers import predict, runs
from trainer import load_checkpoint, seed_everything

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup
    configure_logging()
    seed_everything(0)
    app.state.classifier = None
    logger.info("Starting %s %s (runs under %s)", settings.app_name, settings.app_version, settings.output_root)

    if settings.serve_checkpoint:
        try:
            classifier, _, _ = load_checkpoint(settings.serve_checkpoint)
            app.state.classifier = classifier
            logger.info("🚀 Checkpoint %s loaded (%d prompt parameters)", settings.serve_checkpoint, classifier.prompt_parameters())
        except EVPError as e:
            logger.error("❌ Could not load checkpoint %s: %s", settings.serve_checkpoint, e)
            raise
    else:
        logger.info("No EVP_SERVE_CHECKPOINT set; /api/predict stays unavailable")

    yield
    # Shutdown
    logger.info("Shutting down %s", settings.app_name)
    app.state.classifier = None


app = FastAPI(
    title=settings.app_name,
    version=settings.app_version,
    debug=settings.debug,
    lifespan=lifespan
)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Include routers
app.include_router(predict.router)
app.include_router(runs.router)


@app.get("/")
async def root():
    return {"message": "EVP API - prompts visuales sobre un ViT congelado"}


@app.get("/health")
async def health_check():
    return {
        "status": "healthy",
        "checkpoint": "loaded" if getattr(app.state, "classifier", None) is not None else "missing",
        "output_root": settings.output_root
    }
