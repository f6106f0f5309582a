"""
MO server status API.
Routes: health, request counters, store/cache listing.
Error handling: consistent JSON. Logging: one format for every `mo.*` logger.
"""
import logging

from fastapi import FastAPI

from errors import register_error_handlers
from routers.objects import router as objects_router
from routers.system import router as system_router
from services.server import MOServer

LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"


# ── Logging ──────────────────────────────────────────────────────────────────
def setup_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt="%Y-%m-%d %H:%M:%S",
    )


logger = logging.getLogger("mo")


# ── App ──────────────────────────────────────────────────────────────────────
def create_app(server: MOServer) -> FastAPI:
    app = FastAPI(
        title="MO server status",
        description=(
            "Read-only view of one micro-object server.\n\n"
            "**Endpoints:**\n"
            "- **System**: health, request counters, store/cache sizes\n"
            "- **Objects**: copies held in the store and the cache"
        ),
        version="1.0.0",
    )
    app.state.server = server

    # ── Error handlers ───────────────────────────────────────────────────
    register_error_handlers(app)

    # ── Routers ──────────────────────────────────────────────────────────
    app.include_router(system_router)
    app.include_router(objects_router)
    return app
