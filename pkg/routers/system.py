"""
System router: health and request counters of the running MO server.
"""
from fastapi import APIRouter, Depends, Request

from schemas.status import HealthView, StatsView
from services.server import MOServer

router = APIRouter(tags=["System"])


def get_server(request: Request) -> MOServer:
    """The MO server this status app reports on."""
    return request.app.state.server


@router.get("/health", response_model=HealthView)
async def health(server: MOServer = Depends(get_server)):
    return HealthView(address=str(server.address))


@router.get(
    "/api/v1/stats",
    response_model=StatsView,
    summary="Request counters and store/cache sizes",
)
async def get_stats(server: MOServer = Depends(get_server)):
    return StatsView(**server.stats_view())
