"""
Objects router: read-only listing of the copies a server holds.

Only distributed parts are shown; policies, peers and keys stay private.
"""
from typing import List, Optional

from fastapi import APIRouter, Depends, Query

from errors import MalformedTokenError, NotFoundError
from routers.system import get_server
from schemas.status import ObjectDetail, ObjectSummary
from services.server import Entry, MOServer
from services.tokens import token_decode

router = APIRouter(prefix="/api/v1/objects", tags=["Objects"])


def _summary(location: str, entry: Entry) -> dict:
    return dict(
        token_hex=entry.token.hex(),
        prefix=entry.token.prefix,
        home=str(entry.token.home),
        expire=entry.token.expire,
        location=location,
        has_payload=entry.payload is not None,
        cluster_size=len(entry.cluster),
    )


@router.get("", response_model=List[ObjectSummary], summary="List stored and cached copies")
async def list_objects(
    location: Optional[str] = Query(None, pattern="^(store|cache)$", description="store | cache"),
    limit: int = Query(200, ge=1, le=10_000),
    server: MOServer = Depends(get_server),
):
    rows = [(loc, e) for loc, e in server.entries() if location is None or loc == location]
    return [ObjectSummary(**_summary(loc, e)) for loc, e in rows[:limit]]


@router.get("/{token_hex}", response_model=ObjectDetail, summary="One copy's distributed part")
async def get_object(token_hex: str, server: MOServer = Depends(get_server)):
    try:
        token = token_decode(bytes.fromhex(token_hex))
    except ValueError as e:
        raise MalformedTokenError(f"not a token: {e}") from e
    entry = server.lookup(token, touch=False)
    if entry is None:
        raise NotFoundError(f"{token} is not held here")
    location = "store" if token in server.store else "cache"
    with entry.gate:
        return ObjectDetail(
            **_summary(location, entry),
            payload_hex=entry.payload.hex() if entry.payload is not None else None,
            cluster=[t.hex() for t in entry.cluster],
        )
