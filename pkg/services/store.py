"""
Write-through persistence of the server's store.

The server keeps its store in memory; StoreFile mirrors every mutation into a
SQLite file so a restarted server reloads the same entries.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional

from sqlalchemy import delete, select

from database import init_db, make_engine
from models import StoredObject
from schemas.mobject import DistributedPart
from schemas.replication import PolicyKind, ReplicationPolicy
from services.cluster import Cluster
from services.tokens import token_decode

logger = logging.getLogger("mo.store")


@dataclass
class StoredEntry:
    part: DistributedPart
    home: bool
    adopted_at: int
    policies: list[ReplicationPolicy] = field(default_factory=list)

    @property
    def sustain_until(self) -> Optional[int]:
        for p in self.policies:
            if p.kind == PolicyKind.SUSTAIN:
                return p.sustain_until
        return None


class StoreFile:
    def __init__(self, path: str):
        self.path = path
        self.engine = make_engine(path)
        self.sessions = init_db(self.engine)

    def load(self) -> Iterator[StoredEntry]:
        with self.sessions() as s:
            rows = s.scalars(select(StoredObject).order_by(StoredObject.token_hex)).all()
        for row in rows:
            cluster, _ = Cluster.decode_from(row.cluster)
            yield StoredEntry(
                part=DistributedPart(token=token_decode(row.token), payload=row.payload, cluster=cluster),
                home=row.home,
                adopted_at=row.adopted_at,
                policies=[ReplicationPolicy(**p) for p in row.policies],
            )

    def put(self, entry: StoredEntry) -> None:
        token = entry.part.token
        row = StoredObject(
            token_hex=token.hex(),
            token=token.encoded,
            payload=entry.part.payload,
            cluster=entry.part.cluster.to_bytes(),
            home=entry.home,
            adopted_at=entry.adopted_at,
            sustain_until=entry.sustain_until,
            policies=[p.model_dump(mode="json") for p in entry.policies],
        )
        with self.sessions.begin() as s:
            s.merge(row)

    def remove(self, token_hex: str) -> None:
        with self.sessions.begin() as s:
            s.execute(delete(StoredObject).where(StoredObject.token_hex == token_hex))

    def close(self) -> None:
        self.engine.dispose()
        logger.info(f"Store file {self.path} closed")
