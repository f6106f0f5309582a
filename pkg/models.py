"""
SQLAlchemy ORM models: one row per store entry.
"""
from sqlalchemy import JSON, BigInteger, Boolean, Column, LargeBinary, String

from database import Base


class StoredObject(Base):
    """The distributed part of a stored micro object plus its store metadata."""
    __tablename__ = "store"

    token_hex = Column(String(700), primary_key=True)
    token = Column(LargeBinary, nullable=False)
    payload = Column(LargeBinary, nullable=True)
    cluster = Column(LargeBinary, nullable=False)
    home = Column(Boolean, nullable=False, default=False)
    adopted_at = Column(BigInteger, nullable=False, default=0)
    sustain_until = Column(BigInteger, nullable=True)
    # [{"kind": 1, "level": 0, "sustain_until": null}, ...]
    policies = Column(JSON, nullable=False, default=list)

    def __repr__(self) -> str:
        return f"<StoredObject {self.token_hex[-16:]} home={self.home}>"
