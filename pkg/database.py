"""
Database setup for the persistent store file (SQLite via SQLAlchemy).

Only store entries are persisted; the cache lives in memory. Tables are
created on first use.
"""
import logging

from sqlalchemy import Engine, create_engine, event
from sqlalchemy.orm import DeclarativeBase, Session, sessionmaker

logger = logging.getLogger("mo.store")


class Base(DeclarativeBase):
    pass


def make_engine(path: str, echo: bool = False) -> Engine:
    """SQLite engine usable from the server's handler threads."""
    engine = create_engine(
        f"sqlite:///{path}",
        echo=echo,
        connect_args={"check_same_thread": False},
    )

    @event.listens_for(engine, "connect")
    def _pragmas(dbapi_conn, _record):
        cur = dbapi_conn.cursor()
        cur.execute("PRAGMA journal_mode=WAL")
        cur.execute("PRAGMA synchronous=NORMAL")
        cur.close()

    return engine


def init_db(engine: Engine) -> sessionmaker[Session]:
    """Create all tables (idempotent) and return a session factory."""
    import models  # noqa: F401 ensure models are registered
    try:
        Base.metadata.create_all(engine)
        logger.info(f"Store ready ({engine.url.database})")
    except Exception as e:
        logger.error(f"Store init failed: {e}")
        raise
    return sessionmaker(engine, expire_on_commit=False)
