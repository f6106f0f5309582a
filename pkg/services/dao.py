"""
Distributed application objects (DAOs) built from micro-object graphs.

A DAO is a single micro object; what it means comes from the graph reachable
through its cluster. The reference construction is a file:

    file F   cluster = blocks, ordered by expire date
    block B  cluster = content objects; the last one (by token order) is current
    content  payload = the block's bytes

Writing never mutates anything: a new content object with a later expire date
is appended to the block's cluster and wins every later read.

Replication levels count steps into the graph from a root: the root's cluster
is level 0, a member's payload is one more than the cluster holding it and a
member's own cluster one more again. The root's payload is never part of it.
"""
import enum
import logging
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional

from errors import ExpireOrderError, NotFoundError
from schemas.security import NO_SECURITY, SecurityPolicy
from schemas.token import MAX_EXPIRE, Token
from services.cluster import Cluster

if TYPE_CHECKING:
    from services.libserver import Session
    from services.mobject import MicroObject

logger = logging.getLogger("mo.dao")

FILE_MARK = b"DAO:file"
BLOCK_MARK = b"DAO:block"

Resolver = Callable[[Token], Optional[Cluster]]


# ── Replication levels ───────────────────────────────────────────────────────
@dataclass(frozen=True)
class Levels:
    """Lowest level at which an object's cluster / payload is reached (None: not within bound)."""
    cluster: Optional[int] = None
    payload: Optional[int] = None


def subgraph_levels(root: Token, level: int, resolve: Resolver) -> dict[Token, Levels]:
    """
    Levels of every object reachable from root within `level`. Objects whose
    cluster cannot be resolved locally are not expanded.
    """
    cluster_lv: dict[Token, int] = {root: 0}
    payload_lv: dict[Token, int] = {}
    pending = deque([root])
    while pending:
        obj = pending.popleft()
        depth = cluster_lv[obj]
        if depth + 1 > level:
            continue
        members = resolve(obj)
        if members is None:
            continue
        for m in members:
            if m == root:
                continue
            payload_lv.setdefault(m, depth + 1)
            if depth + 2 <= level and m not in cluster_lv:
                cluster_lv[m] = depth + 2
                pending.append(m)
    return {
        t: Levels(cluster=cluster_lv.get(t), payload=payload_lv.get(t))
        for t in cluster_lv.keys() | payload_lv.keys()
    }


def subgraph_tokens(root: "DaoRef | Token", level: int, resolve: Resolver) -> set[tuple[Token, bool]]:
    """(token, needs_payload) for every object a policy at `level` on root covers."""
    token = root.token if isinstance(root, DaoRef) else root
    return {(t, lv.payload is not None) for t, lv in subgraph_levels(token, level, resolve).items()}


# ── DAO references ───────────────────────────────────────────────────────────
class DaoRole(str, enum.Enum):
    FILE = "file"
    BLOCK = "block"
    CONTENT = "content"


@dataclass(frozen=True)
class DaoRef:
    root: "MicroObject"
    role: DaoRole

    @property
    def token(self) -> Token:
        return self.root.token


def _refresh(session: "Session", ref: DaoRef) -> Cluster:
    """Current cluster of a DAO, asking the local server (and if needed its home)."""
    session.load(ref.root)
    return session.get_cter(ref.root)


def file_create(
    session: "Session",
    name: bytes = b"",
    expire: Optional[int] = None,
    psec: SecurityPolicy = NO_SECURITY,
) -> DaoRef:
    """Create an empty file DAO homed at the session's server."""
    if expire is None:
        expire = session.clock.now_ms() + session.config.default_lifetime_ms
    mo = session.create_new(expire, FILE_MARK + name, psec=psec)
    logger.info(f"Created file {mo.token}")
    return DaoRef(mo, DaoRole.FILE)


def file_open(session: "Session", token: Token | bytes, psec: SecurityPolicy = NO_SECURITY) -> DaoRef:
    return DaoRef(session.create_copy(token, psec), DaoRole.FILE)


def file_blocks(session: "Session", file: DaoRef) -> list[DaoRef]:
    """Blocks of a file in expire-date order."""
    members = _refresh(session, file)
    return [DaoRef(session.create_copy(t, file.root.psec), DaoRole.BLOCK) for t in members]


def _current_content(session: "Session", block: DaoRef) -> Optional[Token]:
    return _refresh(session, block).last()


def file_read(session: "Session", file: DaoRef) -> bytes:
    """Concatenation of the current content of every block."""
    out = []
    for block in file_blocks(session, file):
        current = _current_content(session, block)
        if current is None:
            continue
        content = session.create_copy(current, file.root.psec)
        out.append(session.get_payload(content))
    return b"".join(out)


def file_write_block(
    session: "Session",
    file: DaoRef,
    index: int,
    data: bytes,
) -> Token:
    """
    Replace the content of block `index` (index == block count appends a block).
    Returns the token of the new content DAO.
    """
    now = session.clock.now_ms()
    lifetime = session.config.default_lifetime_ms
    blocks = file_blocks(session, file)
    if index < 0 or index > len(blocks):
        raise NotFoundError(f"file {file.token} has {len(blocks)} blocks, no index {index}")

    if index == len(blocks):
        floor = blocks[-1].token.expire if blocks else 0
        expire = _later(floor, now + lifetime)
        marker = BLOCK_MARK + file.token.hash + index.to_bytes(4, "big")
        block = DaoRef(session.create_new(expire, marker, psec=file.root.psec), DaoRole.BLOCK)
        session.add_to_cluster(file.root, block.root)
        members = Cluster()
    else:
        block = blocks[index]
        members = _refresh(session, block)

    floor = max((t.expire for t in members), default=0)
    expire = _later(floor, now + lifetime)
    content = session.create_new(expire, data, psec=file.root.psec)
    session.add_to_cluster(block.root, content)
    logger.info(f"Wrote {len(data)} bytes to block {index} of {file.token} as {content.token}")
    return content.token


def _later(floor: int, target: int) -> int:
    expire = max(floor, target) + 1
    if expire > MAX_EXPIRE or expire <= floor:
        raise ExpireOrderError(f"no expire date after {floor} is available")
    return expire

