"""
Micro objects: the four sections of one object as held by a lib-server.

Distributed part: token, sealed payload, cluster. Nondistributed part:
payload/cluster security policies and replication data, which never leave the
process that owns them.

Wire form of the distributed part:
    token | payload_len(4) | sealed payload | cluster (count(4) | tokens)
payload_len 0 means the payload is absent (a sealed payload is never empty).
"""
import struct
import threading
from typing import Optional

from errors import MalformedBodyError, PayloadAbsentError, UnknownPolicyError, VerifyFailedError
from schemas.mobject import DistributedPart
from schemas.replication import ReplicationData
from schemas.security import NO_SECURITY, SealedBuffer, SecurityMode, SecurityPolicy
from schemas.token import HomeLocation, Token
from services.cluster import Cluster
from services.security import open_sealed, seal
from services.tokens import DEFAULT_MAX_PAYLOAD, token_create, token_decode, token_decode_from, token_verify

CLUSTER_MODES = (SecurityMode.NONE, SecurityMode.AUTHENTICATE)


class MicroObject:
    """
    One local copy. Token and payload never change once set; the cluster only
    grows. All cluster access goes through `gate`, and `changed` is notified
    whenever the cluster gains members.
    """

    def __init__(
        self,
        token: Token,
        payload: Optional[SealedBuffer] = None,
        cluster: Optional[Cluster] = None,
        psec: SecurityPolicy = NO_SECURITY,
        csec: SecurityPolicy = NO_SECURITY,
    ):
        if csec.mode not in CLUSTER_MODES:
            raise UnknownPolicyError(f"cluster security {csec.mode.name} is not supported")
        self.token = token
        self._payload = payload
        self._cluster = cluster or Cluster()
        self.psec = psec
        self.csec = csec
        self.repl = ReplicationData()
        self.gate = threading.RLock()
        self.changed = threading.Condition(self.gate)

    @property
    def home(self) -> HomeLocation:
        return self.token.home

    @property
    def payload(self) -> Optional[SealedBuffer]:
        return self._payload

    @property
    def cluster(self) -> Cluster:
        with self.gate:
            return self._cluster

    def set_payload(self, raw: bytes) -> None:
        """Attach a fetched payload; it must be the one the token names."""
        if not token_verify(self.token, raw):
            raise VerifyFailedError(f"payload does not match token {self.token}")
        with self.gate:
            if self._payload is None:
                self._payload = SealedBuffer.from_bytes(raw)

    def merge(self, tokens) -> list[Token]:
        """Add tokens to the cluster; returns those that were new."""
        with self.gate:
            self._cluster, added = self._cluster.add_all(tokens)
            if added:
                self.changed.notify_all()
            return added

    def distributed_part(self) -> DistributedPart:
        with self.gate:
            raw = self._payload.to_bytes() if self._payload is not None else None
            return DistributedPart(token=self.token, payload=raw, cluster=self._cluster)

    def __repr__(self) -> str:
        state = "payload" if self._payload is not None else "token-only"
        return f"MicroObject({self.token}, {state}, {len(self._cluster)} members)"


def mo_new(
    home: HomeLocation,
    expire: int,
    plaintext: bytes,
    psec: SecurityPolicy = NO_SECURITY,
    csec: SecurityPolicy = NO_SECURITY,
    aux: int = 0,
    max_payload_size: int = DEFAULT_MAX_PAYLOAD,
) -> MicroObject:
    """Seal the plaintext, then compute the token over the sealed bytes."""
    sealed = seal(psec, plaintext, max_payload_size)
    token = token_create(home, expire, aux, sealed.to_bytes(), max_payload_size)
    return MicroObject(token, sealed, Cluster(), psec, csec)


def mo_from_token(
    token: Token | bytes,
    psec: SecurityPolicy = NO_SECURITY,
    csec: SecurityPolicy = NO_SECURITY,
) -> MicroObject:
    """A token-only copy, bound to the token's home."""
    if not isinstance(token, Token):
        token = token_decode(token)
    return MicroObject(token, None, Cluster(), psec, csec)


def mo_plaintext(mo: MicroObject) -> bytes:
    if mo.payload is None:
        raise PayloadAbsentError(f"payload of {mo.token} not fetched")
    return open_sealed(mo.psec, mo.payload)


# ── Wire form ────────────────────────────────────────────────────────────────
def encode_part(part: DistributedPart) -> bytes:
    payload = part.payload or b""
    return part.token.encoded + struct.pack(">I", len(payload)) + payload + part.cluster.to_bytes()


def decode_part_from(buf: bytes | memoryview, offset: int = 0) -> tuple[DistributedPart, int]:
    buf = memoryview(buf)
    token, offset = token_decode_from(buf, offset)
    if len(buf) - offset < 4:
        raise MalformedBodyError("short payload length")
    (size,) = struct.unpack_from(">I", buf, offset)
    offset += 4
    if len(buf) - offset < size:
        raise MalformedBodyError(f"payload claims {size} bytes")
    payload = bytes(buf[offset:offset + size]) if size else None
    offset += size
    cluster, offset = Cluster.decode_from(buf, offset)
    return DistributedPart(token=token, payload=payload, cluster=cluster), offset
