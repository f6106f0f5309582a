"""
Binary framing and body codecs for the remote and local channels.

Header (16 bytes, big-endian):
    magic(2)=0x4D4F | version(1) | type(1) | request_id(8) | body_len(4)

Every body of a local type (16-20) starts with a 32-byte HMAC-SHA256 over
type | request_id | rest, keyed with the server's local secret. Exact body
layouts live in docs/protocol.md.
"""
import struct
from typing import Optional

from Crypto.Hash import HMAC, SHA256
from pydantic import ValidationError

from errors import (
    BadMagicError,
    BadVersionError,
    LengthMismatchError,
    MalformedBodyError,
    MOError,
    UnknownTypeError,
    UntrustedChannelError,
)
from schemas.cluster import ClusterDigest
from schemas.message import (
    HEADER_SIZE,
    MAGIC,
    MAX_BODY_SIZE,
    PROTOCOL_VERSION,
    AdoptRequest,
    AssentRequest,
    AssentResponse,
    AssentStatus,
    BusyResponse,
    ErrorResponse,
    FetchRequest,
    FetchResponse,
    FetchStatus,
    LocalResponse,
    Message,
    MessageType,
    PayloadRequest,
    ReplicateAction,
    ReplicateRequest,
    UpdateRequest,
)
from schemas.mobject import DistributedPart
from schemas.token import HomeLocation, Token
from services.cluster import decode_digest, decode_token_list, encode_digest, encode_token_list
from services.mobject import decode_part_from, encode_part
from services.tokens import encode_home, token_decode_from

_HEADER = struct.Struct(">HBBQI")
MAC_SIZE = 32

_ASSENT_VIA_ROOT = 0x01
_ASSENT_PAYLOAD = 0x02
_ASSENT_CLUSTER = 0x04


# ── Framing ──────────────────────────────────────────────────────────────────
def encode_message(message: Message) -> bytes:
    body = message.body
    return _HEADER.pack(MAGIC, PROTOCOL_VERSION, message.type, message.request_id, len(body)) + body


def decode_header(raw: bytes) -> tuple[MessageType, int, int]:
    """Validate a 16-byte header; returns (type, request_id, body_len)."""
    if len(raw) < HEADER_SIZE:
        raise LengthMismatchError(f"header of {len(raw)} bytes")
    magic, version, type_, request_id, body_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"magic 0x{magic:04x}")
    if version != PROTOCOL_VERSION:
        raise BadVersionError(f"version {version}")
    try:
        msg_type = MessageType(type_)
    except ValueError as e:
        raise UnknownTypeError(f"type {type_}") from e
    if body_len > MAX_BODY_SIZE:
        raise LengthMismatchError(f"body of {body_len} bytes exceeds {MAX_BODY_SIZE}")
    return msg_type, request_id, body_len


def decode_message(raw: bytes) -> Message:
    """Decode exactly one frame; the body length must match what follows the header."""
    msg_type, request_id, body_len = decode_header(raw)
    if len(raw) - HEADER_SIZE != body_len:
        raise LengthMismatchError(f"header says {body_len} body bytes, frame has {len(raw) - HEADER_SIZE}")
    return Message(type=msg_type, request_id=request_id, body=bytes(raw[HEADER_SIZE:]))


# ── Local channel authentication ─────────────────────────────────────────────
def _mac(secret: bytes, msg_type: MessageType, request_id: int, rest: bytes) -> bytes:
    h = HMAC.new(secret, digestmod=SHA256)
    h.update(bytes([msg_type]) + struct.pack(">Q", request_id) + rest)
    return h.digest()


def _check_mac(secret: bytes, message: Message) -> bytes:
    body = message.body
    if len(body) < MAC_SIZE:
        raise UntrustedChannelError("local message without authenticator")
    try:
        HMAC.new(secret, bytes([message.type]) + struct.pack(">Q", message.request_id) + body[MAC_SIZE:],
                 digestmod=SHA256).verify(body[:MAC_SIZE])
    except ValueError as e:
        raise UntrustedChannelError("local message authenticator mismatch") from e
    return body[MAC_SIZE:]


# ── Body reader ──────────────────────────────────────────────────────────────
class Reader:
    """Bounds-checked cursor over one body; never reads past its end."""

    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def _need(self, n: int) -> None:
        if len(self.buf) - self.pos < n:
            raise MalformedBodyError(f"need {n} bytes at offset {self.pos}")

    def u8(self) -> int:
        self._need(1)
        v = self.buf[self.pos]
        self.pos += 1
        return v

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        self._need(size)
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        self._need(n)
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def token(self) -> Token:
        t, self.pos = token_decode_from(self.buf, self.pos)
        return t

    def tokens(self) -> list[Token]:
        ts, self.pos = decode_token_list(self.buf, self.pos)
        return ts

    def digest(self) -> ClusterDigest:
        d, self.pos = decode_digest(self.buf, self.pos)
        return d

    def part(self) -> DistributedPart:
        p, self.pos = decode_part_from(self.buf, self.pos)
        return p

    def address(self) -> HomeLocation:
        n = self.u8()
        host = self.raw(n).decode("utf-8")
        (port,) = self.unpack(">H")
        loc = HomeLocation(host=host, port=port)
        if loc.host != host:
            raise MalformedBodyError("address host is not canonical")
        return loc

    def addresses(self) -> list[HomeLocation]:
        return [self.address() for _ in range(self.u8())]

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedBodyError(f"{len(self.buf) - self.pos} trailing body bytes")


def _addresses(addrs: list[HomeLocation]) -> bytes:
    addrs = addrs[:255]
    return bytes([len(addrs)]) + b"".join(encode_home(a) for a in addrs)


# ── Body encoders ────────────────────────────────────────────────────────────
def _encode_fetch(b: FetchRequest) -> bytes:
    return encode_home(b.sender) + b.token.encoded


def _encode_fetch_resp(b: FetchResponse) -> bytes:
    out = bytes([b.status]) + _addresses(b.ditto)
    if b.status == FetchStatus.FOUND:
        out += encode_part(b.part)
    return out


def _encode_busy(b: BusyResponse) -> bytes:
    return _addresses(b.ditto)


def _encode_assent(b: AssentRequest) -> bytes:
    flags = 0
    if b.via_root is not None:
        flags |= _ASSENT_VIA_ROOT
    if b.payload is not None:
        flags |= _ASSENT_PAYLOAD
    if b.has_cluster:
        flags |= _ASSENT_CLUSTER
    out = [encode_home(b.sender), b.token.encoded, bytes([flags])]
    if b.via_root is not None:
        out.append(b.via_root.encoded)
    out.append(encode_digest(b.digest))
    out.append(encode_token_list(b.sample))
    if b.payload is not None:
        out.append(struct.pack(">I", len(b.payload)) + b.payload)
    out.append(_addresses(b.ditto))
    return b"".join(out)


def _encode_assent_resp(b: AssentResponse) -> bytes:
    return bytes([b.status, int(b.accepted)]) + encode_digest(b.digest) + encode_token_list(b.missing)


def _encode_request_payload(b: PayloadRequest) -> bytes:
    return b.token.encoded + bytes([int(b.local_only)])


def _encode_adopt(b: AdoptRequest) -> bytes:
    return encode_part(b.part)


def _encode_replicate(b: ReplicateRequest) -> bytes:
    return b.token.encoded + struct.pack(">BBHQ", b.action, b.kind, b.level, b.sustain_until)


def _encode_update(b: UpdateRequest) -> bytes:
    return b.token.encoded + encode_token_list(b.tokens)


def _encode_local_resp(b: LocalResponse) -> bytes:
    return b"\x00" if b.part is None else b"\x01" + encode_part(b.part)


def _encode_error(b: ErrorResponse) -> bytes:
    code = b.code.encode("utf-8")[:255]
    msg = b.message.encode("utf-8")[:0xFFFF]
    return bytes([len(code)]) + code + struct.pack(">H", len(msg)) + msg


# ── Body decoders ────────────────────────────────────────────────────────────
def _decode_fetch(r: Reader) -> FetchRequest:
    return FetchRequest(sender=r.address(), token=r.token())


def _decode_fetch_resp(r: Reader) -> FetchResponse:
    status = FetchStatus(r.u8())
    ditto = r.addresses()
    part = r.part() if status == FetchStatus.FOUND else None
    return FetchResponse(status=status, ditto=ditto, part=part)


def _decode_busy(r: Reader) -> BusyResponse:
    return BusyResponse(ditto=r.addresses())


def _decode_assent(r: Reader) -> AssentRequest:
    sender = r.address()
    token = r.token()
    flags = r.u8()
    if flags & ~(_ASSENT_VIA_ROOT | _ASSENT_PAYLOAD | _ASSENT_CLUSTER):
        raise MalformedBodyError(f"unknown assent flags 0x{flags:02x}")
    via_root = r.token() if flags & _ASSENT_VIA_ROOT else None
    digest = r.digest()
    sample = r.tokens()
    payload = None
    if flags & _ASSENT_PAYLOAD:
        (size,) = r.unpack(">I")
        payload = r.raw(size)
    return AssentRequest(
        sender=sender, token=token, via_root=via_root, has_cluster=bool(flags & _ASSENT_CLUSTER),
        digest=digest, sample=sample, payload=payload, ditto=r.addresses(),
    )


def _decode_assent_resp(r: Reader) -> AssentResponse:
    status = AssentStatus(r.u8())
    accepted = r.u8()
    if accepted > 1:
        raise MalformedBodyError("accepted flag out of range")
    return AssentResponse(status=status, accepted=bool(accepted), digest=r.digest(), missing=r.tokens())


def _decode_request_payload(r: Reader) -> PayloadRequest:
    token = r.token()
    flags = r.u8()
    if flags > 1:
        raise MalformedBodyError(f"unknown request flags 0x{flags:02x}")
    return PayloadRequest(token=token, local_only=bool(flags))


def _decode_adopt(r: Reader) -> AdoptRequest:
    return AdoptRequest(part=r.part())


def _decode_replicate(r: Reader) -> ReplicateRequest:
    token = r.token()
    action, kind, level, until = r.unpack(">BBHQ")
    return ReplicateRequest(token=token, action=ReplicateAction(action), kind=kind, level=level, sustain_until=until)


def _decode_update(r: Reader) -> UpdateRequest:
    return UpdateRequest(token=r.token(), tokens=r.tokens())


def _decode_local_resp(r: Reader) -> LocalResponse:
    kind = r.u8()
    if kind > 1:
        raise MalformedBodyError(f"unknown local response kind {kind}")
    return LocalResponse(part=r.part() if kind else None)


def _decode_error(r: Reader) -> ErrorResponse:
    code = r.raw(r.u8()).decode("utf-8")
    (n,) = r.unpack(">H")
    return ErrorResponse(code=code, message=r.raw(n).decode("utf-8", errors="replace"))


_CODECS = {
    MessageType.FETCH: (FetchRequest, _encode_fetch, _decode_fetch),
    MessageType.FETCH_RESP: (FetchResponse, _encode_fetch_resp, _decode_fetch_resp),
    MessageType.BUSY: (BusyResponse, _encode_busy, _decode_busy),
    MessageType.ASSENT: (AssentRequest, _encode_assent, _decode_assent),
    MessageType.ASSENT_RESP: (AssentResponse, _encode_assent_resp, _decode_assent_resp),
    MessageType.REQUEST_PAYLOAD: (PayloadRequest, _encode_request_payload, _decode_request_payload),
    MessageType.ADOPT: (AdoptRequest, _encode_adopt, _decode_adopt),
    MessageType.REPLICATE: (ReplicateRequest, _encode_replicate, _decode_replicate),
    MessageType.UPDATE: (UpdateRequest, _encode_update, _decode_update),
    MessageType.LOCAL_RESP: (LocalResponse, _encode_local_resp, _decode_local_resp),
    MessageType.ERROR: (ErrorResponse, _encode_error, _decode_error),
}
_TYPE_OF = {model: msg_type for msg_type, (model, _, _) in _CODECS.items()}


def pack(body, request_id: int = 0, secret: Optional[bytes] = None) -> Message:
    """Wrap a typed body into a Message; local types are signed with `secret`."""
    msg_type = _TYPE_OF[type(body)]
    rest = _CODECS[msg_type][1](body)
    if msg_type.local:
        rest = _mac(secret or b"", msg_type, request_id, rest) + rest
    return Message(type=msg_type, request_id=request_id, body=rest)


def unpack(message: Message, secret: Optional[bytes] = None):
    """Decode the typed body of a message; local types must carry a valid authenticator."""
    body = message.body
    if message.type.local:
        body = _check_mac(secret or b"", message)
    reader = Reader(body)
    try:
        out = _CODECS[message.type][2](reader)
        reader.done()
    except MOError:
        raise
    except (ValueError, UnicodeDecodeError, struct.error, ValidationError) as e:
        raise MalformedBodyError(f"bad {message.type.name} body: {e}") from e
    return out


def error_message(exc: MOError, request_id: int = 0) -> Message:
    return pack(ErrorResponse(code=exc.code, message=exc.message), request_id)
