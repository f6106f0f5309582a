"""
Token construction, verification, ordering and binary encoding.

Wire layout (big-endian):
    version(1) | host_len(1) | host(host_len) | port(2) | expire(8) | aux(2) | hash(32)

The hash input is version | host_len | host | port | expire | aux | payload.
"""
import hashlib
import struct

from pydantic import ValidationError

from errors import InvalidExpireError, MalformedTokenError, PayloadTooLargeError
from schemas.token import HASH_SIZE, MAX_EXPIRE, TOKEN_VERSION, HomeLocation, Ordering, Token

DEFAULT_MAX_PAYLOAD = 65536
# The one place the digest primitive is chosen.
DIGEST = hashlib.sha256

_TAIL = struct.Struct(">HQH")  # port, expire, aux


def encode_home(home: HomeLocation) -> bytes:
    host = home.host.encode("utf-8")
    return bytes([len(host)]) + host + struct.pack(">H", home.port)


def _digest(version: int, home: HomeLocation, expire: int, aux: int, payload: bytes) -> bytes:
    h = DIGEST()
    h.update(bytes([version]))
    h.update(encode_home(home))
    h.update(struct.pack(">QH", expire, aux))
    h.update(payload)
    return h.digest()


def token_create(
    home: HomeLocation,
    expire: int,
    aux: int,
    payload: bytes,
    max_payload_size: int = DEFAULT_MAX_PAYLOAD,
) -> Token:
    """Compute the token of a payload locally; identical inputs give identical tokens."""
    if len(payload) > max_payload_size:
        raise PayloadTooLargeError(f"payload of {len(payload)} bytes exceeds {max_payload_size}")
    if not 0 < expire <= MAX_EXPIRE:
        raise InvalidExpireError(f"expire {expire} out of range")
    return Token(
        version=TOKEN_VERSION,
        home=home,
        expire=expire,
        aux=aux,
        hash=_digest(TOKEN_VERSION, home, expire, aux, bytes(payload)),
    )


def token_verify(token: Token, payload: bytes) -> bool:
    """True iff the payload is the one the token identifies."""
    if token.version != TOKEN_VERSION:
        return False
    return _digest(token.version, token.home, token.expire, token.aux, bytes(payload)) == token.hash


def token_encode(token: Token) -> bytes:
    return (
        bytes([token.version])
        + encode_home(token.home)[:-2]
        + _TAIL.pack(token.home.port, token.expire, token.aux)
        + token.hash
    )


def token_decode_from(buf: bytes | memoryview, offset: int = 0) -> tuple[Token, int]:
    """Decode one token starting at offset; returns the token and the next offset."""
    buf = memoryview(buf)
    if len(buf) - offset < 2:
        raise MalformedTokenError("short buffer")
    version = buf[offset]
    if version != TOKEN_VERSION:
        raise MalformedTokenError(f"bad version {version}")
    host_len = buf[offset + 1]
    if host_len == 0:
        raise MalformedTokenError("bad host length 0")
    start = offset + 2
    end = start + host_len + _TAIL.size + HASH_SIZE
    if len(buf) < end:
        raise MalformedTokenError("short buffer")
    raw_host = bytes(buf[start:start + host_len])
    port, expire, aux = _TAIL.unpack_from(buf, start + host_len)
    digest = bytes(buf[end - HASH_SIZE:end])
    try:
        host = raw_host.decode("utf-8")
        token = Token(version=version, home=HomeLocation(host=host, port=port),
                      expire=expire, aux=aux, hash=digest)
    except (UnicodeDecodeError, ValidationError) as e:
        raise MalformedTokenError(f"invalid token field: {e}") from e
    if token.home.host != host:
        raise MalformedTokenError("host is not in canonical form")
    return token, end


def token_decode(buf: bytes | memoryview) -> Token:
    """Decode exactly one token; trailing or missing bytes are malformed."""
    token, end = token_decode_from(buf)
    if end != len(buf):
        raise MalformedTokenError(f"{len(buf) - end} trailing bytes")
    return token


def token_order(a: Token, b: Token) -> Ordering:
    ka, kb = a.sort_key, b.sort_key
    if ka < kb:
        return Ordering.LESS
    if ka > kb:
        return Ordering.GREATER
    return Ordering.EQUAL
