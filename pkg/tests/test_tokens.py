import pytest

from errors import InvalidExpireError, MalformedTokenError, PayloadTooLargeError
from schemas.token import HomeLocation, Ordering, Token
from services.tokens import token_create, token_decode, token_decode_from, token_encode, token_order, token_verify


def test_create_is_deterministic(home):
    a = token_create(home, 5_000, 0, b"hello")
    b = token_create(home, 5_000, 0, b"hello")
    assert a == b
    assert a.hex() == b.hex()
    assert token_verify(a, b"hello")


def test_every_field_is_hashed(home):
    base = token_create(home, 5_000, 0, b"hello")
    assert token_create(home, 5_001, 0, b"hello").hash != base.hash
    assert token_create(home, 5_000, 1, b"hello").hash != base.hash
    assert token_create(HomeLocation(host="bob", port=4710), 5_000, 0, b"hello").hash != base.hash
    assert token_create(HomeLocation(host="alice", port=4711), 5_000, 0, b"hello").hash != base.hash


def test_encoding_layout(home):
    token = token_create(home, 0x0102030405060708, 0xBEEF, b"x")
    raw = token_encode(token)
    assert raw[0] == 1
    assert raw[1] == len(b"alice")
    assert raw[2:7] == b"alice"
    assert raw[7:9] == (4710).to_bytes(2, "big")
    assert raw[9:17] == bytes(range(1, 9))
    assert raw[17:19] == b"\xbe\xef"
    assert raw[19:] == token.hash
    assert token_decode(raw) == token
    assert token.prefix == token.hash[:4].hex()


def test_decode_from_reports_next_offset(home):
    a = token_create(home, 10, 0, b"a")
    b = token_create(home, 20, 0, b"b")
    buf = a.encoded + b.encoded
    first, offset = token_decode_from(buf)
    second, end = token_decode_from(buf, offset)
    assert (first, second, end) == (a, b, len(buf))


@pytest.mark.parametrize("mangle", [
    lambda raw: b"",
    lambda raw: raw[:1],
    lambda raw: bytes([2]) + raw[1:],
    lambda raw: raw[:1] + b"\x00" + raw[2:],
    lambda raw: raw[:-1],
    lambda raw: raw + b"\x00",
    lambda raw: raw.replace(b"alice", b"ALICE"),
    lambda raw: raw.replace(b"alice", b"al\xffce"),
    lambda raw: raw[:7] + b"\x00\x00" + raw[9:],
    lambda raw: raw[:9] + bytes(8) + raw[17:],
], ids=["empty", "short", "version", "host-len", "truncated", "trailing",
        "uppercase-host", "bad-utf8", "port-zero", "expire-zero"])
def test_decode_rejects_malformed(home, mangle):
    raw = token_create(home, 5_000, 0, b"hello").encoded
    with pytest.raises(MalformedTokenError):
        token_decode(mangle(raw))


def test_limits(home):
    with pytest.raises(PayloadTooLargeError):
        token_create(home, 5_000, 0, bytes(65537))
    token_create(home, 5_000, 0, bytes(65536))
    with pytest.raises(PayloadTooLargeError):
        token_create(home, 5_000, 0, bytes(101), max_payload_size=100)
    with pytest.raises(InvalidExpireError):
        token_create(home, 0, 0, b"x")
    with pytest.raises(InvalidExpireError):
        token_create(home, 2**64, 0, b"x")


def test_order_is_expire_then_hash(home):
    early = Token(home=home, expire=10, hash=b"\xff" * 32)
    late = Token(home=home, expire=11, hash=b"\x00" * 32)
    same_expire = Token(home=home, expire=10, hash=b"\x01" * 32)
    assert token_order(early, late) == Ordering.LESS
    assert token_order(late, early) == Ordering.GREATER
    assert token_order(same_expire, early) == Ordering.LESS
    assert token_order(early, Token(home=home, expire=10, hash=b"\xff" * 32)) == Ordering.EQUAL
    assert sorted([late, early, same_expire]) == [same_expire, early, late]


def test_equal_hashes_at_different_homes_differ(home):
    h = b"\x07" * 32
    a = Token(home=home, expire=10, hash=h)
    b = Token(home=HomeLocation(host="bob", port=4710), expire=10, hash=h)
    assert a != b
    assert token_order(a, b) != Ordering.EQUAL
    assert len({a, b}) == 2


def test_honest_objects_verify_and_corruptions_do_not(rng, home):
    for _ in range(10_000):
        payload = rng.bytes(int(rng.integers(1, 257)))
        token = token_create(home, int(rng.integers(1, 2**40)), int(rng.integers(0, 2**16)), payload)
        assert token_verify(token, payload)

        corrupt = bytearray(payload)
        i = int(rng.integers(0, len(corrupt)))
        corrupt[i] ^= int(rng.integers(1, 256))
        assert not token_verify(token, bytes(corrupt))


def test_distinct_inputs_give_distinct_tokens(rng):
    homes = [HomeLocation(host=h, port=4710 + i) for i, h in enumerate(("alice", "bob", "clare"))]
    inputs = {
        (int(rng.integers(0, 3)), int(rng.integers(1, 2**20)), rng.bytes(8))
        for _ in range(10_000)
    }
    tokens = {token_create(homes[h], expire, 0, payload) for h, expire, payload in inputs}
    assert len(tokens) == len(inputs)
    assert len({t.hash for t in tokens}) == len(inputs)


def test_every_truncation_is_rejected(rng):
    letters = list("abcdefghijklmnopqrstuvwxyz")
    for _ in range(1_000):
        host = "".join(rng.choice(letters, int(rng.integers(1, 24))))
        home = HomeLocation(host=host, port=int(rng.integers(1, 65536)))
        raw = token_create(home, int(rng.integers(1, 2**40)), int(rng.integers(0, 2**16)), rng.bytes(16)).encoded
        for cut in range(len(raw)):
            with pytest.raises(MalformedTokenError):
                token_decode(raw[:cut])


def test_order_is_total(rng, home):
    # few expire dates and a shared hash so ties reach every key
    shared = rng.bytes(32)
    homes = [home, HomeLocation(host="bob", port=4710)]
    tokens = [
        Token(home=homes[i % 2], expire=int(rng.integers(1, 4)), hash=shared if i % 5 == 0 else rng.bytes(32))
        for i in range(40)
    ]
    tokens += tokens[:5]
    for a in tokens:
        for b in tokens:
            ab = token_order(a, b)
            assert ab == -token_order(b, a)
            assert (ab == Ordering.EQUAL) == (a == b)
            if ab == Ordering.GREATER:
                continue
            for c in tokens:
                if token_order(b, c) != Ordering.GREATER:
                    assert token_order(a, c) != Ordering.GREATER
                if ab == Ordering.LESS and token_order(b, c) == Ordering.LESS:
                    assert token_order(a, c) == Ordering.LESS
