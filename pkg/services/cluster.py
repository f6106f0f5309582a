"""
Append-only clusters of tokens, kept sorted by copy-expire date.

A Cluster value is immutable: `add` and `merge` return new values. The only
way a cluster changes is by gaining members.

Difference detection works on a ClusterDigest: members are cut into at most
64 contiguous runs balanced by count (a run never splits one expire date), and
each run carries the xor of its member hashes. `diff` compares local members
against those runs and may over-send; adds are idempotent so that is harmless.
"""
import bisect
import struct
from typing import Iterable, Sequence

from errors import MalformedBodyError
from schemas.cluster import EMPTY_DIGEST, MAX_RANGES, ClusterDigest, DigestRange
from schemas.token import Token
from services.tokens import token_decode_from

_RANGE = struct.Struct(">QQI32s")
_ZERO = bytes(32)
MIN_TOKEN_SIZE = 1 + 1 + 1 + 2 + 8 + 2 + 32


def xor_fold(tokens: Iterable[Token]) -> bytes:
    acc = 0
    for t in tokens:
        acc ^= int.from_bytes(t.hash, "big")
    return acc.to_bytes(32, "big")


class Cluster:
    """Grow-only token set with a total order (see token_order)."""

    __slots__ = ("_members", "_index", "_expires")

    def __init__(self, tokens: Iterable[Token] = ()):
        members = tuple(sorted(set(tokens)))
        self._members = members
        self._index = frozenset(members)
        self._expires = [t.expire for t in members]

    @classmethod
    def _from_sorted(cls, members: Sequence[Token]) -> "Cluster":
        c = cls.__new__(cls)
        c._members = tuple(members)
        c._index = frozenset(members)
        c._expires = [t.expire for t in members]
        return c

    # ── Set behaviour ────────────────────────────────────────────────────
    @property
    def members(self) -> tuple[Token, ...]:
        return self._members

    def __len__(self) -> int:
        return len(self._members)

    def __iter__(self):
        return iter(self._members)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Cluster):
            return NotImplemented
        return self._members == other._members

    def __hash__(self) -> int:
        return hash(self._members)

    def __repr__(self) -> str:
        return f"Cluster([{', '.join(t.prefix for t in self._members)}])"

    def last(self) -> Token | None:
        return self._members[-1] if self._members else None

    # ── Operations ───────────────────────────────────────────────────────
    def add(self, token: Token) -> tuple["Cluster", bool]:
        """Return (cluster with token, added); added is False if it was already present."""
        if token in self._index:
            return self, False
        i = bisect.bisect_left(self._members, token)
        return Cluster._from_sorted(self._members[:i] + (token,) + self._members[i:]), True

    def add_all(self, tokens: Iterable[Token]) -> tuple["Cluster", list[Token]]:
        """Add many tokens at once; returns the new cluster and the tokens actually added."""
        fresh = sorted({t for t in tokens if t not in self._index})
        if not fresh:
            return self, []
        return Cluster._from_sorted(sorted(self._members + tuple(fresh))), fresh

    def merge(self, other: "Cluster") -> tuple["Cluster", list[Token], list[Token]]:
        """Return (self ∪ other, other \\ self, self \\ other), lists in token order."""
        missing_from_self = [t for t in other._members if t not in self._index]
        missing_from_other = [t for t in self._members if t not in other._index]
        if not missing_from_self:
            return self, [], missing_from_other
        merged = Cluster._from_sorted(sorted(self._members + tuple(missing_from_self)))
        return merged, missing_from_self, missing_from_other

    def new_since(self, tracker: "Cluster") -> list[Token]:
        """Members the tracker does not know yet, in token order."""
        return [t for t in self._members if t not in tracker]

    def digest(self) -> ClusterDigest:
        members = self._members
        n = len(members)
        if n == 0:
            return EMPTY_DIGEST
        target = -(-n // MAX_RANGES)
        ranges = []
        start = 0
        for i in range(1, n + 1):
            if i == n or (i - start >= target and members[i].expire != members[i - 1].expire):
                run = members[start:i]
                ranges.append(DigestRange(
                    expire_lo=run[0].expire,
                    expire_hi=run[-1].expire,
                    count=len(run),
                    fold=xor_fold(run),
                ))
                start = i
        return ClusterDigest(total_count=n, ranges=ranges)

    def diff(self, remote_digest: ClusterDigest, remote_sample: Iterable[Token] = ()) -> list[Token]:
        """
        Tokens to send so the remote cluster ends up holding everything we hold.

        remote_sample lists tokens known to be in the remote cluster. Every local
        member absent remotely is returned; some present ones may be too.
        """
        sample = set(remote_sample)
        candidates = [t for t in self._members if t not in sample]
        if not candidates:
            return []
        if len(sample) >= remote_digest.total_count:
            return candidates

        known = sorted(self._index | sample)
        known_expires = [t.expire for t in known]
        ranges = remote_digest.ranges
        los = [r.expire_lo for r in ranges]

        send: list[Token] = []
        by_range: dict[int, list[Token]] = {}
        for t in candidates:
            i = bisect.bisect_right(los, t.expire) - 1
            if i < 0 or t.expire > ranges[i].expire_hi:
                send.append(t)
            else:
                by_range.setdefault(i, []).append(t)

        for i, cands in by_range.items():
            r = ranges[i]
            lo = bisect.bisect_left(known_expires, r.expire_lo)
            hi = bisect.bisect_right(known_expires, r.expire_hi)
            delta = (hi - lo) - r.count
            x = bytes(a ^ b for a, b in zip(xor_fold(known[lo:hi]), r.fold))
            if delta == 0 and x == _ZERO:
                continue
            # The remote run should be a subset of what we know; a surplus of
            # one or two members can be pinned down from the fold alone.
            if delta == 1:
                hit = [c for c in cands if c.hash == x]
                if hit:
                    send.extend(hit)
                    continue
            elif delta == 2:
                pair = _find_pair(cands, x)
                if pair:
                    send.extend(pair)
                    continue
            send.extend(cands)
        return sorted(send)

    # ── Wire form ────────────────────────────────────────────────────────
    def to_bytes(self) -> bytes:
        return encode_token_list(self._members)

    @classmethod
    def decode_from(cls, buf: bytes | memoryview, offset: int = 0) -> tuple["Cluster", int]:
        tokens, end = decode_token_list(buf, offset)
        return cls(tokens), end


def _find_pair(cands: list[Token], x: bytes) -> list[Token] | None:
    by_hash = {c.hash: c for c in cands}
    target = int.from_bytes(x, "big")
    for c in cands:
        other = (target ^ int.from_bytes(c.hash, "big")).to_bytes(32, "big")
        if other != c.hash and other in by_hash:
            return [c, by_hash[other]]
    return None


def encode_token_list(tokens: Sequence[Token]) -> bytes:
    return struct.pack(">I", len(tokens)) + b"".join(t.encoded for t in tokens)


def decode_token_list(buf: bytes | memoryview, offset: int = 0) -> tuple[list[Token], int]:
    buf = memoryview(buf)
    if len(buf) - offset < 4:
        raise MalformedBodyError("short token list")
    (count,) = struct.unpack_from(">I", buf, offset)
    offset += 4
    if count * MIN_TOKEN_SIZE > len(buf) - offset:
        raise MalformedBodyError(f"token list claims {count} tokens")
    tokens = []
    for _ in range(count):
        t, offset = token_decode_from(buf, offset)
        tokens.append(t)
    return tokens, offset


def encode_digest(digest: ClusterDigest) -> bytes:
    out = [struct.pack(">IB", digest.total_count, len(digest.ranges))]
    for r in digest.ranges:
        out.append(_RANGE.pack(r.expire_lo, r.expire_hi, r.count, r.fold))
    return b"".join(out)


def decode_digest(buf: bytes | memoryview, offset: int = 0) -> tuple[ClusterDigest, int]:
    buf = memoryview(buf)
    if len(buf) - offset < 5:
        raise MalformedBodyError("short digest")
    total, n = struct.unpack_from(">IB", buf, offset)
    offset += 5
    if n > MAX_RANGES or len(buf) - offset < n * _RANGE.size:
        raise MalformedBodyError(f"bad digest range count {n}")
    ranges = []
    for _ in range(n):
        lo, hi, count, fold = _RANGE.unpack_from(buf, offset)
        offset += _RANGE.size
        if count == 0 or hi < lo:
            raise MalformedBodyError("bad digest range")
        ranges.append(DigestRange(expire_lo=lo, expire_hi=hi, count=count, fold=fold))
    return ClusterDigest(total_count=total, ranges=ranges), offset
