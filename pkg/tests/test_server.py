from collections import OrderedDict

import pytest

from config import server_config
from errors import (
    AdoptRefusedError,
    NotFoundError,
    UnknownObjectError,
    UnknownPolicyError,
    UnreachableHomeError,
    VerifyFailedError,
    WrongHomeError,
)
from schemas.message import (
    AssentRequest,
    AssentStatus,
    BusyResponse,
    ErrorResponse,
    FetchStatus,
    PayloadRequest,
    ReplicateAction,
    ReplicateRequest,
)
from schemas.mobject import DistributedPart
from schemas.replication import PolicyKind, flooding, sustain
from schemas.token import HomeLocation
from services.mobject import mo_new
from services.server import Channel, MOServer
from services.store import StoreFile
from services.transport import LoopbackTransport
from services.wire import decode_message, encode_message, pack, unpack

BOB = HomeLocation(host="bob", port=4710)
CLIENTS = [HomeLocation(host=f"c{i:02d}", port=4710) for i in range(1, 21)]


def loopback(make_server, *names, **overrides) -> tuple[LoopbackTransport, list[MOServer]]:
    net = LoopbackTransport()
    servers = [
        net.attach(make_server(name, send=net.sender(HomeLocation(host=name, port=4710)), **overrides))
        for name in names
    ]
    return net, servers


def adopt(server: MOServer, expire: int, text: bytes = b"payload"):
    mo = mo_new(server.address, expire, text)
    server.handle_adopt(mo.distributed_part())
    return mo


# ── Home guarantee and expiry ────────────────────────────────────────────────
def test_home_serves_until_expire_and_keeps_through_grace(make_server, clock):
    server = make_server("alice")
    grace = server.config.grace_period_ms
    assert (grace, server.config.clock_skew_bound_ms) == (30_000, 10_000)
    expire = clock.now_ms() + 60_000
    mo = adopt(server, expire)

    for at in range(clock.now_ms(), expire + 1, 5_000):
        clock.set(at)
        server.gc_sweep()
        reply = server.handle_fetch(BOB, mo.token)
        assert reply.status == FetchStatus.FOUND
        assert reply.part.payload == mo.payload.to_bytes()

    assert server.gc_sweep(expire + grace).store_removed == []
    assert mo.token in server.store
    assert server.gc_sweep(expire + grace + 1).store_removed == [mo.token]
    assert server.handle_fetch(BOB, mo.token).status == FetchStatus.NOT_FOUND


def test_sustained_copy_outlives_its_expire(make_server, clock):
    _, (alice, bob) = loopback(make_server, "alice", "bob")
    grace = alice.config.grace_period_ms
    expire = clock.now_ms() + 60_000
    until = expire + 120_000
    mo = adopt(alice, expire)

    bob.handle_replicate(ReplicateRequest.start(mo.token, sustain(until)))
    assert mo.token in bob.store
    assert bob.store[mo.token].payload == mo.payload.to_bytes()

    clock.set(expire + grace + 1)
    assert alice.gc_sweep().store_removed == [mo.token]
    assert bob.gc_sweep().store_removed == []

    clock.set(until)
    assert bob.handle_fetch(CLIENTS[0], mo.token).status == FetchStatus.FOUND
    assert bob.gc_sweep(until + grace).store_removed == []
    assert bob.gc_sweep(until + grace + 1).store_removed == [mo.token]


def test_sustain_is_capped(make_server, clock):
    _, (alice, bob) = loopback(make_server, "alice", "bob", max_sustain_ms=1_000)
    mo = adopt(alice, clock.now_ms() + 60_000)
    bob.handle_replicate(ReplicateRequest.start(mo.token, sustain(clock.now_ms() + 10**9)))
    assert bob.store[mo.token].sustain_until == clock.now_ms() + 1_000


def test_cache_entries_expire_too(make_server, clock, make_token):
    server = make_server("alice")
    token = make_token(expire=clock.now_ms() + 10, at=BOB)
    server.cache_insert(DistributedPart(token=token))
    grace = server.config.grace_period_ms
    assert server.gc_sweep(token.expire + grace).cache_removed == []
    assert server.gc_sweep(token.expire + grace + 1).cache_removed == [token]
    assert server.lookup(token) is None


# ── Adopt / update / replicate ───────────────────────────────────────────────
def test_adopt_checks(make_server, clock):
    server = make_server("alice")
    later = clock.now_ms() + 60_000
    with pytest.raises(WrongHomeError):
        server.handle_adopt(mo_new(BOB, later, b"x").distributed_part())
    mo = mo_new(server.address, later, b"x")
    with pytest.raises(VerifyFailedError):
        server.handle_adopt(DistributedPart(token=mo.token, payload=b"\x00y"))
    with pytest.raises(VerifyFailedError):
        server.handle_adopt(DistributedPart(token=mo.token))
    with pytest.raises(AdoptRefusedError):
        server.handle_adopt(mo_new(server.address, clock.now_ms(), b"x").distributed_part())

    server.handle_adopt(mo.distributed_part())
    server.handle_adopt(mo.distributed_part())
    assert len(server.store) == 1
    assert server.store[mo.token].home


def test_update_grows_held_clusters_only(make_server, clock, make_token):
    server = make_server("alice")
    mo = adopt(server, clock.now_ms() + 60_000)
    child = make_token()
    assert server.handle_update(mo.token, [child]) == [child]
    assert server.handle_update(mo.token, [child]) == []
    assert list(server.lookup(mo.token).cluster) == [child]
    with pytest.raises(UnknownObjectError):
        server.handle_update(make_token(), [child])


def test_replicate_rejects_unknown_kinds(make_server, clock):
    server = make_server("alice")
    mo = adopt(server, clock.now_ms() + 60_000)
    with pytest.raises(UnknownPolicyError):
        server.handle_replicate(ReplicateRequest(token=mo.token, action=ReplicateAction.START, kind=9))
    with pytest.raises(UnknownPolicyError):
        server.handle_replicate(ReplicateRequest(token=mo.token, action=ReplicateAction.STOP, kind=9))


def test_only_flooding_copies_take_pushed_tokens(make_server, clock, make_token):
    server = make_server("alice")
    mo = adopt(server, clock.now_ms() + 60_000)
    pushed = [make_token() for _ in range(3)]

    def push():
        return server.handle_assent(AssentRequest(sender=BOB, token=mo.token, sample=pushed))

    reply = push()
    assert reply.status == AssentStatus.OK
    assert not reply.accepted
    assert len(server.lookup(mo.token).cluster) == 0

    server.handle_replicate(ReplicateRequest.start(mo.token, sustain(clock.now_ms() + 100_000)))
    assert not push().accepted
    assert len(server.lookup(mo.token).cluster) == 0

    server.handle_replicate(ReplicateRequest.start(mo.token, flooding(0)))
    assert push().accepted
    assert list(server.lookup(mo.token).cluster) == sorted(pushed)


def test_stopping_all_policies_unpins_a_replica(make_server, clock):
    _, (alice, bob) = loopback(make_server, "alice", "bob")
    mo = adopt(alice, clock.now_ms() + 60_000)
    bob.handle_replicate(ReplicateRequest.start(mo.token, flooding(0)))
    bob.handle_replicate(ReplicateRequest.start(mo.token, sustain(clock.now_ms() + 100_000)))
    assert set(bob.store[mo.token].repl.policies) == {PolicyKind.FLOODING, PolicyKind.SUSTAIN}
    assert bob.flooding_tokens() == [mo.token]

    bob.handle_replicate(ReplicateRequest.stop(mo.token, PolicyKind.FLOODING))
    assert mo.token in bob.store
    bob.handle_replicate(ReplicateRequest.stop(mo.token))
    assert mo.token not in bob.store
    assert bob.lookup(mo.token).payload == mo.payload.to_bytes()


# ── Channels ─────────────────────────────────────────────────────────────────
def test_local_requests_are_refused_on_the_remote_channel(make_server, clock):
    server = make_server("alice")
    mo = adopt(server, clock.now_ms() + 60_000)
    request = encode_message(pack(PayloadRequest(token=mo.token), 5, server.secret))

    refused = unpack(decode_message(server.handle_frame(request, Channel.REMOTE)))
    assert isinstance(refused, ErrorResponse)
    assert refused.code == "untrusted-channel"

    served = decode_message(server.handle_frame(request, Channel.LOCAL))
    assert served.request_id == 5
    assert unpack(served, server.secret).part.token == mo.token
    assert server.stats["errors"] == 1


# ── Remote fetch, BUSY and ditto ─────────────────────────────────────────────
def test_proxy_fetch_caches_and_feeds_ditto(make_server, clock):
    _, (alice, bob) = loopback(make_server, "alice", "bob")
    mo = adopt(alice, clock.now_ms() + 60_000)

    part = bob.handle_request_payload(mo.token)
    assert part.payload == mo.payload.to_bytes()
    bob.handle_request_payload(mo.token)
    assert alice.stats["fetch"] == 1
    assert bob.stats["remote_fetch"] == 1
    assert mo.token in dict((e.token, loc) for loc, e in bob.entries())

    assert alice.handle_fetch(CLIENTS[0], mo.token).ditto == [bob.address]


def test_unreachable_home_is_retried_then_reported(make_server, clock):
    net, (alice, bob) = loopback(make_server, "alice", "bob", fetch_retries=3, retry_delay_ms=100)
    mo = adopt(alice, clock.now_ms() + 60_000)
    net.set_offline(alice.address)
    start = clock.now_ms()
    with pytest.raises(UnreachableHomeError):
        bob.handle_request_payload(mo.token)
    assert clock.now_ms() - start == 100 + 200


def test_busy_beyond_threshold(make_server, clock):
    server = make_server("alice", busy_threshold=2, busy_window_ms=100)
    mo = adopt(server, clock.now_ms() + 60_000)
    c1, c2, c3, c4 = CLIENTS[:4]

    assert server.handle_fetch(c1, mo.token).ditto == []
    assert server.handle_fetch(c2, mo.token).ditto == [c1]
    busy = server.handle_fetch(c3, mo.token)
    assert isinstance(busy, BusyResponse)
    assert busy.ditto == [c2, c1]
    assert server.stats["busy"] == 1

    clock.advance(101)
    again = server.handle_fetch(c4, mo.token)
    assert again.status == FetchStatus.FOUND
    assert again.ditto == [c3, c2, c1]


def test_busy_can_be_disabled_and_ditto_is_bounded(make_server, clock):
    server = make_server("alice", busy_threshold=0, busy_window_ms=100, ditto_max=3)
    mo = adopt(server, clock.now_ms() + 60_000)
    replies = [server.handle_fetch(c, mo.token) for c in CLIENTS]
    assert all(r.status == FetchStatus.FOUND for r in replies)
    assert replies[-1].ditto == [CLIENTS[-2], CLIENTS[-3], CLIENTS[-4]]


def test_busy_home_reroutes_to_a_ditto_candidate(make_server, clock):
    _, (alice, bob, clare) = loopback(make_server, "alice", "bob", "clare", busy_threshold=1, busy_window_ms=1_000)
    mo = adopt(alice, clock.now_ms() + 60_000)
    bob.handle_request_payload(mo.token)
    part = clare.handle_request_payload(mo.token)
    assert part.payload == mo.payload.to_bytes()
    assert alice.stats["busy"] == 1
    assert clare.stats["rerouted"] == 1
    assert bob.stats["fetch_found"] == 1


def test_ditto_history_only_tracks_held_copies(make_server, clock, make_token):
    server = make_server("alice")
    for client in CLIENTS:
        for _ in range(50):
            assert server.handle_fetch(client, make_token()).status == FetchStatus.NOT_FOUND
    assert server._requesters == {}

    cached = make_token(expire=clock.now_ms() + 10, at=BOB)
    server.cache_insert(DistributedPart(token=cached))
    server.handle_fetch(CLIENTS[0], cached)
    assert list(server._requesters) == [cached]
    server.gc_sweep(cached.expire + server.config.grace_period_ms + 1)
    assert server._requesters == {}


def test_tampered_remote_payload_is_refused(make_server, clock):
    alice = make_server("alice")
    mo = adopt(alice, clock.now_ms() + 60_000)

    def tampering(addr, message):
        reply = decode_message(alice.handle_frame(encode_message(message), Channel.REMOTE))
        found = unpack(reply)
        bad = found.part.payload[:-1] + bytes([found.part.payload[-1] ^ 0x01])
        forged = found.model_copy(update={"part": DistributedPart(token=found.part.token, payload=bad)})
        return pack(forged, reply.request_id)

    bob = make_server("bob", send=tampering)
    with pytest.raises(NotFoundError):
        bob.handle_request_payload(mo.token)
    assert bob.stats["verify_failed"] == 1
    assert bob.lookup(mo.token) is None
    assert bob.stats_view()["cache_size"] == 0


# ── Cache ────────────────────────────────────────────────────────────────────
def test_cache_eviction_matches_lru_oracle(make_server, make_token, rng):
    server = make_server("alice", cache_capacity=64)
    pool = [make_token(at=BOB) for _ in range(200)]
    oracle: OrderedDict = OrderedDict()
    expected = []
    for _ in range(10_000):
        token = pool[min(int(rng.exponential(60)), len(pool) - 1)]
        if server.lookup(token) is None:
            server.cache_insert(DistributedPart(token=token))
            oracle[token] = None
            if len(oracle) > 64:
                expected.append(oracle.popitem(last=False)[0])
        else:
            oracle.move_to_end(token)
    assert len(expected) > 100
    assert list(server.evicted) == expected
    assert [e.token for loc, e in server.entries() if loc == "cache"] == sorted(oracle)
    assert server.stats["evictions"] == len(expected)


def test_store_entries_are_never_evicted(make_server, clock, make_token):
    server = make_server("alice", cache_capacity=2)
    mo = adopt(server, clock.now_ms() + 60_000)
    for _ in range(5):
        server.cache_insert(DistributedPart(token=make_token(at=BOB)))
    assert server.lookup(mo.token) is not None
    assert server.stats_view()["cache_size"] == 2


# ── Persistence ──────────────────────────────────────────────────────────────
def test_store_survives_restart(tmp_path, clock, scheduler, make_token):
    config = server_config(listen="alice:4710", local_secret="s", flood_interval_ms=0)
    path = str(tmp_path / "alice.db")

    first = MOServer(config, None, clock, scheduler, store_file=StoreFile(path))
    mo = adopt(first, clock.now_ms() + 60_000)
    child = make_token()
    first.handle_update(mo.token, [child])
    first.close()

    second = MOServer(config, None, clock, scheduler, store_file=StoreFile(path))
    entry = second.lookup(mo.token)
    assert entry.home
    assert entry.payload == mo.payload.to_bytes()
    assert list(entry.cluster) == [child]

    clock.set(mo.token.expire + config.grace_period_ms + 1)
    second.gc_sweep()
    second.close()
    third = MOServer(config, None, clock, scheduler, store_file=StoreFile(path))
    assert third.store == {}
    third.close()
