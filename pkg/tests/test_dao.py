import pytest

from errors import ExpireOrderError, NotFoundError
from schemas.replication import flooding
from schemas.token import MAX_EXPIRE
from services.cluster import Cluster
from services.dao import (
    FILE_MARK,
    DaoRole,
    Levels,
    _later,
    file_blocks,
    file_create,
    file_open,
    file_read,
    file_write_block,
    subgraph_levels,
    subgraph_tokens,
)
from services.simnet import SimNet


def two_nodes(**overrides) -> SimNet:
    net = SimNet(seed=5)
    net.add_server("a", flood_delay_ms=500, **overrides)
    net.add_server("b", flood_delay_ms=500, **overrides)
    return net


def write_all(session, ref, writes) -> list:
    return [file_write_block(session, ref, index, data) for index, data in writes]


def test_subgraph_levels(make_token):
    f, b1, b2, c1, c3, c5 = (make_token() for _ in range(6))
    graph = {f: Cluster([b1, b2]), b1: Cluster([c1, c3]), b2: Cluster([c5])}

    assert subgraph_levels(f, 0, graph.get) == {f: Levels(cluster=0)}
    assert subgraph_levels(f, 1, graph.get)[b1] == Levels(payload=1)
    two = subgraph_levels(f, 2, graph.get)
    assert two[b2] == Levels(cluster=2, payload=1)
    assert c1 not in two
    three = subgraph_levels(f, 3, graph.get)
    assert three[c5] == Levels(payload=3)
    assert three[f] == Levels(cluster=0)
    assert subgraph_tokens(f, 3, graph.get) == {
        (f, False), (b1, True), (b2, True), (c1, True), (c3, True), (c5, True),
    }


def test_subgraph_levels_tolerates_cycles_and_unknown_members(make_token):
    f, b, stranger = make_token(), make_token(), make_token()
    graph = {f: Cluster([b]), b: Cluster([f, stranger])}
    levels = subgraph_levels(f, 5, graph.get)
    assert levels[f] == Levels(cluster=0)
    assert levels[stranger] == Levels(cluster=4, payload=3)


def test_write_replaces_and_appends_blocks():
    net = two_nodes()
    s = net.sessions["a"]
    ref = file_create(s, b"notes")
    assert ref.role == DaoRole.FILE
    assert s.get_payload(ref.root) == FILE_MARK + b"notes"
    assert file_read(s, ref) == b""

    first = write_all(s, ref, [(0, b"one"), (1, b"two"), (0, b"ONE")])
    assert file_read(s, ref) == b"ONEtwo"
    assert first[0].expire < first[2].expire

    blocks = file_blocks(s, ref)
    assert [b.role for b in blocks] == [DaoRole.BLOCK, DaoRole.BLOCK]
    assert blocks[0].token.expire < blocks[1].token.expire
    with pytest.raises(NotFoundError):
        file_write_block(s, ref, 3, b"gap")


def test_expire_dates_run_out():
    assert _later(10, 5) == 11
    assert _later(10, 50) == 51
    with pytest.raises(ExpireOrderError):
        _later(MAX_EXPIRE, 0)


@pytest.mark.parametrize("level, fetches", [(2, 1), (3, 0)])
def test_replication_level_bounds_remote_fetches(level, fetches):
    net = two_nodes()
    sa, sb = net.sessions["a"], net.sessions["b"]
    f = file_create(sa)
    write_all(sa, f, [(0, b"c1"), (0, b"c2"), (0, b"c3"), (1, b"c4"), (1, b"c5")])
    sa.put_repl(f.root, flooding(level))
    fb = file_open(sb, f.token)
    sb.put_repl(fb.root, flooding(level))
    net.settle(5_000)

    assert file_read(sa, f) == b"c3c5"
    assert file_read(sb, fb) == b"c3c5"

    file_write_block(sa, f, 1, b"c6")
    net.settle(5_000)
    before = net.count("FETCH", src="b", dst="a")
    assert file_read(sb, fb) == b"c3c6"
    assert net.count("FETCH", src="b", dst="a") - before == fetches
    assert file_read(sa, f) == b"c3c6"
