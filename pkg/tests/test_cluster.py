import numpy as np
import pytest

from errors import MalformedBodyError
from schemas.cluster import EMPTY_DIGEST, MAX_RANGES, ClusterDigest
from schemas.token import HomeLocation, Token
from services.cluster import Cluster, decode_digest, decode_token_list, encode_digest, xor_fold

HOMES = [HomeLocation(host=h, port=4710) for h in ("alice", "bob", "clare")]


def token_pool(seed: int, size: int) -> list[Token]:
    rng = np.random.default_rng(seed)
    return [
        Token(home=HOMES[i % 3], expire=int(rng.integers(1, 10**9)), hash=rng.bytes(32))
        for i in range(size)
    ]


def pick(rng, pool: list[Token], *sizes: int) -> list[list[Token]]:
    """Disjoint random groups from the pool."""
    idx = rng.choice(len(pool), sum(sizes), replace=False)
    out, start = [], 0
    for n in sizes:
        out.append([pool[i] for i in idx[start:start + n]])
        start += n
    return out


def assent(a: Cluster, b: Cluster, a_knows: ClusterDigest = EMPTY_DIGEST) -> tuple[Cluster, Cluster, int, ClusterDigest]:
    """One assent round trip from a to b; returns both clusters, tokens sent and b's digest."""
    sample = a.diff(a_knows)
    b, _ = b.add_all(sample)
    missing = b.diff(a.digest(), sample)
    a, _ = a.add_all(missing)
    return a, b, len(sample) + len(missing), b.digest()


def test_add_is_idempotent(make_token):
    t = make_token()
    c, added = Cluster().add(t)
    again, added_again = c.add(t)
    assert added and not added_again
    assert again is c
    assert len(c) == 1 and t in c


def test_members_are_sorted(make_token):
    tokens = [make_token() for _ in range(50)]
    c = Cluster(tokens)
    assert list(c) == sorted(tokens)
    assert c.last() == max(tokens)
    assert Cluster().last() is None


def test_merge_reports_both_sides(make_token):
    shared = [make_token() for _ in range(5)]
    only_a = [make_token() for _ in range(3)]
    only_b = [make_token() for _ in range(2)]
    a, b = Cluster(shared + only_a), Cluster(shared + only_b)
    merged, gained, they_lack = a.merge(b)
    assert merged == Cluster(shared + only_a + only_b)
    assert gained == sorted(only_b)
    assert they_lack == sorted(only_a)
    assert a == Cluster(shared + only_a)


def test_new_since(make_token):
    tokens = sorted(make_token() for _ in range(6))
    c = Cluster(tokens)
    assert c.new_since(Cluster(tokens[:2])) == tokens[2:]
    assert c.new_since(c) == []


def test_digest_shape(make_token):
    assert Cluster().digest() == EMPTY_DIGEST
    small = Cluster(make_token() for _ in range(10))
    assert [r.count for r in small.digest().ranges] == [1] * 10

    big = Cluster(make_token() for _ in range(1000))
    d = big.digest()
    assert d.total_count == 1000
    assert len(d.ranges) <= MAX_RANGES
    assert sum(r.count for r in d.ranges) == 1000
    assert xor_fold(big) == xor_fold(
        Token(home=HOMES[0], expire=1, hash=r.fold) for r in d.ranges
    )


def test_digest_never_splits_an_expire_date(make_token):
    tokens = [make_token(expire=100 + i // 40) for i in range(400)]
    for r in Cluster(tokens).digest().ranges:
        assert r.expire_lo == r.expire_hi
        assert r.count == 40


def test_digest_wire_form(make_token):
    d = Cluster(make_token() for _ in range(300)).digest()
    raw = encode_digest(d)
    assert decode_digest(raw) == (d, len(raw))
    with pytest.raises(MalformedBodyError):
        decode_digest(raw[:4] + bytes([MAX_RANGES + 1]) + raw[5:])
    with pytest.raises(MalformedBodyError):
        decode_digest(raw[:-1])


def test_token_list_claims_are_bounded():
    with pytest.raises(MalformedBodyError):
        decode_token_list((2**31).to_bytes(4, "big"))


def test_identical_clusters_send_nothing(make_token):
    c = Cluster(make_token() for _ in range(500))
    assert c.diff(c.digest()) == []
    assert Cluster().diff(c.digest()) == []
    assert c.diff(EMPTY_DIGEST) == list(c)


def test_one_exchange_converges():
    pool = token_pool(2, 1600)
    rng = np.random.default_rng(20)
    for _ in range(1000):
        n_base, n_a, n_b = (int(x) for x in rng.integers(0, [400, 113, 113]))
        base, xa, xb = pick(rng, pool, n_base, n_a, n_b)
        a, b = Cluster(base + xa), Cluster(base + xb)
        a, b, _, b_digest = assent(a, b)
        assert a == b == Cluster(base + xa + xb)
        a, b, sent, _ = assent(a, b, b_digest)
        assert sent == 0
        assert a == b


def test_replicas_converge_to_the_union():
    pool = token_pool(3, 4000)
    rng = np.random.default_rng(30)
    for _ in range(500):
        replicas = [Cluster(), Cluster(), Cluster()]
        added: set[Token] = set()
        fresh = iter(pool[i] for i in rng.permutation(len(pool))[:40])
        for _ in range(int(rng.integers(1, 40))):
            i, j = (int(x) for x in rng.integers(0, 3, size=2))
            before = set(replicas[i])
            if rng.random() < 0.6:
                t = next(fresh)
                replicas[i], _ = replicas[i].add(t)
                added.add(t)
            else:
                replicas[i], _, _ = replicas[i].merge(replicas[j])
            assert before <= set(replicas[i])
        for i, j in [(0, 1), (1, 2), (2, 0), (0, 1)]:
            replicas[i], replicas[j], _, _ = assent(replicas[i], replicas[j])
        assert replicas[0] == replicas[1] == replicas[2] == Cluster(added)


def test_diff_covers_the_difference_and_stays_lean():
    pool = token_pool(4, 2000)
    rng = np.random.default_rng(40)
    exact_total = sent_total = 0
    for _ in range(10_000):
        n_base, n_a, n_b = (int(x) for x in rng.integers(0, [256, 9, 9]))
        base, xa, xb = pick(rng, pool, n_base, n_a, n_b)
        local, remote = Cluster(base + xa), Cluster(base + xb)
        digest = remote.digest()

        blind = local.diff(digest)
        assert set(xa) <= set(blind)

        # With the remote's fresh tokens as the sample, as an assent carries them.
        sent = local.diff(digest, xb)
        assert set(xa) <= set(sent)
        assert not set(sent) & set(xb)
        exact_total += len(xa)
        sent_total += len(sent)
    assert sent_total <= 2 * exact_total


def test_shuffled_adds_match_a_sorted_oracle():
    rng = np.random.default_rng(11)
    pool = token_pool(11, 1000)
    c, seen = Cluster(), []
    for step, i in enumerate(rng.permutation(len(pool))):
        c, added = c.add(pool[i])
        assert added
        seen.append(pool[i])
        if step % 97 == 0:
            again, added_again = c.add(seen[int(rng.integers(0, len(seen)))])
            assert again is c and not added_again
            assert list(c) == sorted(seen)
    assert list(c) == sorted(pool)
    assert len(c) == 1000


def test_merge_is_a_semilattice():
    rng = np.random.default_rng(12)
    pool = token_pool(12, 300)

    def join(x: Cluster, y: Cluster) -> Cluster:
        return x.merge(y)[0]

    for _ in range(200):
        a, b, c = (
            Cluster(pool[i] for i in rng.choice(len(pool), int(rng.integers(0, 80)), replace=False))
            for _ in range(3)
        )
        assert join(a, b) == join(b, a)
        assert join(join(a, b), c) == join(a, join(b, c))
        assert join(a, a) == a
        assert set(join(a, b)) == set(a) | set(b)


def test_digest_tells_one_member_apart():
    rng = np.random.default_rng(13)
    pool = token_pool(13, 2000)
    for _ in range(200):
        n = int(rng.integers(1, 600))
        members, (extra,) = pick(rng, pool, n, 1)
        c = Cluster(members)
        grown, _ = c.add(extra)
        assert grown.digest() != c.digest()
        swapped = Cluster(members[1:] + [extra])
        assert swapped.digest() != c.digest()
        if n > 1:
            assert Cluster(members[1:]).digest() != c.digest()
