"""
The MO server: store, LRU cache, remote and local request handlers, the
replication-policy engine and expiry GC.

Transport-agnostic: outbound requests go through a `send(peer, message)`
callable and inbound frames enter through `handle_frame`, so the same logic
runs over the simulated network and over real sockets.

Locking: `_lock` serializes the store/cache index; each Entry has its own
`gate` for cluster, payload and policy mutations. No lock is held while a
request is out on the network.
"""
import enum
import itertools
import logging
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from zict import LRU

from config import ServerConfig
from errors import (
    AdoptRefusedError,
    BusyExhaustedError,
    ConnectFailureError,
    MOError,
    NotFoundError,
    ProtocolError,
    TransportTimeoutError,
    UnknownObjectError,
    UnknownPolicyError,
    UnknownTypeError,
    UnreachableHomeError,
    UntrustedChannelError,
    VerifyFailedError,
    WrongHomeError,
    error_from_code,
)
from schemas.cluster import EMPTY_DIGEST
from schemas.message import (
    STOP_ALL,
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
    PayloadRequest,
    ReplicateAction,
    ReplicateRequest,
    UpdateRequest,
)
from schemas.mobject import DistributedPart
from schemas.replication import PeerInfo, PolicyKind, ReplicationData, ReplicationPolicy
from schemas.status import GcReport
from schemas.token import HomeLocation, Token
from services.clock import Clock, Scheduler, SystemClock, ThreadScheduler
from services.cluster import Cluster
from services.dao import Levels, subgraph_levels
from services.store import StoredEntry, StoreFile
from services.tokens import token_verify
from services.wire import decode_message, encode_message, error_message, pack, unpack

logger = logging.getLogger("mo.server")

Send = Callable[[HomeLocation, Message], Message]

_DITTO_HISTORY = 64
_TRANSPORT_ERRORS = (ConnectFailureError, TransportTimeoutError)


class Channel(enum.Enum):
    REMOTE = "remote"
    LOCAL = "local"


@dataclass(eq=False)
class Entry:
    """One copy held by the server (store or cache)."""
    token: Token
    payload: Optional[bytes] = None
    cluster: Cluster = field(default_factory=Cluster)
    home: bool = False
    adopted_at: int = 0
    pinned: bool = False
    repl: ReplicationData = field(default_factory=ReplicationData)
    gate: threading.RLock = field(default_factory=threading.RLock, repr=False)

    @property
    def sustain_until(self) -> Optional[int]:
        return self.repl.sustain_until

    @property
    def keep(self) -> bool:
        """True when the entry belongs in the store rather than the cache."""
        return self.home or self.pinned or bool(self.repl.policies)

    def part(self) -> DistributedPart:
        with self.gate:
            return DistributedPart(token=self.token, payload=self.payload, cluster=self.cluster)


@dataclass
class _FlightLog:
    active: int = 0
    windows: deque = field(default_factory=deque)


class MOServer:
    def __init__(
        self,
        config: ServerConfig,
        send: Send,
        clock: Optional[Clock] = None,
        scheduler: Optional[Scheduler] = None,
        store_file: Optional[StoreFile] = None,
    ):
        self.config = config
        self.address = HomeLocation.parse(config.advertised)
        self.secret = config.local_secret.encode("utf-8")
        self.clock = clock or SystemClock()
        self.scheduler = scheduler or ThreadScheduler()
        self.store_file = store_file
        self._send = send

        self._lock = threading.RLock()
        self.store: dict[Token, Entry] = {}
        self._cached: dict[Token, Entry] = {}
        self.cache = LRU(config.cache_capacity, self._cached, on_evict=self._on_evict)
        self.evicted: deque[Token] = deque(maxlen=100_000)

        self._requesters: dict[Token, deque[HomeLocation]] = {}
        self._flights: dict[Token, _FlightLog] = {}
        self._flood_pending: set[Token] = set()
        self._request_ids = itertools.count(1)
        self._tick_handle = None
        self.stats: Counter[str] = Counter()

        if store_file is not None:
            self._load(store_file)

    # ── Lifecycle ────────────────────────────────────────────────────────
    def _load(self, store_file: StoreFile) -> None:
        count = 0
        for stored in store_file.load():
            entry = Entry(
                token=stored.part.token,
                payload=stored.part.payload,
                cluster=stored.part.cluster,
                home=stored.home,
                adopted_at=stored.adopted_at,
                pinned=not stored.home,
            )
            for policy in stored.policies:
                entry.repl.policies[policy.kind] = policy
            if entry.token.home != self.address:
                entry.repl.learn(entry.token.home, self.clock.now_ms())
            self.store[entry.token] = entry
            count += 1
        logger.info(f"Loaded {count} store entries from {store_file.path}")

    def start(self) -> None:
        """Arm the periodic anti-stale/GC tick."""
        if self.config.flood_interval_ms > 0 and self._tick_handle is None:
            self._tick_handle = self.scheduler.call_later(self.config.flood_interval_ms, self._tick)

    def close(self) -> None:
        if self._tick_handle is not None:
            self._tick_handle.cancel()
            self._tick_handle = None
        if self.store_file is not None:
            with self._lock:
                for entry in self.store.values():
                    self._persist(entry)
            self.store_file.close()

    def _tick(self) -> None:
        try:
            self.gc_sweep()
            for token in self.flooding_tokens():
                self.flood_step(token)
        finally:
            if self._tick_handle is not None:
                self._tick_handle = self.scheduler.call_later(self.config.flood_interval_ms, self._tick)

    # ── Store / cache index ──────────────────────────────────────────────
    def _on_evict(self, token: Token, entry: Entry) -> None:
        self.evicted.append(token)
        self.stats["evictions"] += 1
        logger.debug(f"Evicted {token} from cache")

    def lookup(self, token: Token, touch: bool = True) -> Optional[Entry]:
        """Find a copy; cache hits count as an access unless touch is False."""
        with self._lock:
            entry = self.store.get(token)
            if entry is not None:
                return entry
            if token in self._cached:
                return self.cache[token] if touch else self._cached[token]
            return None

    def cache_insert(self, part: DistributedPart) -> Entry:
        """Admit a copy into the cache (every requested object is admitted)."""
        with self._lock:
            existing = self.lookup(part.token)
            if existing is not None:
                self._absorb(existing, part)
                return existing
            entry = Entry(token=part.token, payload=part.payload, cluster=part.cluster)
            self.cache[part.token] = entry
            return entry

    def _absorb(self, entry: Entry, part: DistributedPart) -> list[Token]:
        with entry.gate:
            if entry.payload is None and part.payload is not None:
                entry.payload = part.payload
            added = self._merge(entry, part.cluster.members)
            self._persist(entry)
            return added

    def _pin(self, entry: Entry) -> None:
        with self._lock:
            if entry.token in self._cached:
                del self.cache[entry.token]
            self.store[entry.token] = entry
        self._persist(entry)

    def _unpin_if_idle(self, entry: Entry) -> None:
        with self._lock:
            if entry.keep or self.store.get(entry.token) is not entry:
                return
            del self.store[entry.token]
            self.cache[entry.token] = entry
        if self.store_file is not None:
            self.store_file.remove(entry.token.hex())

    def _persist(self, entry: Entry) -> None:
        if self.store_file is None or self.store.get(entry.token) is not entry:
            return
        with entry.gate:
            self.store_file.put(StoredEntry(
                part=DistributedPart(token=entry.token, payload=entry.payload, cluster=entry.cluster),
                home=entry.home,
                adopted_at=entry.adopted_at,
                policies=list(entry.repl.policies.values()),
            ))

    def _merge(self, entry: Entry, tokens) -> list[Token]:
        with entry.gate:
            entry.cluster, added = entry.cluster.add_all(tokens)
            if added:
                self._persist(entry)
            return added

    def _get_or_create(self, token: Token) -> Entry:
        with self._lock:
            entry = self.lookup(token)
            if entry is None:
                entry = Entry(token=token)
                self.cache[token] = entry
            return entry

    def flooding_tokens(self) -> list[Token]:
        with self._lock:
            return sorted(t for t, e in self.store.items() if e.repl.flooding is not None)

    # ── Frame entry point ────────────────────────────────────────────────
    def handle_frame(self, raw: bytes, channel: Channel) -> bytes:
        """Decode one request frame, dispatch it and encode the reply. Never raises."""
        request_id = 0
        try:
            message = decode_message(raw)
            request_id = message.request_id
            reply = self.handle_message(message, channel)
        except MOError as e:
            self.stats["errors"] += 1
            logger.warning(f"[{e.code}] {channel.value} request {request_id}: {e.message}")
            reply = error_message(e, request_id)
        except Exception as e:
            self.stats["errors"] += 1
            logger.exception(f"Unhandled error in {channel.value} request {request_id}: {e}")
            reply = error_message(MOError("internal error"), request_id)
        return encode_message(reply)

    def handle_message(self, message: Message, channel: Channel) -> Message:
        if message.type.local and channel != Channel.LOCAL:
            raise UntrustedChannelError(f"{message.type.name} is only accepted on the local channel")
        body = unpack(message, self.secret)
        rid = message.request_id

        if isinstance(body, FetchRequest):
            return pack(self.handle_fetch(body.sender, body.token), rid)
        if isinstance(body, AssentRequest):
            return pack(self.handle_assent(body), rid)

        if isinstance(body, PayloadRequest):
            part = self.handle_request_payload(body.token, body.local_only)
            out = LocalResponse(part=part)
        elif isinstance(body, AdoptRequest):
            self.handle_adopt(body.part)
            out = LocalResponse()
        elif isinstance(body, ReplicateRequest):
            self.handle_replicate(body)
            out = LocalResponse()
        elif isinstance(body, UpdateRequest):
            self.handle_update(body.token, body.tokens)
            out = LocalResponse()
        else:
            raise UnknownTypeError(f"{message.type.name} is not a request")
        return pack(out, rid, self.secret)

    # ── Outbound ─────────────────────────────────────────────────────────
    def _request(self, peer: HomeLocation, body):
        message = pack(body, next(self._request_ids))
        reply = self._send(peer, message)
        if reply.request_id != message.request_id:
            raise ProtocolError(f"reply id {reply.request_id} for request {message.request_id}")
        out = unpack(reply)
        if isinstance(out, ErrorResponse):
            raise error_from_code(out.code, out.message)
        return out

    # ── Remote handlers ──────────────────────────────────────────────────
    def _ditto_for(self, token: Token, exclude: HomeLocation) -> list[HomeLocation]:
        seen = self._requesters.get(token, ())
        return [a for a in seen if a != exclude][: self.config.ditto_max]

    def _record_requester(self, token: Token, requester: HomeLocation) -> None:
        if token not in self.store and token not in self._cached:
            return
        seen = self._requesters.setdefault(token, deque(maxlen=_DITTO_HISTORY))
        try:
            seen.remove(requester)
        except ValueError:
            pass
        seen.appendleft(requester)

    def _in_flight(self, token: Token, now: int) -> int:
        log = self._flights.get(token)
        if log is None:
            return 0
        while log.windows and log.windows[0] <= now:
            log.windows.popleft()
        return log.active + len(log.windows)

    def handle_fetch(self, requester: HomeLocation, token: Token) -> FetchResponse | BusyResponse:
        now = self.clock.now_ms()
        self.stats["fetch"] += 1
        with self._lock:
            ditto = self._ditto_for(token, requester)
            self._record_requester(token, requester)
            threshold = self.config.busy_threshold
            if threshold and self._in_flight(token, now) >= threshold:
                self.stats["busy"] += 1
                logger.info(f"BUSY for {token} from {requester}, ditto {len(ditto)}")
                return BusyResponse(ditto=ditto)
            log = self._flights.setdefault(token, _FlightLog())
            log.active += 1
            if self.config.busy_window_ms:
                log.windows.append(now + self.config.busy_window_ms)
        try:
            entry = self.lookup(token)
            if entry is None or entry.payload is None:
                return FetchResponse(status=FetchStatus.NOT_FOUND, ditto=ditto)
            self.stats["fetch_found"] += 1
            return FetchResponse(status=FetchStatus.FOUND, ditto=ditto, part=entry.part())
        finally:
            with self._lock:
                log.active -= 1
                if not log.active and not log.windows:
                    self._flights.pop(token, None)

    def handle_assent(self, req: AssentRequest) -> AssentResponse:
        self.stats["assent"] += 1
        if req.via_root is not None:
            return self._assent_item(req)
        entry = self.lookup(req.token)
        if entry is None:
            return AssentResponse(status=AssentStatus.NOT_FOUND)

        now = self.clock.now_ms()
        with entry.gate:
            newcomer = req.sender not in entry.repl.peers
            self._learn(entry, req, now)
            accepted = entry.repl.flooding is not None
            added = self._merge(entry, req.sample) if accepted else []
            missing = entry.cluster.diff(req.digest, req.sample)
            digest = entry.cluster.digest()
            if accepted:
                entry.repl.peers[req.sender].last_digest = digest
        if added:
            logger.info(f"Assent from {req.sender} added {len(added)} tokens to {entry.token}")
            self._on_cluster_grew(entry)
        elif accepted and newcomer:
            self.schedule_flood(entry.token)
        return AssentResponse(status=AssentStatus.OK, accepted=accepted, digest=digest, missing=missing)

    def _learn(self, entry: Entry, req: AssentRequest, now: int) -> None:
        info = entry.repl.learn(req.sender, now)
        info.last_contact = now
        info.willing = True
        info.failures = 0
        for peer in req.ditto:
            if peer != self.address and peer != req.sender:
                entry.repl.learn(peer, now)

    def _assent_item(self, req: AssentRequest) -> AssentResponse:
        """A member of a flooded subgraph, pushed along with its root."""
        root = self.lookup(req.via_root, touch=False)
        policy = root.repl.flooding if root is not None else None
        if policy is None:
            return AssentResponse(status=AssentStatus.NOT_FOUND)
        levels = self.levels(root.token, policy.level).get(req.token)
        if levels is None or req.token == root.token:
            return AssentResponse(status=AssentStatus.NOT_FOUND)

        now = self.clock.now_ms()
        with root.gate:
            newcomer = req.sender not in root.repl.peers
            info = root.repl.learn(req.sender, now)
            info.last_contact = now
            info.willing = True
        entry = self._get_or_create(req.token)
        take_cluster = req.has_cluster and levels.cluster is not None
        take_payload = levels.payload is not None
        added: list[Token] = []
        if not entry.pinned:
            entry.pinned = True
            self._pin(entry)
        with entry.gate:
            if take_payload and req.payload is not None and entry.payload is None:
                if token_verify(entry.token, req.payload):
                    entry.payload = req.payload
                    self._persist(entry)
                else:
                    logger.warning(f"Bogus payload for {entry.token} pushed by {req.sender}")
                    take_payload = False
            if take_cluster:
                added = self._merge(entry, req.sample)
            missing = entry.cluster.diff(req.digest, req.sample) if take_cluster else []
            digest = entry.cluster.digest()
        with root.gate:
            if take_cluster:
                info.item_digests[entry.token] = digest
            if req.payload is not None:
                info.has_payload.add(entry.token)
        if added:
            self._on_cluster_grew(entry)
        elif newcomer:
            self.schedule_flood(root.token)
        return AssentResponse(
            status=AssentStatus.OK, accepted=take_cluster or take_payload, digest=digest, missing=missing,
        )

    # ── Local handlers ───────────────────────────────────────────────────
    def handle_request_payload(self, token: Token, local_only: bool = False) -> Optional[DistributedPart]:
        """Serve a copy from store/cache, fetching it remotely (proxy style) when needed."""
        self.stats["request_payload"] += 1
        entry = self.lookup(token)
        if entry is not None and (entry.payload is not None or local_only):
            return entry.part()
        if local_only:
            return None
        part = self._fetch_remote(token)
        return self.cache_insert(part).part()

    def _fetch_remote(self, token: Token) -> DistributedPart:
        if token.home == self.address:
            raise NotFoundError(f"{token} is homed here but not held")
        self.stats["remote_fetch"] += 1
        request = FetchRequest(sender=self.address, token=token)

        reply = None
        delay = self.config.retry_delay_ms
        for attempt in range(1, self.config.fetch_retries + 1):
            try:
                reply = self._request(token.home, request)
                break
            except _TRANSPORT_ERRORS as e:
                logger.warning(f"Fetch of {token} from home {token.home} failed ({attempt}): {e.message}")
                if attempt < self.config.fetch_retries:
                    self.clock.sleep_ms(delay)
                    delay *= 2

        home_busy = isinstance(reply, BusyResponse)
        part = self._usable(token, reply, token.home)
        if part is not None:
            return part

        visited = {self.address, token.home}
        queue = deque(reply.ditto if reply is not None else [])
        while queue:
            peer = queue.popleft()
            if peer in visited:
                continue
            visited.add(peer)
            try:
                answer = self._request(peer, request)
            except (*_TRANSPORT_ERRORS, ProtocolError) as e:
                logger.warning(f"Ditto candidate {peer} for {token} failed: {e.message}")
                continue
            part = self._usable(token, answer, peer)
            if part is not None:
                logger.info(f"Fetched {token} from ditto candidate {peer}")
                self.stats["rerouted"] += 1
                return part
            queue.extend(answer.ditto)

        if reply is None:
            raise UnreachableHomeError(f"home {token.home} of {token} unreachable")
        if home_busy:
            raise BusyExhaustedError(f"home of {token} busy and no ditto candidate served it")
        raise NotFoundError(f"{token} not found at home or ditto candidates")

    def _usable(self, token: Token, reply, source: HomeLocation) -> Optional[DistributedPart]:
        if not isinstance(reply, FetchResponse) or reply.status != FetchStatus.FOUND:
            return None
        part = reply.part
        if part.token != token or part.payload is None:
            return None
        if not token_verify(token, part.payload):
            self.stats["verify_failed"] += 1
            logger.warning(f"Payload for {token} from {source} does not match its token")
            return None
        return part

    def handle_adopt(self, part: DistributedPart) -> None:
        """Become the home of a micro object."""
        token = part.token
        if token.home != self.address:
            raise WrongHomeError(f"{token} names {token.home} as home, this is {self.address}")
        if part.payload is None or not token_verify(token, part.payload):
            raise VerifyFailedError(f"payload does not match {token}")
        now = self.clock.now_ms()
        if token.expire <= now:
            raise AdoptRefusedError(f"{token} already expired")
        self.stats["adopt"] += 1
        with self._lock:
            entry = self.lookup(token)
            if entry is None:
                entry = Entry(token=token, payload=part.payload, cluster=part.cluster)
            with entry.gate:
                entry.home = True
                entry.adopted_at = entry.adopted_at or now
                if entry.payload is None:
                    entry.payload = part.payload
            self._pin(entry)
        self._merge(entry, part.cluster.members)
        logger.info(f"Adopted {token}")

    def handle_replicate(self, req: ReplicateRequest) -> None:
        """Start or stop a replication policy on the local copy of req.token."""
        self.stats["replicate"] += 1
        now = self.clock.now_ms()
        if req.action == ReplicateAction.STOP:
            if req.kind != STOP_ALL and req.kind not in set(PolicyKind):
                raise UnknownPolicyError(f"policy kind {req.kind}")
            entry = self.lookup(req.token, touch=False)
            if entry is None:
                return
            with entry.gate:
                if req.kind == STOP_ALL:
                    entry.repl.policies.clear()
                else:
                    entry.repl.policies.pop(PolicyKind(req.kind), None)
                self._persist(entry)
            self._unpin_if_idle(entry)
            logger.info(f"Stopped replication {req.kind} on {req.token}")
            return

        policy = self._policy_from(req, now)
        entry = self._get_or_create(req.token)
        with entry.gate:
            entry.repl.policies[policy.kind] = policy
            if entry.token.home != self.address:
                entry.repl.learn(entry.token.home, now)
        self._pin(entry)
        logger.info(f"Started {policy.kind.name.lower()} on {req.token}")

        if entry.payload is None:
            try:
                self.cache_insert(self._fetch_remote(entry.token))
            except MOError as e:
                logger.warning(f"Replicated copy of {entry.token} stays token-only: {e.message}")
        if policy.kind == PolicyKind.FLOODING:
            self.schedule_flood(entry.token)

    def _policy_from(self, req: ReplicateRequest, now: int) -> ReplicationPolicy:
        try:
            kind = PolicyKind(req.kind)
            if kind == PolicyKind.SUSTAIN:
                until = min(req.sustain_until, now + self.config.max_sustain_ms)
                return ReplicationPolicy(kind=kind, sustain_until=until)
            return ReplicationPolicy(kind=kind, level=req.level)
        except ValueError as e:
            raise UnknownPolicyError(f"bad policy kind {req.kind}: {e}") from e

    def handle_update(self, token: Token, tokens: list[Token]) -> list[Token]:
        """Add tokens to a held copy's cluster; active policies are evaluated right after."""
        self.stats["update"] += 1
        entry = self.lookup(token)
        if entry is None:
            raise UnknownObjectError(f"{token} is not held here")
        added = self._merge(entry, tokens)
        if added:
            self._on_cluster_grew(entry)
        return added

    # ── Replication engine ───────────────────────────────────────────────
    def _resolve_cluster(self, token: Token) -> Optional[Cluster]:
        entry = self.lookup(token, touch=False)
        return entry.cluster if entry is not None else None

    def levels(self, root: Token, level: int) -> dict[Token, Levels]:
        return subgraph_levels(root, level, self._resolve_cluster)

    def _on_cluster_grew(self, entry: Entry) -> None:
        if entry.repl.flooding is not None:
            self.schedule_flood(entry.token)
        for root in self.flooding_tokens():
            if root == entry.token:
                continue
            root_entry = self.lookup(root, touch=False)
            policy = root_entry.repl.flooding if root_entry is not None else None
            if policy and policy.level and entry.token in self.levels(root, policy.level):
                self.schedule_flood(root)

    def schedule_flood(self, token: Token) -> None:
        with self._lock:
            if token in self._flood_pending:
                return
            self._flood_pending.add(token)

        def run():
            with self._lock:
                self._flood_pending.discard(token)
            self.flood_step(token)

        self.scheduler.call_later(self.config.flood_delay_ms, run)

    def flood_step(self, token: Token) -> int:
        """Assent with every stale willing peer (up to flood_fanout); returns messages sent."""
        entry = self.lookup(token, touch=False)
        if entry is None or entry.repl.flooding is None:
            return 0
        level = entry.repl.flooding.level
        items = self._items(entry, level) if level else []

        with entry.gate:
            digest = entry.cluster.digest()
            peers = sorted(
                ((p, i) for p, i in entry.repl.peers.items() if i.willing and p != self.address),
                key=lambda pi: (pi[1].last_contact, str(pi[0])),
            )
            work = []
            for peer, info in peers:
                root_stale = (info.last_digest or EMPTY_DIGEST) != digest
                pushes = [it for it in items if self._needs_push(info, *it)]
                if root_stale or pushes:
                    work.append((peer, info, root_stale, pushes))
        if self.config.flood_fanout:
            work = work[: self.config.flood_fanout]

        sent = 0
        for peer, info, root_stale, pushes in work:
            try:
                if root_stale:
                    sent += 1
                    if not self._assent_root(entry, peer, info):
                        continue
                for item, lv in pushes:
                    sent += 1
                    self._assent_member(entry, peer, info, item, lv)
            except MOError as e:
                with entry.gate:
                    info.failures += 1
                logger.warning(f"Flood of {token} to {peer} failed ({info.failures}): [{e.code}] {e.message}")
        self.stats["flood_messages"] += sent
        return sent

    def _items(self, root: Entry, level: int) -> list[tuple[Entry, Levels]]:
        out = []
        for token, lv in self.levels(root.token, level).items():
            if token == root.token:
                continue
            entry = self.lookup(token, touch=False)
            if entry is not None:
                out.append((entry, lv))
        out.sort(key=lambda it: (min(x for x in (it[1].cluster, it[1].payload) if x is not None), it[0].token))
        return out

    @staticmethod
    def _needs_push(info: PeerInfo, item: Entry, lv: Levels) -> bool:
        if lv.cluster is not None and info.item_digests.get(item.token, EMPTY_DIGEST) != item.cluster.digest():
            return True
        return lv.payload is not None and item.payload is not None and item.token not in info.has_payload

    def _ditto_peers(self, entry: Entry, exclude: HomeLocation) -> list[HomeLocation]:
        peers = [p for p, i in entry.repl.peers.items() if i.willing and p not in (exclude, self.address)]
        return sorted(peers, key=str)[: self.config.ditto_max]

    def _assent_root(self, entry: Entry, peer: HomeLocation, info: PeerInfo) -> bool:
        with entry.gate:
            req = AssentRequest(
                sender=self.address,
                token=entry.token,
                digest=entry.cluster.digest(),
                sample=entry.cluster.diff(info.last_digest or EMPTY_DIGEST, []),
                ditto=self._ditto_peers(entry, peer),
            )
        resp = self._request(peer, req)
        now = self.clock.now_ms()
        if resp.status == AssentStatus.NOT_FOUND:
            with entry.gate:
                entry.repl.peers.pop(peer, None)
            logger.info(f"{peer} holds no copy of {entry.token}; forgotten")
            return False
        added = self._merge(entry, resp.missing)
        with entry.gate:
            info.last_contact = now
            info.failures = 0
            info.last_digest = resp.digest
            if not resp.accepted:
                info.willing = False
                logger.info(f"{peer} has no matching policy for {entry.token}")
        if added:
            self._on_cluster_grew(entry)
        return resp.accepted

    def _assent_member(self, root: Entry, peer: HomeLocation, info: PeerInfo, item: Entry, lv: Levels) -> None:
        with item.gate:
            with_cluster = lv.cluster is not None
            send_payload = lv.payload is not None and item.payload is not None and item.token not in info.has_payload
            req = AssentRequest(
                sender=self.address,
                token=item.token,
                via_root=root.token,
                has_cluster=with_cluster,
                digest=item.cluster.digest(),
                sample=item.cluster.diff(info.item_digests.get(item.token, EMPTY_DIGEST), []) if with_cluster else [],
                payload=item.payload if send_payload else None,
            )
        resp = self._request(peer, req)
        if resp.status == AssentStatus.NOT_FOUND or not resp.accepted:
            return
        added = self._merge(item, resp.missing) if with_cluster else []
        with root.gate:
            if with_cluster:
                info.item_digests[item.token] = resp.digest
            if send_payload:
                info.has_payload.add(item.token)
        if added:
            self._on_cluster_grew(item)

    # ── Expiry ───────────────────────────────────────────────────────────
    def gc_sweep(self, now: Optional[int] = None) -> GcReport:
        """Drop copies whose retention (expire or sustain, plus grace) has run out."""
        now = self.clock.now_ms() if now is None else now
        grace = self.config.grace_period_ms
        report = GcReport(at=now)
        with self._lock:
            for token, entry in list(self.store.items()):
                if now > max(token.expire, entry.sustain_until or 0) + grace:
                    del self.store[token]
                    report.store_removed.append(token)
                    if self.store_file is not None:
                        self.store_file.remove(token.hex())
            for token in list(self._cached):
                if now > token.expire + grace:
                    del self.cache[token]
                    report.cache_removed.append(token)
            for token in [t for t in self._requesters if t not in self.store and t not in self._cached]:
                del self._requesters[token]
        if report.store_removed or report.cache_removed:
            logger.info(f"GC removed {len(report.store_removed)} stored, {len(report.cache_removed)} cached")
        return report

    # ── Introspection ────────────────────────────────────────────────────
    def entries(self) -> list[tuple[str, Entry]]:
        with self._lock:
            out = [("store", e) for e in self.store.values()]
            out += [("cache", e) for e in self._cached.values()]
        return sorted(out, key=lambda kv: kv[1].token)

    def stats_view(self) -> dict:
        with self._lock:
            return {
                "address": str(self.address),
                "store_size": len(self.store),
                "cache_size": len(self._cached),
                "cache_capacity": self.config.cache_capacity,
                "counters": dict(self.stats),
            }
