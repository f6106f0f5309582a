"""
The lib-server: the application-facing API, linked into the application.

A Session talks to its local MO server over the trusted local channel and
keeps a registry of open micro objects. Cluster changes reach the application
through callbacks (run serially per subscription on a worker thread) and
through blocking waits with tracker clusters. A background poller asks the
local server for cluster updates every `poll_interval_ms`.

All public methods are thread-safe.
"""
import itertools
import logging
import queue
import threading
import time
from collections import Counter
from typing import Callable, Iterable, Optional

from config import ServerConfig
from errors import (
    AuthenticationError,
    ConnectFailureError,
    DisconnectedError,
    MOError,
    ModeMismatchError,
    ProtocolError,
    TransportTimeoutError,
    UnknownObjectError,
    error_from_code,
)
from schemas.message import (
    AdoptRequest,
    ErrorResponse,
    LocalResponse,
    Message,
    PayloadRequest,
    ReplicateRequest,
    UpdateRequest,
)
from schemas.mobject import DistributedPart
from schemas.replication import PolicyKind, ReplicationPolicy
from schemas.security import NO_SECURITY, SealedBuffer, SecurityMode, SecurityPolicy
from schemas.token import HomeLocation, Token
from services.clock import Clock, SystemClock
from services.cluster import Cluster
from services.mobject import MicroObject, mo_from_token, mo_new, mo_plaintext
from services.security import open_sealed
from services.wire import pack, unpack

logger = logging.getLogger("mo.lib")

LocalSend = Callable[[Message], Message]
Callback = Callable[[MicroObject, Token], None]

_STOP = object()


class Subscription:
    """One registered cluster callback. Tokens are delivered once each, in order."""

    def __init__(self, session: "Session", mo: MicroObject, tracker: Cluster, callback: Callback):
        self.session = session
        self.mo = mo
        self.callback = callback
        self._known = set(tracker)
        self._lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue()
        self.active = True
        self._worker = threading.Thread(target=self._run, name=f"mo-cb-{mo.token.prefix}", daemon=True)
        self._worker.start()

    def offer(self, tokens: Iterable[Token]) -> None:
        with self._lock:
            if not self.active:
                return
            for t in tokens:
                if t not in self._known:
                    self._known.add(t)
                    self._queue.put(t)

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is _STOP or not self.active:
                return
            try:
                self.callback(self.mo, item)
            except Exception:
                logger.exception(f"Callback for {self.mo.token} failed on {item}")

    def cancel(self) -> None:
        with self._lock:
            self.active = False
        self._queue.put(_STOP)
        self.session._unsubscribe(self)

    def join(self, timeout: Optional[float] = None) -> None:
        self._worker.join(timeout)


class Session:
    def __init__(self, config: ServerConfig, send: LocalSend, clock: Optional[Clock] = None, poll: bool = True):
        self.config = config
        self.clock = clock or SystemClock()
        self.home = HomeLocation.parse(config.advertised)
        self.secret = config.local_secret.encode("utf-8")
        self._send = send
        self._poll = poll
        self._lock = threading.RLock()
        self._registry: dict[Token, MicroObject] = {}
        self._subs: dict[Token, list[Subscription]] = {}
        self._watched: Counter[Token] = Counter()
        self._verdicts: dict[tuple[Token, Token], bool] = {}
        self._undecided: dict[Token, set[Token]] = {}
        self._offer_lock = threading.RLock()
        self._ids = itertools.count(1)
        self._poller: Optional[threading.Thread] = None
        self._stopped = threading.Event()
        self.sent: Counter[str] = Counter()

    # ── Local channel ────────────────────────────────────────────────────
    def _call(self, body) -> LocalResponse:
        message = pack(body, next(self._ids), self.secret)
        self.sent[message.type.name] += 1
        try:
            reply = self._send(message)
        except (ConnectFailureError, TransportTimeoutError, ProtocolError) as e:
            raise DisconnectedError(f"local server unreachable: {e.message}") from e
        out = unpack(reply, self.secret)
        if isinstance(out, ErrorResponse):
            raise error_from_code(out.code, out.message)
        return out

    # ── Registry ─────────────────────────────────────────────────────────
    def _register(self, mo: MicroObject) -> MicroObject:
        with self._lock:
            return self._registry.setdefault(mo.token, mo)

    def registered(self, token: Token) -> Optional[MicroObject]:
        with self._lock:
            return self._registry.get(token)

    def known_cluster(self, token: Token) -> Optional[Cluster]:
        mo = self.registered(token)
        return mo.cluster if mo is not None else None

    # ── Object lifecycle ─────────────────────────────────────────────────
    def create_new(
        self,
        expire: int,
        plaintext: bytes,
        psec: SecurityPolicy = NO_SECURITY,
        csec: SecurityPolicy = NO_SECURITY,
        aux: int = 0,
    ) -> MicroObject:
        """mo_create_new: seal, compute the token, and have the local server adopt it."""
        mo = mo_new(self.home, expire, plaintext, psec, csec, aux, self.config.max_payload_size)
        self._call(AdoptRequest(part=mo.distributed_part()))
        logger.info(f"Created {mo.token}")
        return self._register(mo)

    def create_copy(
        self,
        token: Token | bytes,
        psec: SecurityPolicy = NO_SECURITY,
        csec: SecurityPolicy = NO_SECURITY,
    ) -> MicroObject:
        """mo_create_copy: a token-only local copy; the payload is fetched on demand."""
        mo = mo_from_token(token, psec, csec)
        return self._register(mo)

    def add_to_cluster(self, parent: MicroObject, child: MicroObject | Token) -> bool:
        """mo_cter_add_mo: append the child's token locally and at the local server."""
        token = child.token if isinstance(child, MicroObject) else child
        added = self._merge(parent, [token])
        update = UpdateRequest(token=parent.token, tokens=[token])
        try:
            self._call(update)
        except UnknownObjectError:
            # The server lost (or never held) the parent; load it and retry once.
            self.load(parent)
            self._call(update)
        return bool(added)

    def put_repl(self, mo: MicroObject, policy: ReplicationPolicy) -> None:
        """mo_put_repl: start a replication policy at the local server."""
        self._call(ReplicateRequest.start(mo.token, policy))

    def stop_repl(self, mo: MicroObject, kind: PolicyKind | int | None = None) -> None:
        """Stop one policy kind, or all of them when kind is None."""
        self._call(ReplicateRequest.stop(mo.token, kind))

    def get_tken(self, mo: MicroObject) -> Token:
        return mo.token

    def get_cter(self, mo: MicroObject) -> Cluster:
        """mo_get_cter: a snapshot of the visible cluster."""
        return Cluster(self._visible(mo, mo.cluster.members))

    # ── Payloads ─────────────────────────────────────────────────────────
    def load(self, mo: MicroObject, local_only: bool = False) -> Optional[DistributedPart]:
        part = self._call(PayloadRequest(token=mo.token, local_only=local_only)).part
        if part is not None:
            self._merge(mo, part.cluster.members)
        return part

    def get_payload(self, mo: MicroObject) -> bytes:
        """mo_get_plod: open the local payload, requesting it from the server first if absent."""
        if mo.payload is not None:
            return mo_plaintext(mo)
        part = self.load(mo)
        if part is None or part.payload is None:
            raise MOError(f"server returned no payload for {mo.token}")
        sealed = SealedBuffer.from_bytes(part.payload)
        try:
            plaintext = open_sealed(mo.psec, sealed)
        except (AuthenticationError, ModeMismatchError):
            logger.warning(f"Bogus micro object {mo.token}: payload does not open")
            raise
        mo.set_payload(part.payload)
        return plaintext

    def refresh(self, mo: MicroObject) -> list[Token]:
        """Pull the server's view of the cluster without triggering remote fetches."""
        part = self._call(PayloadRequest(token=mo.token, local_only=True)).part
        return self._merge(mo, part.cluster.members) if part is not None else []

    # ── Cluster visibility ───────────────────────────────────────────────
    def _visible(self, mo: MicroObject, tokens: Iterable[Token]) -> list[Token]:
        tokens = list(tokens)
        if mo.csec.mode == SecurityMode.NONE:
            return tokens
        return [t for t in tokens if self._admits(mo, t)]

    def _admits(self, mo: MicroObject, member: Token) -> bool:
        key = (mo.token, member)
        with self._lock:
            verdict = self._verdicts.get(key)
        if verdict is not None:
            return verdict
        try:
            part = self._call(PayloadRequest(token=member))
            open_sealed(mo.csec, SealedBuffer.from_bytes(part.part.payload))
            verdict = True
        except (AuthenticationError, ModeMismatchError):
            logger.warning(f"Dropping {member} from {mo.token}: fails cluster authentication")
            verdict = False
        except MOError as e:
            logger.warning(f"Cannot check {member} for {mo.token} yet: {e.message}")
            with self._lock:
                self._undecided.setdefault(mo.token, set()).add(member)
            return False
        with self._lock:
            self._verdicts[key] = verdict
            pending = self._undecided.get(mo.token)
            if pending is not None:
                pending.discard(member)
                if not pending:
                    del self._undecided[mo.token]
        return verdict

    def _merge(self, mo: MicroObject, tokens: Iterable[Token]) -> list[Token]:
        """Merge tokens into mo and offer every newly visible member to its subscriptions."""
        with self._offer_lock:
            added = mo.merge(tokens)
            with self._lock:
                subs = list(self._subs.get(mo.token, ()))
                # members whose csec check could not run before get another try
                candidates = set(added) | self._undecided.get(mo.token, set())
            if subs and candidates:
                visible = sorted(self._visible(mo, candidates))
                for sub in subs:
                    sub.offer(visible)
        return added

    # ── Notification ─────────────────────────────────────────────────────
    def put_cter_callback(self, mo: MicroObject, tracker: Cluster, callback: Callback) -> Subscription:
        """
        mo_put_cter_clbk: call `callback(mo, token)` once for every token not in
        tracker, first those already present (in token order), then new ones as
        they arrive.
        """
        sub = Subscription(self, mo, tracker, callback)
        with self._offer_lock:
            with self._lock:
                self._subs.setdefault(mo.token, []).append(sub)
                self._watched[mo.token] += 1
            sub.offer(self._visible(mo, mo.cluster.new_since(tracker)))
        self._ensure_poller()
        return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.mo.token, [])
            if sub in subs:
                subs.remove(sub)
                self._unwatch(sub.mo.token)

    def _unwatch(self, token: Token) -> None:
        self._watched[token] -= 1
        if self._watched[token] <= 0:
            del self._watched[token]

    def cter_wait(self, mo: MicroObject, tracker: Cluster) -> Token:
        """mo_cter_wait: block until a token outside tracker exists; returns the least one."""
        return self._wait(mo, tracker, None)

    def cter_try_uwait(self, mo: MicroObject, tracker: Cluster, timeout_us: int) -> Optional[Token]:
        """mo_cter_try_uwait: like cter_wait, but gives up (None) after timeout_us microseconds."""
        return self._wait(mo, tracker, time.monotonic() + timeout_us / 1_000_000)

    def _wait(self, mo: MicroObject, tracker: Cluster, deadline: Optional[float]) -> Optional[Token]:
        poll_s = self.config.poll_interval_ms / 1000
        with self._lock:
            self._watched[mo.token] += 1
        self._ensure_poller()
        try:
            while True:
                seen = len(mo.cluster)
                fresh = self._visible(mo, mo.cluster.new_since(tracker))
                if fresh:
                    return fresh[0]
                timeout = poll_s
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return None
                    timeout = min(timeout, remaining)
                if not self._poll:
                    self.refresh(mo)
                with mo.changed:
                    if len(mo.cluster) == seen:
                        mo.changed.wait(timeout)
        finally:
            with self._lock:
                self._unwatch(mo.token)

    # ── Poller ───────────────────────────────────────────────────────────
    def _ensure_poller(self) -> None:
        if not self._poll:
            return
        with self._lock:
            if self._poller is not None or self._stopped.is_set():
                return
            self._poller = threading.Thread(target=self._poll_loop, name="mo-lib-poller", daemon=True)
            self._poller.start()

    def _poll_loop(self) -> None:
        interval = self.config.poll_interval_ms / 1000
        while not self._stopped.wait(interval):
            with self._lock:
                watched = [self._registry.get(t) for t in self._watched]
            for mo in watched:
                if mo is None:
                    continue
                try:
                    self.refresh(mo)
                except MOError as e:
                    logger.warning(f"Poll of {mo.token} failed: [{e.code}] {e.message}")

    def close(self) -> None:
        self._stopped.set()
        with self._lock:
            subs = [s for lst in self._subs.values() for s in lst]
        for sub in subs:
            sub.cancel()
        if self._poller is not None:
            self._poller.join(timeout=2)
