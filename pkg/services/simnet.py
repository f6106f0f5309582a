"""
Deterministic simulated network.

Every server shares one ManualClock and one ManualScheduler. A request is
delivered by calling the target's `handle_frame` synchronously; each leg
advances the clock by a latency drawn from a seeded numpy generator, so the
same seed and script always yield the same trace. Drops, partitions and
offline servers surface to the sender as transport errors.
"""
import logging
from collections import Counter
from typing import Optional

import numpy as np

from config import ServerConfig, server_config
from errors import ConnectFailureError, MOError, TransportTimeoutError
from schemas.message import Message
from schemas.token import HomeLocation, Token
from services.clock import ManualClock, ManualScheduler
from services.libserver import Session
from services.server import Channel, MOServer
from services.wire import decode_message, encode_message, unpack

logger = logging.getLogger("mo.sim")

SIM_PORT = 4710
LOCAL_LATENCY_MS = 1
START_MS = 1_000_000


class SimNet:
    def __init__(self, seed: int = 0, latency: tuple[int, int] = (5, 20), start_ms: int = START_MS):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.start_ms = start_ms
        self.clock = ManualClock(start_ms)
        self.scheduler = ManualScheduler(self.clock)
        self.latency = latency
        self.servers: dict[str, MOServer] = {}
        self.sessions: dict[str, Session] = {}
        self._names: dict[HomeLocation, str] = {}
        self._drop: dict[frozenset, float] = {}
        self._groups: Optional[list[set[str]]] = None
        self._offline: set[str] = set()
        self.trace: list[str] = []
        self.counts: Counter[str] = Counter()

    # ── Topology ─────────────────────────────────────────────────────────
    def add_server(self, name: str, **overrides) -> MOServer:
        name = name.lower()
        values = {
            "listen": f"{name}:{SIM_PORT}",
            "local_listen": f"{name}:{SIM_PORT + 1}",
            "local_secret": f"sim-{name}",
            "flood_interval_ms": 0,
        }
        values.update(overrides)
        config: ServerConfig = server_config(**values)
        server = MOServer(config, self._remote_sender(name), self.clock, self.scheduler)
        self.servers[name] = server
        self._names[server.address] = name
        self.sessions[name] = Session(config, self._local_sender(name), self.clock, poll=False)
        server.start()
        return server

    def name_of(self, addr: HomeLocation) -> str:
        return self._names.get(addr, str(addr))

    def partition(self, groups: list[set[str]]) -> None:
        self._groups = [set(g) for g in groups]

    def heal(self) -> None:
        self._groups = None
        self._drop.clear()

    def set_drop(self, a: str, b: str, probability: float) -> None:
        self._drop[frozenset((a, b))] = probability

    def set_offline(self, name: str, offline: bool = True) -> None:
        (self._offline.add if offline else self._offline.discard)(name)

    def set_latency(self, lo: int, hi: int) -> None:
        self.latency = (lo, hi)

    def _group_of(self, name: str) -> int:
        for i, g in enumerate(self._groups or ()):
            if name in g:
                return i
        return -1

    def _reachable(self, a: str, b: str) -> bool:
        if self._groups is not None and self._group_of(a) != self._group_of(b):
            return False
        p = self._drop.get(frozenset((a, b)), 0.0)
        return not (p and self.rng.random() < p)

    def _leg(self) -> int:
        lo, hi = self.latency
        return int(self.rng.integers(lo, hi + 1))

    def elapsed_ms(self) -> int:
        return self.clock.now_ms() - self.start_ms

    # ── Delivery ─────────────────────────────────────────────────────────
    def log(self, src: str, dst: str, kind: str, prefix: str = "-") -> None:
        self.trace.append(f"{self.elapsed_ms()} {src} {dst} {kind} {prefix}")
        self.counts[kind] += 1

    def _subject(self, message: Message, secret: bytes) -> str:
        try:
            body = unpack(message, secret)
        except MOError:
            return "-"
        token: Optional[Token] = getattr(body, "token", None)
        if token is None and getattr(body, "part", None) is not None:
            token = body.part.token
        return token.prefix if token is not None else "-"

    def _remote_sender(self, src: str):
        def send(addr: HomeLocation, message: Message) -> Message:
            dst = self._names.get(addr)
            prefix = self._subject(message, b"")
            if dst is None or dst in self._offline:
                self.log(src, dst or str(addr), "DROP", prefix)
                raise ConnectFailureError(f"{addr} is offline")
            if not self._reachable(src, dst):
                self.log(src, dst, "DROP", prefix)
                self.clock.advance(int(self.servers[src].config.transport_timeout_s * 1000))
                raise TransportTimeoutError(f"no reply from {addr}")
            self.clock.advance(self._leg())
            self.log(src, dst, message.type.name, prefix)
            raw = self.servers[dst].handle_frame(encode_message(message), Channel.REMOTE)
            self.clock.advance(self._leg())
            reply = decode_message(raw)
            self.log(dst, src, reply.type.name, prefix)
            return reply
        return send

    def _local_sender(self, name: str):
        lib = f"{name}.lib"

        def send(message: Message) -> Message:
            if name in self._offline:
                raise ConnectFailureError(f"local server {name} is offline")
            server = self.servers[name]
            prefix = self._subject(message, server.secret)
            self.clock.advance(LOCAL_LATENCY_MS)
            self.log(lib, name, message.type.name, prefix)
            raw = server.handle_frame(encode_message(message), Channel.LOCAL)
            self.clock.advance(LOCAL_LATENCY_MS)
            reply = decode_message(raw)
            self.log(name, lib, reply.type.name, prefix)
            return reply
        return send

    # ── Running ──────────────────────────────────────────────────────────
    def run_until(self, elapsed_ms: int) -> None:
        """Advance to start + elapsed_ms, running everything due on the way."""
        self.scheduler.run_until(self.start_ms + elapsed_ms)

    def call_at(self, elapsed_ms: int, fn) -> None:
        self.scheduler.call_at(self.start_ms + elapsed_ms, fn)

    def settle(self, limit_ms: int) -> None:
        """Run queued work until nothing is due before now + limit_ms."""
        self.scheduler.run_until(self.clock.now_ms() + limit_ms)

    def count(self, kind: str, src: Optional[str] = None, dst: Optional[str] = None) -> int:
        """Trace lines of a given type, optionally filtered by endpoints."""
        n = 0
        for line in self.trace:
            _, a, b, k, _ = line.split(" ")
            if k == kind and (src is None or a == src) and (dst is None or b == dst):
                n += 1
        return n
