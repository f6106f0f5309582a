"""
Stream transport: asyncio listeners for the remote and local channels, a
blocking request/response client, and an in-process loopback for tests.

Framing is the wire header followed by exactly body_len bytes. A connection
carries one request at a time; the client opens one connection per request.
"""
import asyncio
import logging
import socket
import threading
import time
from typing import Optional

from errors import ConnectFailureError, ProtocolError, TransportTimeoutError
from schemas.message import HEADER_SIZE, Message
from schemas.token import HomeLocation
from services.server import Channel, MOServer
from services.wire import decode_header, decode_message, encode_message, error_message

logger = logging.getLogger("mo.net")

DEFAULT_TIMEOUT_S = 5.0


# ── Client ───────────────────────────────────────────────────────────────────
def _recv_exactly(sock: socket.socket, n: int, deadline: float) -> bytes:
    chunks = []
    while n:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TransportTimeoutError("no complete reply before the deadline")
        sock.settimeout(remaining)
        chunk = sock.recv(min(n, 65536))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def transport_send(addr: HomeLocation, message: Message, timeout: float = DEFAULT_TIMEOUT_S) -> Message:
    """Send one request over a fresh stream connection and wait for its reply."""
    deadline = time.monotonic() + timeout
    try:
        sock = socket.create_connection((addr.host, addr.port), timeout=timeout)
    except socket.timeout as e:
        raise TransportTimeoutError(f"connect to {addr} timed out") from e
    except OSError as e:
        raise ConnectFailureError(f"connect to {addr} failed: {e}") from e
    try:
        with sock:
            sock.sendall(encode_message(message))
            header = _recv_exactly(sock, HEADER_SIZE, deadline)
            _, _, body_len = decode_header(header)
            body = _recv_exactly(sock, body_len, deadline)
    except socket.timeout as e:
        raise TransportTimeoutError(f"{addr} did not answer within {timeout}s") from e
    except OSError as e:
        raise ConnectFailureError(f"connection to {addr} failed: {e}") from e
    return decode_message(header + body)


# ── Listeners ────────────────────────────────────────────────────────────────
class StreamListener:
    """Serves one channel of an MOServer on a TCP port."""

    def __init__(
        self,
        server: MOServer,
        channel: Channel,
        host: str = "127.0.0.1",
        port: int = 0,
        sock: Optional[socket.socket] = None,
    ):
        self.server = server
        self.channel = channel
        self.host = host
        self.port = port
        self._sock = sock
        self._aio: Optional[asyncio.Server] = None

    async def start(self) -> int:
        if self._sock is not None:
            self._aio = await asyncio.start_server(self._serve, sock=self._sock)
        else:
            self._aio = await asyncio.start_server(self._serve, self.host, self.port)
        self.port = self._aio.sockets[0].getsockname()[1]
        logger.info(f"{self.channel.value} channel listening on {self.host}:{self.port}")
        return self.port

    async def stop(self) -> None:
        if self._aio is not None:
            self._aio.close()
            await self._aio.wait_closed()

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        try:
            while True:
                try:
                    header = await reader.readexactly(HEADER_SIZE)
                except asyncio.IncompleteReadError:
                    return
                try:
                    _, request_id, body_len = decode_header(header)
                except ProtocolError as e:
                    logger.warning(f"[{e.code}] from {peer}: {e.message}")
                    writer.write(encode_message(error_message(e)))
                    await writer.drain()
                    return
                try:
                    body = await reader.readexactly(body_len)
                except asyncio.IncompleteReadError:
                    return
                reply = await asyncio.to_thread(self.server.handle_frame, header + body, self.channel)
                writer.write(reply)
                await writer.drain()
        except (ConnectionError, OSError) as e:
            logger.debug(f"Connection from {peer} dropped: {e}")
        finally:
            writer.close()


# ── Loopback ─────────────────────────────────────────────────────────────────
class LoopbackTransport:
    """
    In-process delivery between servers that still goes through the byte
    codec. Thread-safe; servers can be taken offline.
    """

    def __init__(self):
        self._servers: dict[HomeLocation, MOServer] = {}
        self._offline: set[HomeLocation] = set()
        self._lock = threading.Lock()
        self.log: list[tuple[str, str, str]] = []

    def attach(self, server: MOServer) -> MOServer:
        with self._lock:
            self._servers[server.address] = server
        return server

    def set_offline(self, addr: HomeLocation, offline: bool = True) -> None:
        with self._lock:
            (self._offline.add if offline else self._offline.discard)(addr)

    def _target(self, addr: HomeLocation) -> MOServer:
        with self._lock:
            server = self._servers.get(addr)
            if server is None or addr in self._offline:
                raise ConnectFailureError(f"{addr} unreachable")
            return server

    def sender(self, source: HomeLocation):
        def send(addr: HomeLocation, message: Message) -> Message:
            server = self._target(addr)
            with self._lock:
                self.log.append((str(source), str(addr), message.type.name))
            return decode_message(server.handle_frame(encode_message(message), Channel.REMOTE))
        return send

    def local_sender(self, addr: HomeLocation):
        def send(message: Message) -> Message:
            server = self._target(addr)
            return decode_message(server.handle_frame(encode_message(message), Channel.LOCAL))
        return send


def remote_sender(timeout: float = DEFAULT_TIMEOUT_S):
    def send(addr: HomeLocation, message: Message) -> Message:
        return transport_send(addr, message, timeout)
    return send


def local_sender(addr: HomeLocation, timeout: float = DEFAULT_TIMEOUT_S):
    def send(message: Message) -> Message:
        return transport_send(addr, message, timeout)
    return send

