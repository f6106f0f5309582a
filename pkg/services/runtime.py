"""
A real MO server process: both stream listeners on an asyncio loop in a
background thread, the optional uvicorn status API, and orderly shutdown
that flushes the store file.
"""
import asyncio
import logging
import signal
import socket
import threading
from typing import Optional

import uvicorn

from config import ServerConfig
from errors import BindError
from schemas.token import HomeLocation
from services.server import Channel, MOServer
from services.store import StoreFile
from services.transport import StreamListener, remote_sender

logger = logging.getLogger("mo.server")


def _split(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host, int(port)


def _bind(address: str) -> socket.socket:
    try:
        return socket.create_server(_split(address))
    except OSError as e:
        raise BindError(f"cannot listen on {address}: {e}") from e


class ServerRuntime:
    def __init__(self, config: ServerConfig):
        # Bind first so port 0 resolves before the server learns its own address.
        self._remote_sock = _bind(config.listen)
        try:
            self._local_sock = _bind(config.local_listen)
        except BindError:
            self._remote_sock.close()
            raise
        remote_host, _ = _split(config.listen)
        local_host, _ = _split(config.local_listen)
        self.remote_port = self._remote_sock.getsockname()[1]
        self.local_port = self._local_sock.getsockname()[1]
        self.config = config.model_copy(update={
            "listen": f"{remote_host}:{self.remote_port}",
            "local_listen": f"{local_host}:{self.local_port}",
        })

        store_file = StoreFile(self.config.store_path) if self.config.store_path else None
        self.server = MOServer(self.config, remote_sender(self.config.transport_timeout_s), store_file=store_file)
        self._listeners = [
            StreamListener(self.server, Channel.REMOTE, remote_host, sock=self._remote_sock),
            StreamListener(self.server, Channel.LOCAL, local_host, sock=self._local_sock),
        ]
        self._loop = asyncio.new_event_loop()
        self._thread: Optional[threading.Thread] = None
        self._status: Optional[uvicorn.Server] = None
        self._status_thread: Optional[threading.Thread] = None
        self._stopped = threading.Event()

    @property
    def address(self) -> HomeLocation:
        return self.server.address

    @property
    def local_address(self) -> HomeLocation:
        return HomeLocation.parse(self.config.local_listen)

    def start(self) -> "ServerRuntime":
        self._thread = threading.Thread(target=self._loop.run_forever, name="mo-net", daemon=True)
        self._thread.start()
        for listener in self._listeners:
            asyncio.run_coroutine_threadsafe(listener.start(), self._loop).result()
        self.server.start()
        if self.config.status_port:
            self._start_status()
        logger.info(f"MO server {self.address} up (local channel {self.local_address})")
        return self

    def _start_status(self) -> None:
        from main import create_app

        host, _ = _split(self.config.listen)
        config = uvicorn.Config(create_app(self.server), host=host, port=self.config.status_port, log_level="warning")
        self._status = uvicorn.Server(config)
        self._status_thread = threading.Thread(target=self._status.run, name="mo-status", daemon=True)
        self._status_thread.start()

    def stop(self) -> None:
        if self._stopped.is_set():
            return
        self._stopped.set()
        logger.info("Shutting down...")
        if self._thread is None:
            self._remote_sock.close()
            self._local_sock.close()
            self.server.close()
            return
        if self._status is not None:
            self._status.should_exit = True
            self._status_thread.join(timeout=5)
        for listener in self._listeners:
            asyncio.run_coroutine_threadsafe(listener.stop(), self._loop).result(timeout=5)
        self._loop.call_soon_threadsafe(self._loop.stop)
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.server.close()
        shutdown = getattr(self.server.scheduler, "shutdown", None)
        if shutdown is not None:
            shutdown()
        logger.info("Store flushed, server stopped")

    def serve_forever(self) -> None:
        """Block until SIGINT/SIGTERM, then stop."""
        done = threading.Event()
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: done.set())
        while not done.wait(0.5):
            pass
        self.stop()

    def __enter__(self) -> "ServerRuntime":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
