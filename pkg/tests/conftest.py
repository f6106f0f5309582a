import numpy as np
import pytest

from config import server_config
from errors import ConnectFailureError
from schemas.token import HomeLocation, Token
from services.clock import ManualClock, ManualScheduler
from services.server import MOServer

START_MS = 1_000_000


@pytest.fixture
def home():
    return HomeLocation(host="alice", port=4710)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_token(rng, home):
    """Tokens with random hashes; no payload behind them."""
    def make(expire=None, at=None):
        return Token(
            home=at or home,
            expire=int(rng.integers(1, 10**9)) if expire is None else expire,
            hash=rng.bytes(32),
        )
    return make


@pytest.fixture
def clock():
    return ManualClock(START_MS)


@pytest.fixture
def scheduler(clock):
    return ManualScheduler(clock)


def unreachable(addr, message):
    raise ConnectFailureError(f"{addr} unreachable")


@pytest.fixture
def make_server(clock, scheduler):
    """A standalone server on the manual clock; remote sends fail unless a sender is given."""
    def make(name="alice", send=unreachable, **overrides):
        values = {"listen": f"{name}:4710", "local_secret": f"secret-{name}", "flood_interval_ms": 0}
        values.update(overrides)
        return MOServer(server_config(**values), send, clock, scheduler)
    return make
