import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

from cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from config import server_config
from schemas.token import HomeLocation
from services.libserver import Session
from services.runtime import ServerRuntime
from services.transport import local_sender

REPO = Path(__file__).resolve().parent.parent


def test_scenario_command_writes_trace(tmp_path, capsys):
    trace = tmp_path / "abc.trace"
    assert main(["scenario", "abc", "--trace", str(trace)]) == EXIT_OK
    assert trace.read_text().strip()
    assert (tmp_path / "abc.state.json").exists()
    assert "abc.mos seed 7" in capsys.readouterr().out


def test_scenario_failures_and_bad_scripts(tmp_path, capsys):
    failing = tmp_path / "fails.mos"
    failing.write_text("server alice\nat 0 alice create M\nat 10 expect alice cluster M = X\n")
    assert main(["scenario", str(failing)]) == EXIT_FAILED
    assert "FAIL fails.mos:3" in capsys.readouterr().err

    broken = tmp_path / "broken.mos"
    broken.write_text("server alice\nat soon alice create M\n")
    assert main(["scenario", str(broken)]) == EXIT_USAGE
    assert "script-malformed" in capsys.readouterr().err


def test_bad_config(tmp_path):
    assert main(["fs", "read", "00", "--config", str(tmp_path / "missing.env")]) == EXIT_USAGE
    env = tmp_path / "bad.env"
    env.write_text("MO_CACHE_CAPACITY=0\n")
    assert main(["fs", "read", "00", "--config", str(env)]) == EXIT_USAGE


def test_fs_commands_against_a_running_server(tmp_path, capsys):
    config = server_config(listen="127.0.0.1:0", local_listen="127.0.0.1:0", local_secret="cli-secret",
                           flood_interval_ms=0, transport_timeout_s=2.0)
    with ServerRuntime(config) as rt:
        env = tmp_path / "mo.env"
        env.write_text(
            f"MO_LISTEN={rt.config.listen}\n"
            f"MO_LOCAL_LISTEN={rt.config.local_listen}\n"
            "MO_LOCAL_SECRET=cli-secret\n"
        )
        common = ["--config", str(env)]
        assert main(["fs", "create", "--name", "notes", *common]) == EXIT_OK
        token_hex = capsys.readouterr().out.strip()

        assert main(["fs", "write", token_hex, "0", "--data", "hello ", *common]) == EXIT_OK
        assert main(["fs", "write", token_hex, "1", "--data", "world", *common]) == EXIT_OK
        capsys.readouterr()
        assert main(["fs", "read", token_hex, *common]) == EXIT_OK
        assert capsys.readouterr().out == "hello world"

        assert main(["fs", "read", "not-hex", *common]) == EXIT_FAILED
        assert main(["fs", "write", token_hex, "5", "--data", "gap", *common]) == EXIT_FAILED


def test_serve_refuses_a_taken_port(capsys):
    with socket.create_server(("127.0.0.1", 0)) as taken:
        port = taken.getsockname()[1]
        code = main(["serve", "--listen", f"127.0.0.1:{port}", "--local-listen", "127.0.0.1:0"])
    assert code == EXIT_USAGE
    assert "bind-failure" in capsys.readouterr().err


def _serve(env: Path) -> tuple[subprocess.Popen, Session]:
    proc = subprocess.Popen(
        [sys.executable, str(REPO / "cli.py"), "serve", "--config", str(env)],
        cwd=REPO, stdout=subprocess.PIPE, text=True,
    )
    banner = proc.stdout.readline().split()
    assert banner[0] == "remote", banner
    remote, local = banner[1], banner[3]
    config = server_config(listen=remote, local_listen=local, local_secret="serve-secret")
    time.sleep(0.2)
    return proc, Session(config, local_sender(HomeLocation.parse(local), 2.0), poll=False)


@pytest.mark.skipif(sys.platform == "win32", reason="needs SIGTERM")
def test_serve_stops_on_sigterm_and_keeps_its_store(tmp_path):
    env = tmp_path / "serve.env"
    env.write_text(
        "MO_LISTEN=127.0.0.1:0\n"
        "MO_LOCAL_LISTEN=127.0.0.1:0\n"
        "MO_LOCAL_SECRET=serve-secret\n"
        f"MO_STORE_PATH={tmp_path / 'store.db'}\n"
        "MO_FLOOD_INTERVAL_MS=0\n"
        "MO_LOG_LEVEL=WARNING\n"
    )
    proc, session = _serve(env)
    try:
        mo = session.create_new(session.clock.now_ms() + 600_000, b"outlives the process")
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(10) == EXIT_OK

    proc, session = _serve(env)
    try:
        copy = session.create_copy(mo.token)
        assert session.get_payload(copy) == b"outlives the process"
    finally:
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(10) == EXIT_OK
