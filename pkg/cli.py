"""
Operator entry points.

    mo serve    [--config PATH] [--listen ADDR] [--local-listen ADDR] ...
    mo scenario abc [--seed N] [--trace PATH]
    mo fs create [--name NAME]
    mo fs read  TOKEN_HEX
    mo fs write TOKEN_HEX INDEX [--data TEXT]     (stdin when --data is absent)

Exit status: 0 on success, 1 when an operation or a scripted expectation
fails, 2 for bad configuration, scripts or listen addresses.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from config import load_settings
from errors import BadConfigError, BindError, MalformedTokenError, MOError, ScriptMalformedError
from main import setup_logging
from schemas.token import HomeLocation
from services.dao import file_create, file_open, file_read, file_write_block
from services.libserver import Session
from services.runtime import ServerRuntime
from services.scenario import builtin_scenarios, load_script, simnet_run, write_result
from services.tokens import token_decode
from services.transport import local_sender

logger = logging.getLogger("mo.cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _settings(args: argparse.Namespace):
    return load_settings(
        args.config,
        listen=getattr(args, "listen", None),
        local_listen=getattr(args, "local_listen", None),
        cache_capacity=getattr(args, "cache_capacity", None),
        grace_period_ms=getattr(args, "grace_ms", None),
        status_port=getattr(args, "status_port", None),
        log_level=args.log_level,
    )


# ── serve ────────────────────────────────────────────────────────────────────
def cmd_serve(args: argparse.Namespace) -> int:
    settings = _settings(args)
    setup_logging(settings.log_level)
    runtime = ServerRuntime(settings).start()
    print(f"remote {runtime.address}  local {runtime.local_address}", flush=True)
    runtime.serve_forever()
    return EXIT_OK


# ── scenario ─────────────────────────────────────────────────────────────────
def cmd_scenario(args: argparse.Namespace) -> int:
    setup_logging(args.log_level or "WARNING")
    script = load_script(args.script)
    result = simnet_run(script, args.seed)
    if args.trace:
        state_path = write_result(result, Path(args.trace))
        print(f"trace: {args.trace}  state: {state_path}")
    for failure in result.failures:
        print(f"FAIL {failure}", file=sys.stderr)
    verdict = "ok" if result.ok else f"{len(result.failures)} failed"
    print(f"{script.source} seed {result.seed}: {len(result.trace)} events, {verdict}")
    return EXIT_OK if result.ok else EXIT_FAILED


# ── fs ───────────────────────────────────────────────────────────────────────
def _session(args: argparse.Namespace) -> Session:
    settings = _settings(args)
    setup_logging(args.log_level or "WARNING")
    send = local_sender(HomeLocation.parse(settings.local_listen), settings.transport_timeout_s)
    return Session(settings, send, poll=False)


def _token(text: str):
    try:
        return token_decode(bytes.fromhex(text))
    except ValueError as e:
        raise MalformedTokenError(f"not a token: {text!r}") from e


def cmd_fs_create(args: argparse.Namespace) -> int:
    ref = file_create(_session(args), args.name.encode("utf-8"))
    print(ref.token.hex())
    return EXIT_OK


def cmd_fs_read(args: argparse.Namespace) -> int:
    session = _session(args)
    data = file_read(session, file_open(session, _token(args.token)))
    sys.stdout.buffer.write(data)
    sys.stdout.buffer.flush()
    return EXIT_OK


def cmd_fs_write(args: argparse.Namespace) -> int:
    session = _session(args)
    data = args.data.encode("utf-8") if args.data is not None else sys.stdin.buffer.read()
    content = file_write_block(session, file_open(session, _token(args.token)), args.index, data)
    print(content.hex())
    return EXIT_OK


# ── Parser ───────────────────────────────────────────────────────────────────
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mo", description="Micro-object server and tools")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file (default: $MO_CONFIG, then ./.env)")
    common.add_argument("--log-level", default=None, help="DEBUG | INFO | WARNING | ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", parents=[common], help="run an MO server")
    serve.add_argument("--listen", help="remote channel address host:port")
    serve.add_argument("--local-listen", help="local channel address host:port")
    serve.add_argument("--cache-capacity", type=int)
    serve.add_argument("--grace-ms", type=int)
    serve.add_argument("--status-port", type=int)
    serve.set_defaults(func=cmd_serve)

    scenario = sub.add_parser(
        "scenario", parents=[common],
        help=f"replay a scenario on the simulated network (built in: {', '.join(builtin_scenarios())})",
    )
    scenario.add_argument("script", help="built-in scenario name or script path")
    scenario.add_argument("--seed", type=int, help="overrides the script's seed")
    scenario.add_argument("--trace", help="write the delivery trace here (state JSON goes next to it)")
    scenario.set_defaults(func=cmd_scenario)

    fs = sub.add_parser("fs", help="file DAO operations against a running local server")
    fs_sub = fs.add_subparsers(dest="fs_command", required=True)
    create = fs_sub.add_parser("create", parents=[common], help="create an empty file; prints its token")
    create.add_argument("--name", default="")
    create.set_defaults(func=cmd_fs_create)
    read = fs_sub.add_parser("read", parents=[common], help="write the file's content to stdout")
    read.add_argument("token", help="file token (hex)")
    read.set_defaults(func=cmd_fs_read)
    write = fs_sub.add_parser("write", parents=[common], help="replace or append one block")
    write.add_argument("token", help="file token (hex)")
    write.add_argument("index", type=int)
    write.add_argument("--data", help="block content; read from stdin when absent")
    write.set_defaults(func=cmd_fs_write)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (BadConfigError, BindError, ScriptMalformedError) as e:
        print(f"error: [{e.code}] {e.message}", file=sys.stderr)
        return EXIT_USAGE
    except MOError as e:
        print(f"error: [{e.code}] {e.message}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
