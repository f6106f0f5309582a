"""
Scenario scripts: a small line language replayed on the simulated network.

    seed 7
    latency 5 20
    server alice flood_delay_ms=1000
    at 0    alice create M headline
    at 0    alice replicate M flooding 0
    at 100  bob copy M
    at 900  expect bob peers M = alice
    at 2000 net partition alice bob,clare

Object names (M, N1, ...) are bound to tokens when an actor creates them and
are global to the script. `-` stands for the empty list or text. A failing
step or expectation is recorded and the run carries on; the result lists all
failures.
"""
import json
import logging
import shlex
from functools import partial
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from config import server_config
from errors import BadConfigError, MOError, ScenarioAssertionError, ScriptMalformedError
from schemas.replication import PolicyKind, flooding, sustain
from schemas.scenario import ScenarioResult, Script, ServerDecl, Step
from schemas.security import NO_SECURITY, SealedBuffer
from schemas.token import Token
from services.dao import DaoRef, file_create, file_open, file_read, file_write_block
from services.mobject import MicroObject
from services.security import open_sealed
from services.simnet import SimNet

logger = logging.getLogger("mo.sim")

BUILTIN_DIR = Path(__file__).resolve().parent.parent / "scenarios"
SCRIPT_SUFFIX = ".mos"
EMPTY = "-"

# action -> (min args, max args); None means unbounded
ACTIONS: dict[str, tuple[int, Optional[int]]] = {
    "create": (1, 2),
    "copy": (1, 1),
    "add": (2, 2),
    "replicate": (2, 3),
    "fetch": (1, 1),
    "flood": (1, 1),
    "gc": (0, 0),
    "fs-create": (1, 1),
    "fs-open": (1, 1),
    "fs-write": (3, 5),
}
NET_ACTIONS: dict[str, tuple[int, Optional[int]]] = {
    "partition": (1, None),
    "heal": (0, 0),
    "drop": (3, 3),
    "offline": (1, 1),
    "online": (1, 1),
    "latency": (2, 2),
}
EXPECTS: dict[str, tuple[int, Optional[int]]] = {
    "cluster": (3, None),
    "peers": (3, None),
    "payload": (3, None),
    "file": (3, None),
    "has": (1, 1),
    "missing": (1, 1),
    "counter": (3, 3),
}


# ── Parsing ──────────────────────────────────────────────────────────────────
def _check_arity(table: dict, name: str, args: list[str], where: str) -> None:
    if name not in table:
        raise ScriptMalformedError(f"{where}: unknown action {name!r}")
    lo, hi = table[name]
    if len(args) < lo or (hi is not None and len(args) > hi):
        raise ScriptMalformedError(f"{where}: {name} takes {lo}..{hi if hi is not None else 'n'} arguments")


def _int(word: str, where: str) -> int:
    try:
        return int(word)
    except ValueError:
        raise ScriptMalformedError(f"{where}: expected an integer, got {word!r}") from None


def _parse_step(words: list[str], where: str, lineno: int) -> Step:
    if len(words) < 2:
        raise ScriptMalformedError(f"{where}: 'at' needs a time and an actor")
    at = _int(words[0], where)
    if at < 0:
        raise ScriptMalformedError(f"{where}: negative time {at}")
    target, rest = words[1], words[2:]

    if target == "net":
        if not rest:
            raise ScriptMalformedError(f"{where}: net needs an action")
        _check_arity(NET_ACTIONS, rest[0], rest[1:], where)
        return Step(at=at, actor="net", action=rest[0], args=rest[1:], line=lineno)

    if target == "expect":
        if len(rest) < 2:
            raise ScriptMalformedError(f"{where}: expect needs an actor and a check")
        actor, kind, args = rest[0], rest[1], rest[2:]
        _check_arity(EXPECTS, kind, args, where)
        if EXPECTS[kind][0] == 3 and args[1] not in ("=", ">="):
            raise ScriptMalformedError(f"{where}: expect {kind} needs '=' after the object")
        return Step(at=at, actor=actor, action="expect", args=[kind, *args], line=lineno)

    if not rest:
        raise ScriptMalformedError(f"{where}: missing action for {target}")
    _check_arity(ACTIONS, rest[0], rest[1:], where)
    return Step(at=at, actor=target, action=rest[0], args=rest[1:], line=lineno)


def parse_script(text: str, source: str = "<script>") -> Script:
    """Parse script text, raising ScriptMalformedError with the offending line."""
    script = Script(source=source)
    for lineno, raw in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        try:
            words = shlex.split(raw, comments=True)
        except ValueError as e:
            raise ScriptMalformedError(f"{where}: {e}") from None
        if not words:
            continue
        head, rest = words[0], words[1:]

        if head == "seed" and len(rest) == 1:
            script.seed = _int(rest[0], where)
        elif head == "latency" and len(rest) == 2:
            lo, hi = _int(rest[0], where), _int(rest[1], where)
            if not 0 <= lo <= hi:
                raise ScriptMalformedError(f"{where}: latency needs 0 <= lo <= hi")
            script.latency = (lo, hi)
        elif head == "server" and rest:
            overrides = {}
            for item in rest[1:]:
                key, sep, value = item.partition("=")
                if not sep:
                    raise ScriptMalformedError(f"{where}: expected key=value, got {item!r}")
                overrides[key] = value
            script.servers.append(ServerDecl(name=rest[0].lower(), overrides=overrides))
        elif head == "at":
            script.steps.append(_parse_step(rest, where, lineno))
        else:
            raise ScriptMalformedError(f"{where}: cannot parse {raw.strip()!r}")

    names = [s.name for s in script.servers]
    if len(set(names)) != len(names):
        raise ScriptMalformedError(f"{source}: duplicate server declaration")
    for decl in script.servers:
        try:
            server_config(**{"listen": f"{decl.name}:1", **decl.overrides})
        except BadConfigError as e:
            raise ScriptMalformedError(f"{source}: server {decl.name}: {e.message}") from None
    for step in script.steps:
        if step.actor != "net" and step.actor not in names:
            raise ScriptMalformedError(f"{source}:{step.line}: undeclared server {step.actor!r}")
    return script


def load_script(name_or_path: str) -> Script:
    """A built-in scenario by name, or a script file."""
    path = Path(name_or_path)
    if not path.is_file():
        path = BUILTIN_DIR / f"{name_or_path}{SCRIPT_SUFFIX}"
        if not path.is_file():
            raise ScriptMalformedError(f"no built-in scenario or script file named {name_or_path!r}")
    return parse_script(path.read_text(encoding="utf-8"), source=path.name)


def builtin_scenarios() -> list[str]:
    return sorted(p.stem for p in BUILTIN_DIR.glob(f"*{SCRIPT_SUFFIX}"))


# ── Execution ────────────────────────────────────────────────────────────────
def _values(words: list[str]) -> list[str]:
    out = []
    for w in words:
        out.extend(v for v in w.split(",") if v)
    return [] if out == [EMPTY] else out


def _text(words: list[str]) -> str:
    text = " ".join(words)
    return "" if text == EMPTY else text


def _policy_kind(word: str) -> PolicyKind:
    try:
        return PolicyKind[word.upper()]
    except KeyError:
        raise ScenarioAssertionError(f"unknown policy kind {word!r}") from None


def _probability(word: str) -> float:
    try:
        p = float(word)
    except ValueError:
        p = -1.0
    if not 0.0 <= p <= 1.0:
        raise ScenarioAssertionError(f"drop probability must be within [0, 1], got {word!r}")
    return p


class ScenarioRunner:
    def __init__(self, script: Script, seed: int):
        self.script = script
        self.net = SimNet(seed=seed, latency=script.latency or (5, 20))
        for decl in script.servers:
            self.net.add_server(decl.name, **decl.overrides)
        self.tokens: dict[str, Token] = {}
        self.names: dict[Token, str] = {}
        self.files: dict[tuple[str, str], DaoRef] = {}
        self.failures: list[str] = []

    # ── Names ────────────────────────────────────────────────────────────
    def _bind(self, name: str, token: Token) -> None:
        if name in self.tokens:
            raise ScenarioAssertionError(f"object name {name!r} is already bound")
        self.tokens[name] = token
        self.names[token] = name

    def _token(self, name: str) -> Token:
        token = self.tokens.get(name)
        if token is None:
            raise ScenarioAssertionError(f"no object named {name!r} exists yet")
        return token

    def _name(self, token: Token) -> str:
        return self.names.get(token, token.prefix)

    def _mo(self, actor: str, name: str) -> MicroObject:
        session = self.net.sessions[actor]
        token = self._token(name)
        return session.registered(token) or session.create_copy(token)

    def _file(self, actor: str, name: str) -> DaoRef:
        ref = self.files.get((actor, name))
        if ref is None:
            ref = self.files[(actor, name)] = file_open(self.net.sessions[actor], self._token(name))
        return ref

    # ── Steps ────────────────────────────────────────────────────────────
    def _execute(self, step: Step) -> None:
        label = f"{self.script.source}:{step.line} at {step.at} {step.actor} {step.action} {' '.join(step.args)}"
        try:
            if step.actor == "net":
                self._net(step.action, step.args)
            elif step.action == "expect":
                self._expect(step.actor, step.args[0], step.args[1:])
            else:
                getattr(self, "_do_" + step.action.replace("-", "_"))(step.actor, *step.args)
        except ValidationError as e:
            problem = e.errors()[0]
            self._fail(label, ScriptMalformedError(f"bad argument: {problem['msg']}"))
        except MOError as e:
            self._fail(label, e)

    def _fail(self, label: str, error: MOError) -> None:
        self.failures.append(f"{label.rstrip()}: [{error.code}] {error.message}")
        logger.warning(f"Step failed: {label.rstrip()}: [{error.code}] {error.message}")

    def _do_create(self, actor: str, name: str, text: str = "") -> None:
        session = self.net.sessions[actor]
        expire = self.net.clock.now_ms() + session.config.default_lifetime_ms
        mo = session.create_new(expire, (text or name).encode("utf-8"))
        self._bind(name, mo.token)

    def _do_copy(self, actor: str, name: str) -> None:
        self._mo(actor, name)

    def _do_add(self, actor: str, parent: str, child: str) -> None:
        self.net.sessions[actor].add_to_cluster(self._mo(actor, parent), self._token(child))

    def _do_replicate(self, actor: str, name: str, kind: str, arg: Optional[str] = None) -> None:
        session = self.net.sessions[actor]
        mo = self._mo(actor, name)
        if kind == "stop":
            session.stop_repl(mo, _policy_kind(arg) if arg else None)
        elif kind == "flooding":
            session.put_repl(mo, flooding(_int(arg or "0", name)))
        elif kind == "sustain":
            session.put_repl(mo, sustain(self.net.clock.now_ms() + _int(arg or "0", name)))
        else:
            raise ScenarioAssertionError(f"unknown replication kind {kind!r}")

    def _do_fetch(self, actor: str, name: str) -> None:
        self.net.sessions[actor].get_payload(self._mo(actor, name))

    def _do_flood(self, actor: str, name: str) -> None:
        self.net.servers[actor].flood_step(self._token(name))

    def _do_gc(self, actor: str) -> None:
        self.net.servers[actor].gc_sweep()

    def _do_fs_create(self, actor: str, name: str) -> None:
        ref = file_create(self.net.sessions[actor], name.encode("utf-8"))
        self._bind(name, ref.token)
        self.files[(actor, name)] = ref

    def _do_fs_open(self, actor: str, name: str) -> None:
        self._file(actor, name)

    def _do_fs_write(self, actor: str, name: str, index: str, text: str, *alias: str) -> None:
        if alias and (len(alias) != 2 or alias[0] != "as"):
            raise ScenarioAssertionError("fs-write takes an optional 'as NAME'")
        token = file_write_block(self.net.sessions[actor], self._file(actor, name), _int(index, name), text.encode("utf-8"))
        if alias:
            self._bind(alias[1], token)

    def _net(self, action: str, args: list[str]) -> None:
        named = {"offline": args, "online": args, "drop": args[:2]}.get(action, [])
        for who in named:
            if who not in self.net.servers:
                raise ScenarioAssertionError(f"unknown server {who!r}")
        if action == "partition":
            self.net.partition([set(_values([group])) for group in args])
        elif action == "heal":
            self.net.heal()
        elif action == "drop":
            self.net.set_drop(args[0], args[1], _probability(args[2]))
        elif action == "offline":
            self.net.set_offline(args[0])
        elif action == "online":
            self.net.set_offline(args[0], False)
        elif action == "latency":
            self.net.set_latency(_int(args[0], action), _int(args[1], action))
        self.net.log("net", "-", action.upper())

    # ── Expectations ─────────────────────────────────────────────────────
    def _expect(self, actor: str, kind: str, args: list[str]) -> None:
        try:
            self._check(actor, kind, args)
        except ScenarioAssertionError:
            self.net.log(actor, "expect", "FAIL", kind)
            raise
        self.net.log(actor, "expect", "PASS", kind)

    def _check(self, actor: str, kind: str, args: list[str]) -> None:
        server = self.net.servers[actor]
        if kind == "counter":
            name, op, value = args
            actual, wanted = server.stats[name], _int(value, name)
            if not (actual >= wanted if op == ">=" else actual == wanted):
                raise ScenarioAssertionError(f"{actor} counter {name} is {actual}, expected {op} {wanted}")
            return
        if kind == "file":
            actual = file_read(self.net.sessions[actor], self._file(actor, args[0])).decode("utf-8", "replace")
            if actual != _text(args[2:]):
                raise ScenarioAssertionError(f"{actor} reads file {args[0]} as {actual!r}")
            return

        name = args[0]
        entry = server.lookup(self._token(name), touch=False)
        if kind == "missing":
            if entry is not None:
                raise ScenarioAssertionError(f"{actor} still holds {name}")
            return
        if entry is None:
            raise ScenarioAssertionError(f"{actor} holds no copy of {name}")
        if kind == "has":
            return

        if kind == "cluster":
            actual = sorted(self._name(t) for t in entry.cluster)
            wanted = sorted(_values(args[2:]))
        elif kind == "peers":
            actual = sorted(self.net.name_of(p) for p in entry.repl.peers)
            wanted = sorted(_values(args[2:]))
        else:
            actual = self._plaintext(entry.payload)
            wanted = _text(args[2:])
        if actual != wanted:
            raise ScenarioAssertionError(f"{actor} {kind} of {name} is {actual!r}, expected {wanted!r}")

    @staticmethod
    def _plaintext(payload: Optional[bytes]) -> Optional[str]:
        if payload is None:
            return None
        return open_sealed(NO_SECURITY, SealedBuffer.from_bytes(payload)).decode("utf-8", "replace")

    # ── Running ──────────────────────────────────────────────────────────
    def snapshot(self) -> dict:
        state = {}
        for name, server in sorted(self.net.servers.items()):
            objects = {}
            for location, entry in server.entries():
                objects[self._name(entry.token)] = {
                    "location": location,
                    "home": entry.home,
                    "has_payload": entry.payload is not None,
                    "cluster": [self._name(t) for t in entry.cluster],
                    "peers": sorted(self.net.name_of(p) for p in entry.repl.peers),
                    "policies": sorted(k.name.lower() for k in entry.repl.policies),
                }
            state[name] = {"objects": objects, "counters": dict(sorted(server.stats.items()))}
        return state

    def run(self) -> ScenarioResult:
        for step in self.script.steps:
            self.net.call_at(step.at, partial(self._execute, step))
        self.net.run_until(self.script.duration)
        return ScenarioResult(
            source=self.script.source,
            seed=self.net.seed,
            trace=list(self.net.trace),
            failures=list(self.failures),
            state=self.snapshot(),
        )


def simnet_run(script: Script | str, seed: Optional[int] = None) -> ScenarioResult:
    """Replay a script (parsed or text) on a fresh simulated network."""
    if isinstance(script, str):
        script = parse_script(script)
    seed = seed if seed is not None else (script.seed or 0)
    result = ScenarioRunner(script, seed).run()
    logger.info(f"Scenario {script.source} seed {seed}: {len(result.trace)} events, {len(result.failures)} failures")
    return result


def write_result(result: ScenarioResult, trace_path: Path) -> Path:
    """Write the trace and, next to it, the final state as JSON. Returns the state path."""
    trace_path.write_text("".join(line + "\n" for line in result.trace), encoding="utf-8")
    state_path = trace_path.with_name(trace_path.stem + ".state.json")
    state_path.write_text(
        json.dumps({"seed": result.seed, "failures": result.failures, "state": result.state}, indent=2, sort_keys=True),
        encoding="utf-8",
    )
    return state_path
