"""Deterministic application state machines.

Every spec and engine in the package is parameterised by an ``App``: a pure
``next_state(state, cmd) -> (result, new_state)`` function plus helpers to
encode states for traces and to digest them for cheap comparison.
"""
from __future__ import annotations

import hashlib
import json
from typing import Any, NamedTuple


class Operation(NamedTuple):
    id: str
    kind: str
    arg: Any = None


class Command(NamedTuple):
    """A ``(client, operation)`` pair.  Structural equality, hashable."""

    client: str
    op: Operation


class StateUpdate(NamedTuple):
    """A passive-replication proposal: ``(old, (cmd, result, new))``.

    States are carried in full; ``digest`` gives the compact identifier.
    """

    old: Any
    cmd: Command
    result: Any
    new: Any


class PrefixOrderViolation(Exception):
    """A state update was applied to a state other than the one it was computed on."""


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def digest(state: Any) -> str:
    blob = json.dumps(state, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


class App:
    name = "abstract"

    def __init__(self, initial: Any = None):
        self.initial = self.default_initial() if initial is None else _freeze(initial)

    def default_initial(self) -> Any:
        raise NotImplementedError

    def next_state(self, state: Any, cmd: Command) -> tuple[Any, Any]:
        raise NotImplementedError

    def encode_state(self, state: Any) -> Any:
        return state

    def decode_state(self, raw: Any) -> Any:
        return _freeze(raw)

    def apply_update(self, state: Any, update: StateUpdate) -> Any:
        if digest(self.encode_state(state)) != digest(self.encode_state(update.old)):
            raise PrefixOrderViolation(
                f"update {update.cmd.op.id} computed on {update.old!r}, applied to {state!r}"
            )
        return update.new

    def make_update(self, state: Any, cmd: Command) -> StateUpdate:
        result, new = self.next_state(state, cmd)
        return StateUpdate(state, cmd, result, new)

    def random_op(self, rng, op_id: str) -> Operation:
        raise NotImplementedError


class RegisterApp(App):
    """A single integer register: ``inc``, ``double``, ``set(v)``, ``read``.

    Writes return the new value so that ordering anomalies are visible in
    client outputs.
    """

    name = "register"

    def default_initial(self) -> int:
        return 0

    def next_state(self, state: int, cmd: Command) -> tuple[Any, int]:
        kind, arg = cmd.op.kind, cmd.op.arg
        if kind == "inc":
            return state + 1, state + 1
        if kind == "double":
            return state * 2, state * 2
        if kind == "set" and isinstance(arg, int):
            return arg, arg
        if kind == "read":
            return state, state
        return f"error: bad op {kind}", state

    def decode_state(self, raw: Any) -> int:
        return int(raw)

    def random_op(self, rng, op_id: str) -> Operation:
        kind = rng.choice(("inc", "double", "set", "read"))
        return Operation(op_id, kind, rng.randint(0, 9) if kind == "set" else None)


class KVApp(App):
    """A small key/value map stored as a sorted tuple of ``(key, value)`` pairs."""

    name = "kv"

    def default_initial(self) -> tuple:
        return ()

    def next_state(self, state: tuple, cmd: Command) -> tuple[Any, tuple]:
        kind, arg = cmd.op.kind, cmd.op.arg
        table = dict(state)
        if kind == "get" and arg is not None:
            return table.get(arg), state
        if kind == "put" and isinstance(arg, tuple) and len(arg) == 2:
            key, value = arg
            table[key] = value
            return value, tuple(sorted(table.items()))
        return f"error: bad op {kind}", state

    def encode_state(self, state: tuple) -> list:
        return [list(kv) for kv in state]

    def decode_state(self, raw: Any) -> tuple:
        return tuple(tuple(kv) for kv in raw)

    def random_op(self, rng, op_id: str) -> Operation:
        key = rng.choice("abc")
        if rng.random() < 0.5:
            return Operation(op_id, "get", key)
        return Operation(op_id, "put", (key, rng.randint(0, 9)))


APPS = {"register": RegisterApp, "kv": KVApp}


def make_app(name: str, initial: Any = None) -> App:
    try:
        return APPS[name](initial)
    except KeyError:
        raise ValueError(f"unknown app {name!r}") from None
