"""JSON encoding of domain values carried in trace records.

Payloads are self-describing: a plain command encodes as ``{"c": ..., "op": ...}``
and a state update as ``{"u": [old, cmd, result, new]}``.  Decoding states
needs the application (key/value states are tuples in memory, lists on disk).
"""
from __future__ import annotations

from typing import Any

from .app import App, Command, Operation, StateUpdate, _freeze


def enc_cmd(cmd: Command) -> dict:
    op = cmd.op
    arg = list(op.arg) if isinstance(op.arg, tuple) else op.arg
    return {"c": cmd.client, "op": [op.id, op.kind, arg]}


def dec_cmd(raw: dict) -> Command:
    op_id, kind, arg = raw["op"]
    return Command(raw["c"], Operation(op_id, kind, _freeze(arg)))


def enc_payload(value: Any, app: App) -> Any:
    if value is None:
        return None
    if isinstance(value, StateUpdate):
        return {
            "u": [
                app.encode_state(value.old),
                enc_cmd(value.cmd),
                _plain(value.result),
                app.encode_state(value.new),
            ]
        }
    return enc_cmd(value)


def dec_payload(raw: Any, app: App) -> Any:
    if raw is None:
        return None
    if "u" in raw:
        old, cmd, result, new = raw["u"]
        return StateUpdate(app.decode_state(old), dec_cmd(cmd), _freeze(result), app.decode_state(new))
    return dec_cmd(raw)


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def enc_round(rnd: tuple) -> list:
    return list(rnd)


def dec_round(raw: list) -> tuple:
    return tuple(raw)


def enc_pi(pi, app: App) -> list:
    return [list(pi[0]), enc_payload(pi[1], app)]


def dec_pi(raw: list, app: App):
    from .multiconsensus import PI

    return PI(tuple(raw[0]), dec_payload(raw[1], app))


def enc_progress(progress, app: App) -> dict:
    return {
        "base": list(progress.base_round),
        "slots": [[s, enc_pi(pi, app)] for s, pi in sorted(progress.entries.items())],
    }


def dec_progress(raw: dict, app: App):
    from .multiconsensus import Progress

    return Progress(tuple(raw["base"]), {s: dec_pi(pi, app) for s, pi in raw["slots"]})
