from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from smrlab.app import (
    Command,
    KVApp,
    Operation,
    PrefixOrderViolation,
    RegisterApp,
    StateUpdate,
    digest,
    make_app,
)
from smrlab.codec import dec_payload, enc_payload


def cmd(kind, arg=None, op_id="x", client="client/0"):
    return Command(client, Operation(op_id, kind, arg))


def test_register_examples():
    app = RegisterApp(3)
    assert app.next_state(3, cmd("inc")) == (4, 4)
    assert app.next_state(3, cmd("double")) == (6, 6)
    assert app.next_state(3, cmd("set", 9)) == (9, 9)
    assert app.next_state(3, cmd("read")) == (3, 3)
    assert RegisterApp().initial == 0


def test_malformed_op_is_an_error_result():
    app = RegisterApp()
    res, new = app.next_state(5, cmd("launch"))
    assert new == 5 and res.startswith("error")
    res, new = KVApp().next_state((), cmd("put", "oops"))
    assert new == () and res.startswith("error")


def test_kv_get_on_empty():
    app = KVApp()
    assert app.next_state(app.initial, cmd("get", "k")) == (None, ())
    res, new = app.next_state((), cmd("put", ("k", 1)))
    assert (res, new) == (1, (("k", 1),))


def test_apply_update_prefix_order():
    app = RegisterApp(3)
    four = app.make_update(3, cmd("inc"))
    eight = app.make_update(4, cmd("double"))
    seven = app.make_update(6, cmd("inc"))
    assert app.apply_update(3, four) == 4
    assert app.apply_update(4, eight) == 8
    with pytest.raises(PrefixOrderViolation):
        app.apply_update(4, seven)


def test_make_app_rejects_unknown():
    with pytest.raises(ValueError):
        make_app("ledger")


ops = st.one_of(
    st.sampled_from(["inc", "double", "read"]).map(lambda k: (k, None)),
    st.integers(-5, 20).map(lambda v: ("set", v)),
)
kv_ops = st.one_of(
    st.sampled_from("abc").map(lambda k: ("get", k)),
    st.tuples(st.sampled_from("abc"), st.integers(0, 9)).map(lambda kv: ("put", kv)),
)


@given(st.integers(-50, 50), ops)
def test_next_state_deterministic(state, op):
    app = RegisterApp()
    c = cmd(*op)
    assert app.next_state(state, c) == app.next_state(state, c)


@given(st.lists(kv_ops, max_size=12), st.sampled_from(["register", "kv"]))
def test_active_equals_passive_replay(seq, name):
    app = make_app(name)
    if name == "register":
        seq = [("inc", None) if k in ("get", "put") else (k, a) for k, a in seq]
    cmds = [cmd(k, a, f"o{i}") for i, (k, a) in enumerate(seq)]
    active = app.initial
    for c in cmds:
        _, active = app.next_state(active, c)
    passive, updates, shadow = app.initial, [], app.initial
    for c in cmds:
        u = app.make_update(shadow, c)
        shadow = u.new
        updates.append(u)
    for u in updates:
        passive = app.apply_update(passive, u)
    assert passive == active


def test_register_digest_soundness_exhaustive():
    states = range(-64, 65)
    digests = {digest(s): s for s in states}
    assert len(digests) == len(states)


@given(st.lists(st.tuples(st.sampled_from("abcd"), st.integers(0, 3)), max_size=4, unique_by=lambda kv: kv[0]))
def test_kv_digest_matches_equality(items):
    app = KVApp()
    a = tuple(sorted(items))
    b = tuple(sorted(reversed(items)))
    assert a == b
    assert digest(app.encode_state(a)) == digest(app.encode_state(b))


@given(st.integers(-9, 9), ops)
def test_state_update_codec_roundtrip(state, op):
    app = RegisterApp()
    u = app.make_update(state, cmd(*op))
    assert dec_payload(enc_payload(u, app), app) == u
    assert isinstance(dec_payload(enc_payload(u, app), app), StateUpdate)
