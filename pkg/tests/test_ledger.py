import hashlib
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridverify.exceptions import AccessViolation
from gridverify.ledger import (
    GENESIS,
    SYSTEM,
    Ledger,
    LedgerEntry,
    LedgerSet,
    decode,
    encode,
    entry_digest,
    load_dump,
    verify_chain,
)


def _ledger(n=0):
    lg = Ledger("LL_1", [1], {"measurements", "admm_state"})
    for k in range(n):
        lg.append(1, "admm_state", {"k": k, "x": np.arange(3.0) * k})
    return lg


def _tamper(lg, index, flip_byte=0):
    e = lg._entries[index]
    body = bytearray(e.payload)
    body[flip_byte] ^= 0x01
    lg._entries[index] = LedgerEntry(e.seq, e.author, e.kind, bytes(body), e.prev_hash, e.entry_hash)


# ------------------------------------------------------------------ chain

def test_first_entry_links_to_genesis():
    e = _ledger().append(1, "measurements", {"s": np.zeros(2)})
    assert e.prev_hash == GENESIS == bytes(32)
    assert e.seq == 0
    assert e.entry_hash == hashlib.sha256(GENESIS + b"1\0measurements\0" + e.payload).digest()


def test_chain_links_and_gapless_sequence():
    lg = _ledger(5)
    assert [e.seq for e in lg] == list(range(5))
    for a, b in zip(lg, list(lg)[1:]):
        assert b.prev_hash == a.entry_hash
    assert lg.head == lg[4].entry_hash


def test_thousand_appends_verify():
    assert verify_chain(_ledger(1000)) == (True, None)


def test_flipped_byte_detected():
    lg = _ledger(10)
    _tamper(lg, 5, flip_byte=3)
    assert verify_chain(lg) == (False, 5)


def test_reordered_entries_detected():
    lg = _ledger(4)
    lg._entries[1], lg._entries[2] = lg._entries[2], lg._entries[1]
    assert verify_chain(lg) == (False, 1)


def test_truncation_not_detectable():
    lg = _ledger(8)
    head = lg.head
    lg._entries.pop()
    assert verify_chain(lg) == (True, None)
    assert lg.head != head  # only an externally kept head reveals it


def test_empty_ledger_verifies():
    assert verify_chain(_ledger()) == (True, None)


# ----------------------------------------------------------------- access

def test_foreign_author_rejected():
    ls = LedgerSet([1, 2, 3], [(1, 2), (2, 3)])
    with pytest.raises(AccessViolation):
        ls.local[2].append(3, "measurements", {"s": 1.0})
    assert len(ls.local[2]) == 0


def test_wrong_kind_rejected():
    ls = LedgerSet([1, 2])
    with pytest.raises(AccessViolation):
        ls.local[1].append(1, "verdict", "none")
    with pytest.raises(AccessViolation):
        ls.glob.append(1, "admm_state", {})


def test_global_ledger_writers():
    ls = LedgerSet([1, 2])
    ls.glob.append(2, "disagreement", {"d": 0.1})
    ls.glob.append(SYSTEM, "trust_score", {"pi": np.array([0.5, 0.5])})
    with pytest.raises(AccessViolation):
        ls.glob.append(9, "disagreement", {"d": 0.1})


def test_channel_access():
    ls = LedgerSet([1, 2, 3], [(1, 2), (2, 3)])
    ch = ls.channel(1, 2)
    ch.append(1, "shared_slice", {"slice": np.ones(2)})
    with pytest.raises(AccessViolation):
        ch.append(2, "shared_slice", {"slice": np.ones(2)})
    assert ch.read_latest("shared_slice", reader=2) is not None
    with pytest.raises(AccessViolation):
        ch.read_latest("shared_slice", reader=3)
    with pytest.raises(AccessViolation):
        ls.channel(1, 3)
    with pytest.raises(AccessViolation):
        ls.local[1].read_latest("measurements", reader=2)


def test_ledger_set_layout():
    ls = LedgerSet([1, 2, 3], [(1, 2), (2, 3)])
    names = [lg.name for lg in ls.all_ledgers()]
    assert names == ["LL_1", "LL_2", "LL_3", "GL", "GL_1_2", "GL_2_1", "GL_2_3", "GL_3_2"]
    assert all(ok for ok, _ in ls.verify().values())
    assert ls.n_entries() == 0


# ------------------------------------------------------------------- read

def test_read_latest():
    lg = Ledger("GL_1_2", [1], {"shared_slice"})
    assert lg.read_latest("shared_slice") is None
    lg.append(1, "shared_slice", {"k": 1})
    lg.append(1, "shared_slice", {"k": 2})
    assert lg.read_latest("shared_slice").data() == {"k": 2}
    assert lg.read_latest("shared_slice", author=1).data() == {"k": 2}
    assert lg.read_latest("shared_slice", author=5) is None
    assert [e.data()["k"] for e in lg.entries("shared_slice")] == [1, 2]


def test_trust_score_matches_detector(golden_report):
    phase = golden_report.phases[0]
    latest = phase.ledgers.glob.read_latest("trust_score", author=SYSTEM).data()
    assert np.array_equal(latest["pi"], phase.final_pi)
    assert latest["regions"].tolist() == list(phase.regions)
    assert latest["k"] == phase.iterations


# ------------------------------------------------------------------ codec

payloads = st.recursive(
    st.none() | st.booleans() | st.integers(-2**63, 2**63 - 1)
    | st.floats(allow_nan=False) | st.text(max_size=20),
    lambda children: st.lists(children, max_size=4)
    | st.dictionaries(st.text(max_size=8), children, max_size=4),
    max_leaves=20,
)


@settings(max_examples=200, deadline=None)
@given(payloads)
def test_codec_roundtrip(obj):
    assert decode(encode(obj)) == obj
    assert encode(obj) == encode(decode(encode(obj)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False), min_size=0, max_size=30), st.integers(1, 3))
def test_array_roundtrip(values, rows):
    arr = np.array(values * rows, dtype=float).reshape(rows, len(values))
    out = decode(encode(arr))
    assert out.shape == arr.shape and out.dtype == np.float64
    assert np.array_equal(out, arr)
    ints = np.arange(len(values) * rows).reshape(rows, len(values))
    assert np.array_equal(decode(encode(ints)), ints)


def test_encoding_is_canonical():
    a = encode({"b": 1.0, "a": [1, 2]})
    b = encode({"a": [1, 2], "b": 1.0})
    assert a == b
    assert encode(np.float64(0.1)) == b"f" + np.array(0.1, dtype="<f8").tobytes()
    assert encode(np.int32(7)) == encode(7)


def test_encoding_rejects_unknown():
    with pytest.raises(TypeError):
        encode({1: "x"})
    with pytest.raises(TypeError):
        encode(object())
    with pytest.raises(ValueError):
        decode(encode(1) + b"x")
    with pytest.raises(ValueError):
        decode(b"?")


def test_same_payload_same_bytes():
    lg = _ledger()
    e1 = lg.append(1, "measurements", {"s": np.array([0.1, 0.2])})
    e2 = lg.append(1, "measurements", {"s": np.array([0.1, 0.2])})
    assert e1.payload == e2.payload
    assert e1.entry_hash != e2.entry_hash


def test_digest_depends_on_every_field():
    base = entry_digest(GENESIS, 1, "verdict", b"x")
    assert base != entry_digest(GENESIS, 2, "verdict", b"x")
    assert base != entry_digest(GENESIS, 1, "trust_score", b"x")
    assert base != entry_digest(GENESIS, 1, "verdict", b"y")
    assert base != entry_digest(b"\1" * 32, 1, "verdict", b"x")


# ------------------------------------------------------------------ dumps

def test_dump_roundtrip(tmp_path):
    lg = _ledger(6)
    buf = io.StringIO()
    lg.dump(buf)
    entries = load_dump(buf.getvalue().splitlines())
    assert verify_chain(entries) == (True, None)
    assert [e.entry_hash for e in entries] == [e.entry_hash for e in lg]
    assert np.array_equal(entries[3].data()["x"], lg[3].data()["x"])

    ls = LedgerSet([1, 2], [(1, 2)])
    ls.local[1].append(1, "measurements", {"s": 1.0})
    paths = ls.dump(tmp_path / "dump", prefix="p0_")
    assert {p.name for p in paths} == {"p0_LL_1.jsonl", "p0_LL_2.jsonl", "p0_GL.jsonl",
                                       "p0_GL_1_2.jsonl", "p0_GL_2_1.jsonl"}
    back = load_dump((tmp_path / "dump" / "p0_LL_1.jsonl").read_text().splitlines())
    assert back[0].data() == {"s": 1.0}


def test_tampered_dump_detected():
    lg = _ledger(3)
    buf = io.StringIO()
    lg.dump(buf)
    lines = buf.getvalue().splitlines()
    lines[1] = lines[1].replace('"seq": 1', '"seq": 7')
    assert verify_chain(load_dump(lines)) == (False, 1)
