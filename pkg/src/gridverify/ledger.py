"""Append-only hash-chained logs standing in for the local, global and pairwise ledgers.

Payloads are plain Python structures (dicts with string keys, lists, ints,
floats, strings, ``None``, numpy arrays) serialized by a small canonical
codec: dict keys sorted, integers as 8-byte little-endian, floats and float
arrays as little-endian IEEE-754 doubles. The same payload therefore always
hashes to the same bytes.
"""
from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .exceptions import AccessViolation

HASH_NAME = "sha256"
GENESIS = bytes(32)
SYSTEM = "system"

LOCAL_KINDS = frozenset({"measurements", "admm_state"})
GLOBAL_KINDS = frozenset({"disagreement", "trust_score", "verdict"})
CHANNEL_KINDS = frozenset({"shared_slice"})


# ------------------------------------------------------------------ codec

def encode(obj: Any) -> bytes:
    out = bytearray()
    _enc(obj, out)
    return bytes(out)


def _enc(obj, out: bytearray) -> None:
    if obj is None:
        out += b"N"
    elif isinstance(obj, (bool, np.bool_)):
        out += b"T" if obj else b"F"
    elif isinstance(obj, (int, np.integer)):
        out += b"i" + struct.pack("<q", int(obj))
    elif isinstance(obj, (float, np.floating)):
        out += b"f" + struct.pack("<d", float(obj))
    elif isinstance(obj, str):
        raw = obj.encode("utf-8")
        out += b"s" + struct.pack("<I", len(raw)) + raw
    elif isinstance(obj, np.ndarray):
        if obj.dtype.kind in "iub":
            tag, arr = b"I", np.ascontiguousarray(obj, dtype="<i8")
        else:
            tag, arr = b"A", np.ascontiguousarray(obj, dtype="<f8")
        out += tag + struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    elif isinstance(obj, (list, tuple)):
        out += b"L" + struct.pack("<I", len(obj))
        for item in obj:
            _enc(item, out)
    elif isinstance(obj, dict):
        keys = sorted(obj)
        if not all(isinstance(k, str) for k in keys):
            raise TypeError("payload dict keys must be strings")
        out += b"D" + struct.pack("<I", len(keys))
        for k in keys:
            _enc(k, out)
            _enc(obj[k], out)
    else:
        raise TypeError(f"cannot encode {type(obj).__name__}")


def decode(data: bytes) -> Any:
    obj, end = _dec(memoryview(data), 0)
    if end != len(data):
        raise ValueError("trailing bytes after payload")
    return obj


def _dec(buf, i):
    tag = bytes(buf[i:i + 1])
    i += 1
    if tag == b"N":
        return None, i
    if tag in (b"T", b"F"):
        return tag == b"T", i
    if tag == b"i":
        return struct.unpack_from("<q", buf, i)[0], i + 8
    if tag == b"f":
        return struct.unpack_from("<d", buf, i)[0], i + 8
    if tag == b"s":
        (n,) = struct.unpack_from("<I", buf, i)
        i += 4
        return bytes(buf[i:i + n]).decode("utf-8"), i + n
    if tag in (b"A", b"I"):
        (ndim,) = struct.unpack_from("<I", buf, i)
        i += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, i)
        i += 8 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        dtype = "<f8" if tag == b"A" else "<i8"
        arr = np.frombuffer(bytes(buf[i:i + 8 * count]), dtype=dtype).reshape(shape)
        return arr.astype(float if tag == b"A" else np.int64), i + 8 * count
    if tag == b"L":
        (n,) = struct.unpack_from("<I", buf, i)
        i += 4
        items = []
        for _ in range(n):
            item, i = _dec(buf, i)
            items.append(item)
        return items, i
    if tag == b"D":
        (n,) = struct.unpack_from("<I", buf, i)
        i += 4
        d = {}
        for _ in range(n):
            k, i = _dec(buf, i)
            d[k], i = _dec(buf, i)
        return d, i
    raise ValueError(f"unknown payload tag {tag!r}")


def _author_bytes(author) -> bytes:
    return str(author).encode("utf-8")


def entry_digest(prev_hash: bytes, author, kind: str, payload: bytes) -> bytes:
    h = hashlib.new(HASH_NAME)
    h.update(prev_hash)
    h.update(_author_bytes(author) + b"\0")
    h.update(kind.encode("utf-8") + b"\0")
    h.update(payload)
    return h.digest()


# ---------------------------------------------------------------- ledgers

@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    author: int | str
    kind: str
    payload: bytes
    prev_hash: bytes
    entry_hash: bytes

    def data(self) -> Any:
        return decode(self.payload)

    def to_json(self) -> dict:
        return {"seq": self.seq, "author": self.author, "kind": self.kind,
                "payload": base64.b64encode(self.payload).decode("ascii"),
                "prev_hash": self.prev_hash.hex(), "entry_hash": self.entry_hash.hex()}


class Ledger:
    """One hash-chained log with a fixed set of writers, readers and payload kinds."""

    def __init__(self, name: str, writers: Iterable, kinds: Iterable[str], readers: Iterable | None = None):
        self.name = name
        self.writers = frozenset(writers)
        self.readers = None if readers is None else frozenset(readers)
        self.kinds = frozenset(kinds)
        self._entries: list[LedgerEntry] = []
        self._latest: dict[tuple[str, Any], int] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, i: int) -> LedgerEntry:
        return self._entries[i]

    @property
    def head(self) -> bytes:
        return self._entries[-1].entry_hash if self._entries else GENESIS

    def append(self, author, kind: str, payload) -> LedgerEntry:
        """Serialize ``payload`` and chain it onto the log.

        Raises
        ------
        AccessViolation
            ``author`` may not write here or ``kind`` does not belong here.
        """
        if author not in self.writers:
            raise AccessViolation(f"{author!r} may not write to {self.name}")
        if kind not in self.kinds:
            raise AccessViolation(f"{self.name} does not accept {kind!r} entries")
        body = payload if isinstance(payload, bytes) else encode(payload)
        prev = self.head
        entry = LedgerEntry(len(self._entries), author, kind, body, prev,
                            entry_digest(prev, author, kind, body))
        self._entries.append(entry)
        self._latest[(kind, author)] = entry.seq
        self._latest[(kind, None)] = entry.seq
        return entry

    def check_reader(self, reader) -> None:
        if reader is not None and self.readers is not None and reader not in self.readers:
            raise AccessViolation(f"{reader!r} may not read {self.name}")

    def read_latest(self, kind: str, author=None, *, reader=None) -> LedgerEntry | None:
        """Most recent entry of ``kind`` (optionally by ``author``), or None."""
        self.check_reader(reader)
        seq = self._latest.get((kind, author))
        return None if seq is None else self._entries[seq]

    def entries(self, kind: str | None = None, author=None) -> list[LedgerEntry]:
        return [e for e in self._entries
                if (kind is None or e.kind == kind) and (author is None or e.author == author)]

    def dump(self, fh) -> None:
        for e in self._entries:
            fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")


def verify_chain(ledger: Ledger | Iterable[LedgerEntry]) -> tuple[bool, int | None]:
    """Recompute every hash; returns (intact, index of the first bad entry).

    A chain cut short at the end still verifies: detecting truncation needs
    an externally kept head hash.
    """
    prev = GENESIS
    for i, e in enumerate(ledger):
        if e.seq != i or e.prev_hash != prev:
            return False, i
        if entry_digest(prev, e.author, e.kind, e.payload) != e.entry_hash:
            return False, i
        prev = e.entry_hash
    return True, None


def load_dump(lines: Iterable[str]) -> list[LedgerEntry]:
    out = []
    for line in lines:
        if not line.strip():
            continue
        d = json.loads(line)
        out.append(LedgerEntry(d["seq"], d["author"], d["kind"], base64.b64decode(d["payload"]),
                               bytes.fromhex(d["prev_hash"]), bytes.fromhex(d["entry_hash"])))
    return out


class LedgerSet:
    """Local ledger per region, one global ledger and a channel per directed edge.

    ``channel(i, j)`` carries region i's shared slices for neighbor j; only i
    writes it and only i and j read it. The global ledger accepts writes from
    every region and from the ``"system"`` author that publishes trust scores
    and verdicts.
    """

    def __init__(self, regions: Iterable[int], edges: Iterable[tuple[int, int]] = ()):
        self.regions = tuple(sorted(regions))
        self.local = {r: Ledger(f"LL_{r}", [r], LOCAL_KINDS, readers=[r]) for r in self.regions}
        self.glob = Ledger("GL", list(self.regions) + [SYSTEM], GLOBAL_KINDS)
        self.channels: dict[tuple[int, int], Ledger] = {}
        for i, j in edges:
            for a, b in ((i, j), (j, i)):
                if (a, b) not in self.channels:
                    self.channels[(a, b)] = Ledger(f"GL_{a}_{b}", [a], CHANNEL_KINDS, readers=[a, b])

    def channel(self, i: int, j: int) -> Ledger:
        try:
            return self.channels[(i, j)]
        except KeyError:
            raise AccessViolation(f"no private channel between regions {i} and {j}") from None

    def all_ledgers(self) -> list[Ledger]:
        return ([self.local[r] for r in self.regions] + [self.glob]
                + [self.channels[e] for e in sorted(self.channels)])

    def verify(self) -> dict[str, tuple[bool, int | None]]:
        return {lg.name: verify_chain(lg) for lg in self.all_ledgers()}

    def n_entries(self) -> int:
        return sum(len(lg) for lg in self.all_ledgers())

    def dump(self, directory, prefix: str = "") -> list:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for lg in self.all_ledgers():
            path = directory / f"{prefix}{lg.name}.jsonl"
            with open(path, "w") as fh:
                lg.dump(fh)
            paths.append(path)
        return paths
