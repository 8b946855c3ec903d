"""Session state objects, access wrappers, storage backends and checkpoints.

A state object is a key-value map keyed by ``(primary, secondary)`` where
``secondary`` may be ``None``. Two backends share one interface:

* :class:`InMemoryBackend` keeps values in a dictionary.
* :class:`FileBackend` mirrors every mutation into an append-only record log
  (one file per state object) before returning, and compacts the log into a
  snapshot when it grows. Reopening the file replays it, so a killed process
  loses nothing that a ``put`` had returned from.

Values are restricted to what the tagged encoding supports: ``None``, bool,
int, float, str, bytes, list/tuple (stored as list), dict with str or int
keys, float32 ``ndarray`` and :class:`~fedfleet.weights.ModelWeights`. Both
backends copy on the way in and out, so callers never alias stored data.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .weights import MalformedFrame, ModelWeights, deserialize_weights, serialize_weights

log = logging.getLogger("fedfleet.state")

STATE_IDS = ("client_info", "training_session", "client_training", "client_selection", "aggregation")
CLIENT_INFO_SCOPE = "deployment"
CHECKPOINT_MAGIC = b"FFCKPT"
CHECKPOINT_VERSION = 1


class StateError(Exception):
    pass


class WriteOnReadOnly(StateError):
    pass


class BackendUnavailable(StateError):
    pass


class NotFound(StateError):
    pass


class VersionMismatch(StateError):
    pass


# ---------------------------------------------------------------------------
# tagged value encoding

_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_U32 = struct.Struct("<I")


def encode_value(value: Any) -> bytes:
    out: list[bytes] = []
    _encode(value, out)
    return b"".join(out)


def _encode(v: Any, out: list[bytes]) -> None:
    if v is None:
        out.append(b"N")
    elif v is True or isinstance(v, np.bool_) and v:
        out.append(b"T")
    elif v is False or isinstance(v, np.bool_):
        out.append(b"F")
    elif isinstance(v, (int, np.integer)):
        v = int(v)
        if -(2**63) <= v < 2**63:
            out.append(b"i" + _I64.pack(v))
        else:
            raw = str(v).encode()
            out.append(b"I" + _U32.pack(len(raw)) + raw)
    elif isinstance(v, (float, np.floating)):
        out.append(b"f" + _F64.pack(float(v)))
    elif isinstance(v, str):
        raw = v.encode("utf-8")
        out.append(b"s" + _U32.pack(len(raw)) + raw)
    elif isinstance(v, (bytes, bytearray, memoryview)):
        raw = bytes(v)
        out.append(b"b" + _U32.pack(len(raw)) + raw)
    elif isinstance(v, ModelWeights):
        raw = serialize_weights(v)
        out.append(b"w" + _U32.pack(len(raw)) + raw)
    elif isinstance(v, np.ndarray):
        if v.dtype != np.float32:
            raise TypeError(f"only float32 arrays can be stored, got {v.dtype}")
        raw = serialize_weights({"": v})
        out.append(b"a" + _U32.pack(len(raw)) + raw)
    elif isinstance(v, (list, tuple)):
        out.append(b"l" + _U32.pack(len(v)))
        for item in v:
            _encode(item, out)
    elif isinstance(v, dict):
        out.append(b"m" + _U32.pack(len(v)))
        for k, item in v.items():
            if not isinstance(k, (str, int)) or isinstance(k, bool):
                raise TypeError(f"map keys must be str or int, got {type(k).__name__}")
            _encode(k, out)
            _encode(item, out)
    else:
        raise TypeError(f"cannot store value of type {type(v).__name__}")


def decode_value(buf: bytes) -> Any:
    value, pos = _decode(memoryview(buf), 0)
    if pos != len(buf):
        raise MalformedFrame(f"{len(buf) - pos} trailing bytes after value")
    return value


def _need(view: memoryview, pos: int, n: int) -> None:
    if pos + n > len(view):
        raise MalformedFrame("truncated value")


def _decode(view: memoryview, pos: int) -> tuple[Any, int]:
    _need(view, pos, 1)
    tag = bytes(view[pos:pos + 1])
    pos += 1
    if tag == b"N":
        return None, pos
    if tag == b"T":
        return True, pos
    if tag == b"F":
        return False, pos
    if tag == b"i":
        _need(view, pos, 8)
        return _I64.unpack(view[pos:pos + 8])[0], pos + 8
    if tag == b"f":
        _need(view, pos, 8)
        return _F64.unpack(view[pos:pos + 8])[0], pos + 8
    if tag in (b"I", b"s", b"b", b"w", b"a"):
        _need(view, pos, 4)
        (n,) = _U32.unpack(view[pos:pos + 4])
        pos += 4
        _need(view, pos, n)
        raw = bytes(view[pos:pos + n])
        pos += n
        if tag == b"I":
            return int(raw.decode()), pos
        if tag == b"s":
            return raw.decode("utf-8"), pos
        if tag == b"b":
            return raw, pos
        w = deserialize_weights(raw)
        return (w if tag == b"w" else w[""]), pos
    if tag == b"l":
        _need(view, pos, 4)
        (n,) = _U32.unpack(view[pos:pos + 4])
        pos += 4
        items = []
        for _ in range(n):
            item, pos = _decode(view, pos)
            items.append(item)
        return items, pos
    if tag == b"m":
        _need(view, pos, 4)
        (n,) = _U32.unpack(view[pos:pos + 4])
        pos += 4
        out = {}
        for _ in range(n):
            k, pos = _decode(view, pos)
            out[k], pos = _decode(view, pos)
        return out, pos
    raise MalformedFrame(f"unknown value tag {tag!r}")


def clone_value(v: Any) -> Any:
    """Deep copy restricted to storable types; tuples become lists."""
    if v is None or isinstance(v, (bool, str, bytes)):
        return v
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, (bytearray, memoryview)):
        return bytes(v)
    if isinstance(v, ModelWeights):
        return v.copy()
    if isinstance(v, np.ndarray):
        if v.dtype != np.float32:
            raise TypeError(f"only float32 arrays can be stored, got {v.dtype}")
        return v.copy()
    if isinstance(v, (list, tuple)):
        return [clone_value(x) for x in v]
    if isinstance(v, dict):
        out = {}
        for k, x in v.items():
            if not isinstance(k, (str, int)) or isinstance(k, bool):
                raise TypeError(f"map keys must be str or int, got {type(k).__name__}")
            out[k] = clone_value(x)
        return out
    raise TypeError(f"cannot store value of type {type(v).__name__}")


# ---------------------------------------------------------------------------
# backends

Key = tuple[str, "str | None"]


class InMemoryBackend:
    def __init__(self):
        self._data: dict[Key, Any] = {}

    def put(self, key: Key, value: Any) -> None:
        self._data[key] = value

    def put_many(self, items: list[tuple[Key, Any]]) -> None:
        for k, v in items:
            self._data[k] = v

    def get(self, key: Key, default: Any = None) -> Any:
        return self._data.get(key, default)

    def delete(self, key: Key) -> None:
        self._data.pop(key, None)

    def clear(self) -> None:
        self._data.clear()

    def keys(self) -> list[Key]:
        return list(self._data)

    def close(self) -> None:
        pass


_FILE_MAGIC = b"FFSTATE1"
_OP_PUT, _OP_DEL, _OP_CLEAR, _OP_BATCH = 1, 2, 3, 4
_REC = struct.Struct("<II")  # body length, crc32


class FileBackend:
    """Write-through record log for one state object.

    Record: ``len:u32 crc32:u32 body`` where ``body = op:u8 + encoded payload``.
    A torn tail record (process killed mid-write) is discarded on reopen.
    """

    def __init__(self, path: str | os.PathLike, fsync: bool = False, compact_min: int = 512):
        self.path = Path(path)
        self.fsync = fsync
        self.compact_min = compact_min
        self._data: dict[Key, Any] = {}
        self._records = 0
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                self._replay()
            else:
                self._write_snapshot()
            self._fh = open(self.path, "ab")
        except OSError as exc:
            raise BackendUnavailable(f"cannot open durable store {self.path}: {exc}") from exc

    def _replay(self) -> None:
        raw = self.path.read_bytes()
        if not raw.startswith(_FILE_MAGIC):
            raise BackendUnavailable(f"{self.path} is not a state file")
        pos = len(_FILE_MAGIC)
        good = pos
        while pos + _REC.size <= len(raw):
            n, crc = _REC.unpack_from(raw, pos)
            body = raw[pos + _REC.size:pos + _REC.size + n]
            if len(body) != n or zlib.crc32(body) != crc:
                break
            try:
                self._apply(body[0], decode_value(body[1:]) if len(body) > 1 else None)
            except (MalformedFrame, ValueError):
                break
            pos += _REC.size + n
            good = pos
            self._records += 1
        if good != len(raw):
            log.warning("state=%s action=truncate_torn_tail bytes=%d", self.path.name, len(raw) - good)
            with open(self.path, "r+b") as fh:
                fh.truncate(good)

    def _apply(self, op: int, payload: Any) -> None:
        if op == _OP_PUT:
            p, s, v = payload
            self._data[(p, s)] = v
        elif op == _OP_DEL:
            p, s = payload
            self._data.pop((p, s), None)
        elif op == _OP_CLEAR:
            self._data.clear()
        elif op == _OP_BATCH:
            for p, s, v in payload:
                self._data[(p, s)] = v
        else:
            raise ValueError(f"unknown op {op}")

    @staticmethod
    def _record(op: int, payload: Any) -> bytes:
        body = bytes([op]) + (encode_value(payload) if payload is not None else b"")
        return _REC.pack(len(body), zlib.crc32(body)) + body

    def _write_snapshot(self) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(_FILE_MAGIC)
            for (p, s), v in self._data.items():
                fh.write(self._record(_OP_PUT, [p, s, v]))
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())
        os.replace(tmp, self.path)
        self._records = len(self._data)

    def _append(self, op: int, payload: Any) -> None:
        try:
            self._fh.write(self._record(op, payload))
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            self._records += 1
        except (OSError, ValueError) as exc:
            raise BackendUnavailable(f"durable write to {self.path} failed: {exc}") from exc

    def _maybe_compact(self) -> None:
        # only called once the in-memory map reflects the record just logged
        if self._records <= max(self.compact_min, 4 * len(self._data)):
            return
        try:
            self._fh.close()
            self._write_snapshot()
            self._fh = open(self.path, "ab")
        except OSError as exc:
            raise BackendUnavailable(f"compaction of {self.path} failed: {exc}") from exc

    def put(self, key: Key, value: Any) -> None:
        self._append(_OP_PUT, [key[0], key[1], value])
        self._data[key] = value
        self._maybe_compact()

    def put_many(self, items: list[tuple[Key, Any]]) -> None:
        """All-or-nothing: one log record, so a crash never keeps half a batch."""
        self._append(_OP_BATCH, [[k[0], k[1], v] for k, v in items])
        for k, v in items:
            self._data[k] = v
        self._maybe_compact()

    def get(self, key: Key, default: Any = None) -> Any:
        return self._data.get(key, default)

    def delete(self, key: Key) -> None:
        if key in self._data:
            self._append(_OP_DEL, [key[0], key[1]])
            del self._data[key]
            self._maybe_compact()

    def clear(self) -> None:
        self._append(_OP_CLEAR, None)
        self._data.clear()
        self._maybe_compact()

    def keys(self) -> list[Key]:
        return list(self._data)

    def close(self) -> None:
        try:
            self._fh.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# state objects and access wrappers

_MISSING = object()


class StateObject:
    """One of the five session states. This object itself is read-write;
    hand :meth:`ro` views to modules that must not mutate it."""

    def __init__(self, state_id: str, backend=None):
        self.state_id = state_id
        self.backend = backend if backend is not None else InMemoryBackend()
        self._lock = threading.RLock()

    # reads
    def get(self, primary: str, secondary: str | None = None, default: Any = None) -> Any:
        with self._lock:
            v = self.backend.get((primary, secondary), _MISSING)
            return default if v is _MISSING else clone_value(v)

    def secondaries(self, primary: str) -> list[str]:
        """Secondary keys stored under ``primary`` (no values are copied)."""
        with self._lock:
            return sorted(s for p, s in self.backend.keys() if p == primary and s is not None)

    def get_many(self, keys: list[Key], default: Any = None) -> list[Any]:
        """Several reads under one lock acquisition."""
        with self._lock:
            out = []
            for key in keys:
                v = self.backend.get(key, _MISSING)
                out.append(default if v is _MISSING else clone_value(v))
            return out

    def __contains__(self, key) -> bool:
        """``(primary, secondary)`` tests one entry; a bare primary tests for any."""
        with self._lock:
            if isinstance(key, tuple):
                return self.backend.get(key, _MISSING) is not _MISSING
            return any(p == key for p, _ in self.backend.keys())

    def keys(self) -> list[Key]:
        with self._lock:
            return sorted(self.backend.keys(), key=_key_order)

    def primaries(self) -> list[str]:
        with self._lock:
            return sorted({p for p, _ in self.backend.keys()})

    def entries(self, primary: str) -> dict[str | None, Any]:
        """All values under ``primary`` keyed by secondary key."""
        with self._lock:
            return {s: clone_value(self.backend.get((p, s))) for p, s in self.backend.keys() if p == primary}

    def items(self) -> list[tuple[Key, Any]]:
        with self._lock:
            return [(k, clone_value(self.backend.get(k))) for k in self.keys()]

    def is_empty(self) -> bool:
        with self._lock:
            return not self.backend.keys()

    def __len__(self) -> int:
        with self._lock:
            return len(self.backend.keys())

    def digest(self) -> str:
        """SHA-256 over the canonical encoding of all entries."""
        with self._lock:
            h = hashlib.sha256(self.state_id.encode())
            for k in self.keys():
                h.update(encode_value([k[0], k[1], self.backend.get(k)]))
            return h.hexdigest()

    # writes
    def put(self, primary: str, secondary: str | None = None, value: Any = None) -> None:
        if not isinstance(primary, str) or not (secondary is None or isinstance(secondary, str)):
            raise TypeError("state keys must be strings")
        v = clone_value(value)
        with self._lock:
            self.backend.put((primary, secondary), v)

    def delete(self, primary: str, secondary: str | None = None) -> None:
        with self._lock:
            self.backend.delete((primary, secondary))

    def delete_primary(self, primary: str) -> None:
        with self._lock:
            for p, s in list(self.backend.keys()):
                if p == primary:
                    self.backend.delete((p, s))

    def clear(self) -> None:
        with self._lock:
            self.backend.clear()

    def update_many(self, items: dict[Key, Any]) -> None:
        """Write several keys at once; durable backends persist them atomically."""
        batch = []
        for (p, s), v in items.items():
            if not isinstance(p, str) or not (s is None or isinstance(s, str)):
                raise TypeError("state keys must be strings")
            batch.append(((p, s), clone_value(v)))
        with self._lock:
            self.backend.put_many(batch)

    def ro(self) -> "ReadOnlyView":
        return ReadOnlyView(self)

    def rw(self) -> "ReadWriteView":
        return ReadWriteView(self)

    def close(self) -> None:
        self.backend.close()

    def __repr__(self):
        return f"StateObject({self.state_id!r}, entries={len(self)})"


def _key_order(k: Key):
    return (k[0], "" if k[1] is None else "\x00" + k[1])


class ReadOnlyView:
    read_only = True
    _READS = ("get", "get_many", "secondaries", "keys", "primaries", "entries", "items", "is_empty", "digest")

    def __init__(self, state: StateObject):
        self._state = state
        self.state_id = state.state_id

    def __getattr__(self, name):
        if name in self._READS:
            return getattr(self._state, name)
        if name in ("put", "delete", "delete_primary", "clear", "update_many"):
            raise WriteOnReadOnly(f"{self.state_id} is read-only here ({name})")
        raise AttributeError(name)

    def __contains__(self, key) -> bool:
        return key in self._state

    def __len__(self) -> int:
        return len(self._state)

    def __repr__(self):
        return f"ReadOnlyView({self.state_id!r})"


class ReadWriteView(ReadOnlyView):
    read_only = False
    _READS = ReadOnlyView._READS + ("put", "delete", "delete_primary", "clear", "update_many")

    def __repr__(self):
        return f"ReadWriteView({self.state_id!r})"


# ---------------------------------------------------------------------------
# the five states of a session


@dataclass
class SessionStates:
    session_id: str
    client_info: StateObject
    training_session: StateObject
    client_training: StateObject
    client_selection: StateObject
    aggregation: StateObject

    def all(self) -> dict[str, StateObject]:
        return {sid: getattr(self, sid) for sid in STATE_IDS}

    def digests(self) -> dict[str, str]:
        return {sid: obj.digest() for sid, obj in self.all().items()}

    def close(self) -> None:
        for obj in self.all().values():
            obj.close()

    def session_value(self, field: str, default: Any = None) -> Any:
        return self.training_session.get(self.session_id, field, default)


def memory_states(session_id: str, client_info: StateObject | None = None) -> SessionStates:
    objs = {sid: StateObject(sid) for sid in STATE_IDS}
    if client_info is not None:
        objs["client_info"] = client_info
    return SessionStates(session_id, **objs)


def state_file(directory: str | os.PathLike, session_id: str, state_id: str) -> Path:
    scope = CLIENT_INFO_SCOPE if state_id == "client_info" else session_id
    return Path(directory) / f"{scope}.{state_id}"


def durable_states(session_id: str, directory: str | os.PathLike, fresh: bool = False,
                   fsync: bool = False) -> SessionStates:
    """Open (or create) write-through state files under ``directory``.

    ``fresh`` discards previously stored session states; Client Info is
    deployment-scoped and always kept.
    """
    objs = {}
    for sid in STATE_IDS:
        path = state_file(directory, session_id, sid)
        if fresh and sid != "client_info" and path.exists():
            path.unlink()
        objs[sid] = StateObject(sid, FileBackend(path, fsync=fsync))
    return SessionStates(session_id, **objs)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass(frozen=True)
class CheckpointArtifact:
    path: Path
    session_id: str
    round_number: int
    format_version: int = CHECKPOINT_VERSION


def checkpoint(states: SessionStates, destination: str | os.PathLike) -> CheckpointArtifact:
    """Write all five states to ``destination`` atomically (temp file + rename).

    Container: magic, uint16 version, uint32 header length, JSON header with
    a per-state directory of (offset, length), then the encoded state bodies.
    """
    dest = Path(destination)
    bodies = []
    directory = []
    offset = 0
    for sid, obj in states.all().items():
        body = encode_value([[p, s, v] for (p, s), v in obj.items()])
        directory.append({"id": sid, "offset": offset, "length": len(body), "entries": len(obj)})
        bodies.append(body)
        offset += len(body)
    round_number = int(states.session_value("last_round_number", 0) or 0)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "session_id": states.session_id,
        "round_number": round_number,
        "states": directory,
    }, sort_keys=True).encode()
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_name(dest.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack(">HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for body in bodies:
            fh.write(body)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, dest)
    return CheckpointArtifact(dest, states.session_id, round_number)


def read_checkpoint(path: str | os.PathLike, backend_factory=None) -> SessionStates:
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise MalformedFrame(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from(">HI", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    start = len(CHECKPOINT_MAGIC) + 6
    header = json.loads(raw[start:start + hlen])
    base = start + hlen
    objs = {}
    for entry in header["states"]:
        body = raw[base + entry["offset"]:base + entry["offset"] + entry["length"]]
        backend = backend_factory(entry["id"]) if backend_factory else None
        obj = StateObject(entry["id"], backend)
        obj.clear()
        for p, s, v in decode_value(body):
            obj.put(p, s, v)
        objs[entry["id"]] = obj
    missing = set(STATE_IDS) - set(objs)
    if missing:
        raise MalformedFrame(f"checkpoint lacks states {sorted(missing)}")
    return SessionStates(header["session_id"], **objs)


def checkpoint_path(directory: str | os.PathLike, session_id: str, round_number: int) -> Path:
    return Path(directory) / f"{session_id}-r{round_number:06d}.ckpt"


def latest_checkpoint(directory: str | os.PathLike, session_id: str) -> Path | None:
    found = sorted(Path(directory).glob(f"{session_id}-r*.ckpt")) if Path(directory).is_dir() else []
    return found[-1] if found else None


def restore(source: str | os.PathLike, session_id: str) -> SessionStates:
    """Restore the five states for ``session_id``.

    ``source`` may be a checkpoint file, a checkpoint directory, or a durable
    store directory. When a directory holds both, the durable store wins
    because it is never older than the last checkpoint.
    """
    src = Path(source)
    if src.is_file():
        states = read_checkpoint(src)
        if states.session_id != session_id:
            raise NotFound(f"checkpoint {src} belongs to session {states.session_id!r}")
        return states
    if src.is_dir():
        ts = state_file(src, session_id, "training_session")
        if ts.exists():
            states = durable_states(session_id, src)
            if states.training_session.get(session_id, "last_round_number") is not None:
                return states
            states.close()
        ck = latest_checkpoint(src, session_id)
        if ck is not None:
            return read_checkpoint(ck)
    raise NotFound(f"no restorable state for session {session_id!r} in {src}")


def iter_state_files(directory: str | os.PathLike) -> Iterator[Path]:
    yield from sorted(Path(directory).glob("*.*"))
