"""Framed request/response RPC between the leader and client agents.

Every request uses its own TCP connection. A frame is a 4-byte big-endian
header length, a UTF-8 JSON header, then the binary sections listed in the
header's ``sections`` field as ``[[name, length], ...]``. Weights travel as
WeightWire bytes (see :mod:`fedfleet.weights`).

A train or validate exchange is: request frame, an immediate ``ack`` frame
from the client, then the final response frame.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
import queue
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from .weights import MalformedFrame, ModelWeights, deserialize_weights, serialize_weights

log = logging.getLogger("fedfleet.transport")

MAX_HEADER = 1 << 20
MAX_SECTION = 1 << 30
_LEN = struct.Struct(">I")


class TransportError(Exception):
    """Base for failures surfaced through completion callbacks."""

    kind = "TransportError"

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.kind)
        self.detail = detail


class ConnectFailed(TransportError):
    kind = "ConnectFailed"


class ConnectionLost(TransportError):
    kind = "ConnectionLost"


class DeadlineExceeded(TransportError):
    kind = "DeadlineExceeded"


class DigestMismatch(TransportError):
    kind = "DigestMismatch"


class RemoteError(TransportError):
    """The client answered with ``status=error`` for a non-transport reason."""

    kind = "RemoteError"


# ---------------------------------------------------------------- framing

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionLost(f"peer closed after {len(buf)}/{n} bytes")
        buf += chunk
    return bytes(buf)


def write_frame(sock: socket.socket, header: dict, sections: list[tuple[str, bytes]] = ()) -> None:
    header = dict(header, sections=[[name, len(data)] for name, data in sections])
    raw = json.dumps(header, separators=(",", ":")).encode()
    if len(raw) > MAX_HEADER:
        raise MalformedFrame("header too large")
    sock.sendall(_LEN.pack(len(raw)) + raw)
    for _, data in sections:
        sock.sendall(data)


def read_frame(sock: socket.socket) -> tuple[dict, dict[str, bytes]]:
    (n,) = _LEN.unpack(_recv_exact(sock, 4))
    if n > MAX_HEADER:
        raise MalformedFrame(f"header length {n} exceeds limit")
    try:
        header = json.loads(_recv_exact(sock, n))
    except json.JSONDecodeError as e:
        raise MalformedFrame(f"bad header: {e}") from None
    sections = {}
    for name, size in header.pop("sections", []):
        if not 0 <= size <= MAX_SECTION:
            raise MalformedFrame(f"section {name!r} has bad length {size}")
        sections[name] = _recv_exact(sock, size)
    return header, sections


# ---------------------------------------------------------------- messages

@dataclass
class ModelPackage:
    """Named files plus a digest over their canonical concatenation.

    At desk scale the files are a JSON manifest naming a built-in model
    family and its settings.
    """

    package_name: str
    files: dict[str, bytes]

    @property
    def sha256(self) -> str:
        return package_digest(self.files)

    def sections(self) -> list[tuple[str, bytes]]:
        return [(f"file:{name}", self.files[name]) for name in sorted(self.files)]

    @classmethod
    def from_sections(cls, name: str, sections: dict[str, bytes]) -> "ModelPackage":
        files = {k[5:]: v for k, v in sections.items() if k.startswith("file:")}
        return cls(name, files)

    def manifest(self) -> dict:
        return json.loads(self.files["manifest.json"])


def package_digest(files: dict[str, bytes]) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        raw = name.encode()
        h.update(struct.pack("<I", len(raw)) + raw)
        h.update(struct.pack("<Q", len(files[name])) + files[name])
    return h.hexdigest()


def builtin_package(model_id: str, family: str = "logreg", hidden: int = 32, **extra) -> ModelPackage:
    manifest = {"model_id": model_id, "family": family, "hidden": hidden, **extra}
    return ModelPackage(model_id, {"manifest.json": json.dumps(manifest, sort_keys=True).encode()})


@dataclass
class TrainRequest:
    session_id: str
    round_number: int
    package_sha256: str
    global_model: ModelWeights
    hyperparameters: dict
    deadline_s: float
    dataset: str = ""
    validate_only: bool = False
    package: ModelPackage | None = None

    def __post_init__(self):
        if not self.deadline_s > 0:
            raise ValueError("deadline_s must be positive")

    def encode(self) -> tuple[dict, list[tuple[str, bytes]]]:
        header = {"type": "validate" if self.validate_only else "train",
                  "session_id": self.session_id, "round_number": self.round_number,
                  "package_sha256": self.package_sha256, "hyperparameters": self.hyperparameters,
                  "deadline_s": self.deadline_s, "dataset": self.dataset,
                  "validate_only": self.validate_only,
                  "package_name": self.package.package_name if self.package else None}
        sections = [("global_model", serialize_weights(self.global_model))]
        if self.package is not None:
            sections += self.package.sections()
        return header, sections

    @classmethod
    def decode(cls, header: dict, sections: dict[str, bytes]) -> "TrainRequest":
        pkg = None
        if header.get("package_name") is not None:
            pkg = ModelPackage.from_sections(header["package_name"], sections)
        return cls(header["session_id"], int(header["round_number"]), header["package_sha256"],
                   deserialize_weights(sections.get("global_model", b"")), header["hyperparameters"],
                   float(header["deadline_s"]), header.get("dataset", ""),
                   bool(header.get("validate_only")), pkg)


@dataclass
class TrainResponse:
    session_id: str
    round_number: int
    client_id: str
    status: str = "ok"
    local_model: ModelWeights | None = None
    training_metrics: dict = field(default_factory=dict)
    validation_metrics: dict = field(default_factory=dict)
    error: str | None = None
    cached_packages: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def encode(self) -> tuple[dict, list[tuple[str, bytes]]]:
        header = {"type": "response", "session_id": self.session_id, "round_number": self.round_number,
                  "client_id": self.client_id, "status": self.status, "error": self.error,
                  "training_metrics": self.training_metrics,
                  "validation_metrics": self.validation_metrics,
                  "cached_packages": self.cached_packages}
        sections = []
        if self.local_model is not None:
            sections.append(("local_model", serialize_weights(self.local_model)))
        return header, sections

    @classmethod
    def decode(cls, header: dict, sections: dict[str, bytes]) -> "TrainResponse":
        model = deserialize_weights(sections["local_model"]) if "local_model" in sections else None
        return cls(header["session_id"], int(header["round_number"]), header["client_id"],
                   header["status"], model, header.get("training_metrics") or {},
                   header.get("validation_metrics") or {}, header.get("error"),
                   header.get("cached_packages") or [])


# ---------------------------------------------------------------- leader side

Endpoint = tuple[str, int]


def _connect(endpoint: Endpoint, timeout: float) -> socket.socket:
    try:
        sock = socket.create_connection(tuple(endpoint), timeout=timeout)
    except OSError as e:
        raise ConnectFailed(f"{endpoint[0]}:{endpoint[1]}: {e}") from None
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


class _Workers:
    """Reusable daemon threads. Starting a thread per request costs a context
    switch on a busy single-CPU host; idle workers are reused instead and the
    pool grows only when every worker is blocked."""

    def __init__(self, name: str):
        self._name = name
        self._jobs: queue.SimpleQueue = queue.SimpleQueue()
        self._idle = 0
        self._lock = threading.Lock()
        self._count = itertools.count()

    def submit(self, fn: Callable, *args) -> None:
        with self._lock:
            spawn = self._idle == 0
            if not spawn:
                self._idle -= 1
        self._jobs.put((fn, args))
        if spawn:
            threading.Thread(target=self._loop, name=f"{self._name}-{next(self._count)}", daemon=True).start()

    def _loop(self) -> None:
        while True:
            fn, args = self._jobs.get()
            try:
                fn(*args)
            except Exception:
                log.exception("component=transport action=worker_failed")
            with self._lock:
                self._idle += 1


class _DeadlineWatcher:
    """A single thread expiring outstanding requests in deadline order."""

    def __init__(self):
        self._heap: list = []
        self._cv = threading.Condition()
        self._seq = itertools.count()
        self._thread: threading.Thread | None = None

    def add(self, handle: "InFlight", deadline_s: float) -> None:
        with self._cv:
            heapq.heappush(self._heap, (time.time() + deadline_s, next(self._seq), handle, deadline_s))
            if self._thread is None:
                self._thread = threading.Thread(target=self._run, name="rpc-deadlines", daemon=True)
                self._thread.start()
            self._cv.notify()

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._heap:
                    self._cv.wait()
                when, _, handle, deadline_s = self._heap[0]
                delay = when - time.time()
                if delay > 0:
                    self._cv.wait(delay)
                    continue
                heapq.heappop(self._heap)
            if not handle.done:
                handle._expire(deadline_s)


_deadlines = _DeadlineWatcher()


class InFlight:
    """Handle for one outstanding request; ``on_complete`` fires exactly once."""

    def __init__(self, endpoint: Endpoint, on_complete: Callable):
        self.endpoint = endpoint
        self.sent_at: float | None = None
        self.acked_at: float | None = None
        self.completed_at: float | None = None
        self.outcome = None
        self._callback = on_complete
        self._lock = threading.Lock()
        self._done = threading.Event()
        self._sock: socket.socket | None = None

    @property
    def done(self) -> bool:
        return self._done.is_set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    def _finish(self, outcome) -> bool:
        with self._lock:
            if self._done.is_set():
                return False
            self.outcome = outcome
            self.completed_at = time.time()
            self._done.set()
        try:
            self._callback(outcome)
        except Exception:
            log.exception("component=transport action=callback_failed endpoint=%s", self.endpoint)
        return True

    def _expire(self, deadline_s: float) -> None:
        if self._finish(DeadlineExceeded(f"no response within {deadline_s:.2f}s")):
            sock = self._sock
            if sock is not None:
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass


class Transport:
    """Leader-side RPC client.

    ``fault_hook(section_name, data) -> data`` may rewrite outgoing sections,
    which is how tests corrupt bytes in transit.
    """

    def __init__(self, connect_timeout: float = 5.0, fault_hook: Callable | None = None):
        self.connect_timeout = connect_timeout
        self.fault_hook = fault_hook
        self._workers = _Workers("rpc")

    def _send(self, sock, header, sections) -> None:
        if self.fault_hook is not None:
            sections = [(n, self.fault_hook(n, d)) for n, d in sections]
        write_frame(sock, header, sections)

    def _exchange(self, endpoint, header, sections, timeout=None, on_sent=None, on_ack=None):
        """One connection: send, optionally read an ack, then read the reply."""
        sock = _connect(endpoint, self.connect_timeout)
        try:
            sock.settimeout(timeout)
            if on_sent is not None:
                on_sent(sock)
            self._send(sock, header, sections)
            reply, rsec = read_frame(sock)
            if reply.get("type") == "ack":
                if on_ack is not None:
                    on_ack()
                reply, rsec = read_frame(sock)
            return reply, rsec
        except socket.timeout:
            raise DeadlineExceeded("socket timeout") from None
        except (OSError, MalformedFrame) as e:
            raise ConnectionLost(str(e)) from None
        finally:
            sock.close()

    def send_train_request(self, endpoint: Endpoint, req: TrainRequest, on_complete: Callable,
                           fallback_package: ModelPackage | None = None) -> InFlight:
        """Dispatch without blocking; ``on_complete`` receives a TrainResponse
        or a :class:`TransportError`."""
        handle = InFlight(tuple(endpoint), on_complete)
        handle.sent_at = time.time()
        _deadlines.add(handle, req.deadline_s)
        self._workers.submit(self._run_train, handle, req, fallback_package)
        return handle

    def _run_train(self, handle: InFlight, req: TrainRequest, fallback: ModelPackage | None) -> None:
        def on_sent(sock):
            handle._sock = sock

        def on_ack():
            handle.acked_at = time.time()

        outcome = None
        retried = False
        while True:
            try:
                header, sections = req.encode()
                reply, rsec = self._exchange(handle.endpoint, header, sections, None, on_sent, on_ack)
                outcome = TrainResponse.decode(reply, rsec)
            except TransportError as e:
                outcome = e
            except Exception as e:  # undecodable reply
                outcome = ConnectionLost(f"bad reply: {e}")
            if handle.done:
                break
            if isinstance(outcome, TrainResponse) and outcome.error in ("DigestMismatch", "PackageMissing") \
                    and not retried:
                retried = True
                if outcome.error == "PackageMissing" and req.package is None and fallback is not None:
                    req.package = fallback
                log.info("component=transport action=retransmit reason=%s endpoint=%s",
                         outcome.error, handle.endpoint)
                continue
            break
        if isinstance(outcome, TrainResponse) and outcome.error == "DigestMismatch":
            outcome = DigestMismatch("package digest mismatch after retransmit")
        if not handle._finish(outcome):
            log.info("component=transport action=discard_late endpoint=%s round=%s",
                     handle.endpoint, req.round_number)

    def call(self, endpoint: Endpoint, header: dict, sections=(), timeout: float | None = None):
        """Blocking request/response used for probes and benchmarks."""
        return self._exchange(tuple(endpoint), header, list(sections), timeout)

    def deliver_model_package(self, endpoint: Endpoint, pkg: ModelPackage,
                              timeout: float | None = 30.0) -> str:
        """Ensure the client holds ``pkg``; returns ``"cached"`` or ``"delivered"``."""
        reply, _ = self.call(endpoint, {"type": "package_probe", "sha256": pkg.sha256}, (), timeout)
        if reply.get("cached"):
            return "cached"
        for attempt in range(2):
            reply, _ = self.call(endpoint, {"type": "package_deliver", "sha256": pkg.sha256,
                                            "package_name": pkg.package_name}, pkg.sections(), timeout)
            if reply.get("status") == "ok":
                return "delivered"
            log.info("component=transport action=retransmit reason=%s attempt=%d", reply.get("error"), attempt)
        raise DigestMismatch(f"package {pkg.sha256[:12]} rejected twice")

    def benchmark_request(self, endpoint: Endpoint, pkg: ModelPackage, minibatches: int,
                          dataset: str, hyperparameters: dict | None = None,
                          timeout: float | None = 120.0) -> float:
        """Seconds the client needs for ``minibatches`` training mini-batches."""
        if minibatches <= 0:
            raise ValueError("minibatches must be positive")
        self.deliver_model_package(endpoint, pkg, timeout)
        reply, _ = self.call(endpoint, {"type": "benchmark", "package_sha256": pkg.sha256,
                                        "minibatches": minibatches, "dataset": dataset,
                                        "hyperparameters": hyperparameters or {}}, (), timeout)
        if reply.get("status") != "ok":
            raise RemoteError(reply.get("error") or "benchmark failed")
        return float(reply["seconds"])


# ---------------------------------------------------------------- client side

class RpcServer:
    """Threaded TCP server; ``handler(header, sections, ack)`` returns a reply
    ``(header, sections)``. ``ack()`` sends the immediate acknowledgement."""

    def __init__(self, host: str, port: int, handler: Callable):
        outer = self

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self):
                sock = self.request
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                outer._conns.add(sock)
                try:
                    header, sections = read_frame(sock)

                    def ack():
                        write_frame(sock, {"type": "ack"})

                    reply, rsec = handler(header, sections, ack)
                    write_frame(sock, reply, rsec)
                except (TransportError, OSError, MalformedFrame) as e:
                    log.debug("component=rpc action=drop reason=%s", e)
                finally:
                    outer._conns.discard(sock)

        class _Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True
            request_queue_size = 256

        self._conns: set = set()
        self._server = _Server((host, port), _Handler)
        self.endpoint: Endpoint = self._server.server_address[:2]
        self._thread: threading.Thread | None = None

    def start(self) -> "RpcServer":
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.1},
                                        name=f"rpc-server-{self.endpoint[1]}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        """Stop accepting and drop open connections, as a crash would."""
        self._server.shutdown()
        self._server.server_close()
        for sock in list(self._conns):
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
