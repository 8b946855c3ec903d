"""Publish/subscribe broker and leader-side client membership tracking.

Broker protocol: newline-delimited UTF-8 JSON over TCP, one object per line,
``{"op": "sub"|"pub", "topic": ..., "payload": <base64>}``. Delivery is
at-most-once to whoever is subscribed at publish time.
"""

from __future__ import annotations

import base64
import json
import logging
import socket
import socketserver
import threading
import time
from typing import Callable

log = logging.getLogger("fedfleet.discovery")

ADVERT_TOPIC = "client/advert"
HEARTBEAT_TOPIC = "client/heartbeat"
# a leader joining late asks every client to advertise again
DISCOVER_TOPIC = "leader/discover"
DEFAULT_MISS_THRESHOLD = 5
SWEEP_PERIOD_S = 1.0
UPTIME_HISTORY = 32

ADVERT_FIELDS = ("client_id", "rpc_endpoint", "hardware_information", "dataset_details",
                 "benchmark", "heartbeat_interval")
HEARTBEAT_FIELDS = ("client_id", "timestamp")


class MalformedAdvert(ValueError):
    pass


class ConnectionLost(ConnectionError):
    pass


def _line(op: str, topic: str, payload: bytes = b"") -> bytes:
    return (json.dumps({"op": op, "topic": topic, "payload": base64.b64encode(payload).decode()})
            + "\n").encode()


# ---------------------------------------------------------------- broker

class Broker:
    """Topic fan-out over plain TCP; no persistence, no QoS."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        outer = self
        self._subs: dict[str, set] = {}
        self._conns: set = set()
        self._lock = threading.Lock()
        self.delivered = 0

        class _Handler(socketserver.StreamRequestHandler):
            def handle(self):
                conn = _Conn(self.connection)
                outer._conns.add(conn)
                try:
                    for raw in self.rfile:
                        try:
                            msg = json.loads(raw)
                            op, topic = msg["op"], msg["topic"]
                        except (ValueError, KeyError, TypeError):
                            log.info("component=broker action=drop reason=bad_frame")
                            continue
                        if op == "sub":
                            outer._subscribe(topic, conn)
                        elif op == "pub":
                            outer._fanout(topic, raw if raw.endswith(b"\n") else raw + b"\n")
                except OSError:
                    pass
                finally:
                    outer._drop(conn)
                    outer._conns.discard(conn)

        class _Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True
            request_queue_size = 512

        self._server = _Server((host, port), _Handler)
        self.endpoint = self._server.server_address[:2]
        self._thread: threading.Thread | None = None

    def _subscribe(self, topic: str, conn: "_Conn") -> None:
        with self._lock:
            self._subs.setdefault(topic, set()).add(conn)

    def _drop(self, conn: "_Conn") -> None:
        with self._lock:
            for subs in self._subs.values():
                subs.discard(conn)

    def _fanout(self, topic: str, raw: bytes) -> None:
        with self._lock:
            targets = list(self._subs.get(topic, ()))
        for conn in targets:
            if conn.send(raw):
                self.delivered += 1
            else:
                self._drop(conn)

    def subscriber_count(self, topic: str) -> int:
        with self._lock:
            return len(self._subs.get(topic, ()))

    def start(self) -> "Broker":
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.1},
                                        name="broker", daemon=True)
        self._thread.start()
        log.info("component=broker action=listen endpoint=%s:%d", *self.endpoint)
        return self

    def stop(self) -> None:
        """Stop accepting and drop every open connection."""
        self._server.shutdown()
        self._server.server_close()
        for conn in list(self._conns):
            try:
                conn.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def serve_forever(self) -> None:
        self._server.serve_forever(poll_interval=0.1)


class _Conn:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()

    def send(self, raw: bytes) -> bool:
        try:
            with self.lock:
                self.sock.sendall(raw)
            return True
        except OSError:
            return False


class BrokerClient:
    """Broker connection that reconnects with exponential backoff and
    re-subscribes its topics."""

    def __init__(self, host: str, port: int, backoff: float = 0.1, max_backoff: float = 2.0,
                 name: str = "client"):
        self.endpoint = (host, int(port))
        self.backoff, self.max_backoff = backoff, max_backoff
        self.name = name
        self._handlers: dict[str, list[Callable[[bytes], None]]] = {}
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._reader: threading.Thread | None = None

    def _connect(self) -> socket.socket:
        delay = self.backoff
        while not self._closed.is_set():
            try:
                sock = socket.create_connection(self.endpoint, timeout=5.0)
                sock.settimeout(None)
                for topic in self._handlers:
                    sock.sendall(_line("sub", topic))
                return sock
            except OSError:
                if self._closed.wait(delay):
                    break
                delay = min(delay * 2, self.max_backoff)
        raise ConnectionLost("broker client closed")

    def _ensure(self) -> socket.socket:
        with self._lock:
            if self._sock is None:
                self._sock = self._connect()
                if self._handlers and (self._reader is None or not self._reader.is_alive()):
                    self._reader = threading.Thread(target=self._read_loop, name=f"broker-sub-{self.name}",
                                                    daemon=True)
                    self._reader.start()
            return self._sock

    def _reset(self, sock) -> None:
        with self._lock:
            if self._sock is sock:
                self._sock = None
        try:
            sock.close()
        except OSError:
            pass

    def subscribe(self, topic: str, handler: Callable[[bytes], None]) -> None:
        fresh = topic not in self._handlers
        self._handlers.setdefault(topic, []).append(handler)
        sock = self._ensure()
        if fresh:
            try:
                sock.sendall(_line("sub", topic))
            except OSError:
                self._reset(sock)
        if self._reader is None or not self._reader.is_alive():
            self._reader = threading.Thread(target=self._read_loop, name=f"broker-sub-{self.name}", daemon=True)
            self._reader.start()

    def publish(self, topic: str, payload: bytes, attempts: int = 5) -> None:
        raw = _line("pub", topic, payload)
        delay = self.backoff
        for _ in range(attempts):
            sock = self._ensure()
            try:
                sock.sendall(raw)
                return
            except OSError:
                self._reset(sock)
                if self._closed.wait(delay):
                    break
                delay = min(delay * 2, self.max_backoff)
        raise ConnectionLost(f"publish to {topic} failed")

    def _read_loop(self) -> None:
        while not self._closed.is_set():
            try:
                sock = self._ensure()
            except ConnectionLost:
                return
            try:
                with sock.makefile("rb") as f:
                    for raw in f:
                        self._dispatch(raw)
            except (OSError, ValueError):
                pass
            self._reset(sock)

    def _dispatch(self, raw: bytes) -> None:
        try:
            msg = json.loads(raw)
            payload = base64.b64decode(msg.get("payload", ""))
        except (ValueError, TypeError):
            return
        for handler in self._handlers.get(msg.get("topic"), ()):
            try:
                handler(payload)
            except Exception:
                log.exception("component=broker_client action=handler_failed topic=%s", msg.get("topic"))

    def close(self) -> None:
        self._closed.set()
        with self._lock:
            sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


# ---------------------------------------------------------------- leader-side handlers

def parse_advert(payload: bytes | dict) -> dict:
    try:
        msg = json.loads(payload) if isinstance(payload, (bytes, str)) else dict(payload)
        cid = msg["client_id"]
        host, port = msg["rpc_endpoint"]
        interval = float(msg["heartbeat_interval"])
    except (ValueError, KeyError, TypeError) as e:
        raise MalformedAdvert(f"unparseable advert: {e}") from None
    if not isinstance(cid, str) or not cid or not interval > 0:
        raise MalformedAdvert("client_id must be nonempty and heartbeat_interval positive")
    extra = set(msg) - set(ADVERT_FIELDS)
    if extra:
        raise MalformedAdvert(f"unknown advert fields {sorted(extra)}")
    return {"client_id": cid, "rpc_endpoint": [str(host), int(port)],
            "hardware_information": dict(msg.get("hardware_information") or {}),
            "dataset_details": dict(msg.get("dataset_details") or {}),
            "benchmark": None if msg.get("benchmark") is None else float(msg["benchmark"]),
            "heartbeat_interval": interval}


def handle_advert(msg, info, now: float | None = None) -> str | None:
    """Insert or refresh a client entry. Returns the client id, or None if dropped."""
    now = time.time() if now is None else now
    try:
        adv = parse_advert(msg)
    except MalformedAdvert as e:
        log.info("component=discovery action=drop_advert reason=%s", e)
        return None
    cid = adv.pop("client_id")
    known = info.get(cid, "join_timestamp") is not None
    if adv["benchmark"] is None:
        adv.pop("benchmark")
    updates = {(cid, k): v for k, v in adv.items()}
    updates[(cid, "heartbeat_timestamp")] = now
    updates[(cid, "is_active")] = True
    if not known:
        updates.update({(cid, "join_timestamp"): now, (cid, "is_training"): False,
                        (cid, "failed_rounds"): [], (cid, "models"): [], (cid, "uptime"): []})
        log.info("component=discovery action=join client=%s", cid)
    info.update_many(updates)
    return cid


def handle_heartbeat(msg, info, now: float | None = None) -> bool:
    """Refresh liveness for a known client; unknown ids are dropped."""
    now = time.time() if now is None else now
    try:
        hb = json.loads(msg) if isinstance(msg, (bytes, str)) else dict(msg)
        cid, ts = hb["client_id"], float(hb["timestamp"])
    except (ValueError, KeyError, TypeError):
        log.info("component=discovery action=drop_heartbeat reason=malformed")
        return False
    if info.get(cid, "join_timestamp") is None:
        log.info("component=discovery action=drop_heartbeat reason=unknown client=%s", cid)
        return False
    history = (info.get(cid, "uptime") or [])[-(UPTIME_HISTORY - 1):] + [ts]
    updates = {(cid, "heartbeat_timestamp"): now, (cid, "uptime"): history}
    if not info.get(cid, "is_active"):
        updates[(cid, "is_active")] = True
        log.info("component=discovery action=reinstate client=%s", cid)
    info.update_many(updates)
    return True


def liveness_sweep(now: float, info, miss_threshold: int = DEFAULT_MISS_THRESHOLD) -> list[str]:
    """Mark clients silent for more than ``miss_threshold`` intervals inactive."""
    if miss_threshold < 1:
        raise ValueError("miss_threshold must be >= 1")
    dead = []
    for cid in info.primaries():
        if not info.get(cid, "is_active"):
            continue
        last = info.get(cid, "heartbeat_timestamp")
        interval = info.get(cid, "heartbeat_interval")
        if last is None or interval is None:
            continue
        if now - float(last) > miss_threshold * float(interval):
            info.put(cid, "is_active", False)
            dead.append(cid)
    for cid in dead:
        log.info("component=discovery action=inactive client=%s", cid)
    return dead


class Discovery:
    """Leader-side subscriber keeping Client Info current, with a periodic
    liveness sweep."""

    def __init__(self, info, broker_endpoint, miss_threshold: int = DEFAULT_MISS_THRESHOLD,
                 sweep_period: float = SWEEP_PERIOD_S, on_change: Callable[[str, str], None] | None = None):
        self.info = info
        self.miss_threshold = miss_threshold
        self.sweep_period = sweep_period
        self.on_change = on_change
        self.client = BrokerClient(*broker_endpoint, name="leader")
        self.inactive_log: list[tuple[str, float]] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _advert(self, payload: bytes) -> None:
        cid = handle_advert(payload, self.info)
        if cid and self.on_change:
            self.on_change("advert", cid)

    def _heartbeat(self, payload: bytes) -> None:
        was_active = None
        try:
            cid = json.loads(payload)["client_id"]
            was_active = self.info.get(cid, "is_active")
        except (ValueError, KeyError, TypeError):
            cid = None
        if handle_heartbeat(payload, self.info) and was_active is False and self.on_change:
            self.on_change("reinstated", cid)

    def sweep_once(self, now: float | None = None) -> list[str]:
        now = time.time() if now is None else now
        dead = liveness_sweep(now, self.info, self.miss_threshold)
        # stamped after the write so the log never runs ahead of the state
        marked = time.time()
        for cid in dead:
            self.inactive_log.append((cid, marked))
            if self.on_change:
                self.on_change("inactive", cid)
        return dead

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.sweep_period):
            try:
                self.sweep_once()
            except Exception:
                log.exception("component=discovery action=sweep_failed")

    def start(self) -> "Discovery":
        self.client.subscribe(ADVERT_TOPIC, self._advert)
        self.client.subscribe(HEARTBEAT_TOPIC, self._heartbeat)
        try:
            self.client.publish(DISCOVER_TOPIC, b"{}")
        except ConnectionLost:
            log.warning("component=discovery action=discover_failed")
        self._thread = threading.Thread(target=self._sweep_loop, name="liveness-sweep", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self.client.close()
