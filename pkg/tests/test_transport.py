import socket
import struct
import threading
import time

import numpy as np
import pytest

from fedfleet.engine.models import init_weights
from fedfleet.transport import (
    MAX_HEADER,
    ConnectFailed,
    ConnectionLost,
    DeadlineExceeded,
    DigestMismatch,
    ModelPackage,
    RpcServer,
    Transport,
    TrainRequest,
    TrainResponse,
    builtin_package,
    package_digest,
    read_frame,
    write_frame,
)
from fedfleet.weights import MalformedFrame

PKG = builtin_package("logreg", "logreg")
HP = {"epochs": 1, "batch_size": 16, "learning_rate": 0.1}


def request(round_number=1, deadline=10.0, epochs=1, package=None, sha=None, **kw):
    return TrainRequest("s", round_number, sha or PKG.sha256, init_weights("logreg", 8, 4, seed=1),
                        dict(HP, epochs=epochs), deadline, "blobs", package=package, **kw)


def send(transport, endpoint, req, **kw):
    outcomes = []
    handle = transport.send_train_request(endpoint, req, outcomes.append, **kw)
    assert handle.wait(30)
    time.sleep(0.05)
    return handle, outcomes


def test_frame_roundtrip_over_socketpair():
    a, b = socket.socketpair()
    write_frame(a, {"type": "x", "n": 3}, [("one", b"\x00\x01"), ("two", b""), ("three", b"abc" * 1000)])
    header, sections = read_frame(b)
    assert header == {"type": "x", "n": 3}
    assert sections == {"one": b"\x00\x01", "two": b"", "three": b"abc" * 1000}
    a.close(), b.close()


def test_oversized_header_and_truncation_rejected():
    a, b = socket.socketpair()
    a.sendall(struct.pack(">I", MAX_HEADER + 1))
    with pytest.raises(MalformedFrame):
        read_frame(b)
    c, d = socket.socketpair()
    c.sendall(struct.pack(">I", 100) + b"{")
    c.close()
    with pytest.raises(ConnectionLost):
        read_frame(d)


def test_package_digest_is_canonical():
    files = {"b": b"2", "a": b"1"}
    assert package_digest(files) == package_digest(dict(sorted(files.items())))
    # moving bytes between name and content changes the digest
    assert package_digest({"ab": b""}) != package_digest({"a": b"b"})


def test_message_roundtrip():
    req = request(package=PKG, validate_only=True)
    header, sections = req.encode()
    back = TrainRequest.decode(header, dict(sections))
    assert back.validate_only and back.package.sha256 == PKG.sha256
    assert back.global_model.bit_equal(req.global_model)
    resp = TrainResponse("s", 2, "c1", local_model=req.global_model, training_metrics={"loss": 1.0})
    h, sec = resp.encode()
    assert TrainResponse.decode(h, dict(sec)).local_model.bit_equal(req.global_model)
    with pytest.raises(ValueError):
        request(deadline=0)


def test_healthy_client_trains(make_agent):
    agent = make_agent()
    handle, outcomes = send(Transport(), agent.endpoint, request(package=PKG))
    (resp,) = outcomes
    assert isinstance(resp, TrainResponse) and resp.ok
    assert resp.training_metrics["epochs"] == 1 and resp.training_metrics["num_samples"] == 150
    assert handle.sent_at <= handle.acked_at <= handle.completed_at
    assert PKG.sha256 in resp.cached_packages


def test_package_cached_after_first_delivery(make_agent):
    agent = make_agent()
    t = Transport()
    assert t.deliver_model_package(agent.endpoint, PKG) == "delivered"
    assert t.deliver_model_package(agent.endpoint, PKG) == "cached"
    # a later request names only the digest
    _, outcomes = send(t, agent.endpoint, request())
    assert outcomes[0].ok


def test_missing_package_is_inlined_on_retry(make_agent):
    agent = make_agent()
    _, outcomes = send(Transport(), agent.endpoint, request(), fallback_package=PKG)
    assert outcomes[0].ok


def flip_byte(section_prefix, times):
    count = {"n": 0}

    def hook(name, data):
        if name.startswith(section_prefix) and data and count["n"] < times:
            count["n"] += 1
            return bytes([data[0] ^ 0xFF]) + data[1:]
        return data
    return hook, count


def test_corruption_in_transit_detected(make_agent):
    agent = make_agent()
    hook, _ = flip_byte("file:", 99)
    t = Transport(fault_hook=hook)
    with pytest.raises(DigestMismatch):
        t.deliver_model_package(agent.endpoint, PKG)
    _, outcomes = send(t, agent.endpoint, request(package=PKG))
    assert isinstance(outcomes[0], DigestMismatch)
    assert PKG.sha256 not in agent.cached_packages()


def test_single_corruption_recovers_by_retransmit(make_agent):
    agent = make_agent()
    hook, count = flip_byte("file:", 1)
    _, outcomes = send(Transport(fault_hook=hook), agent.endpoint, request(package=PKG))
    assert outcomes[0].ok and count["n"] == 1


def test_deadline_exceeded_and_late_reply_discarded(make_agent):
    agent = make_agent(delay=0.05)
    handle, outcomes = send(Transport(), agent.endpoint, request(package=PKG, deadline=0.2, epochs=3))
    time.sleep(0.5)
    assert len(outcomes) == 1 and isinstance(outcomes[0], DeadlineExceeded)


def test_client_killed_mid_training(make_agent):
    agent = make_agent(delay=0.05)
    outcomes = []
    handle = Transport().send_train_request(agent.endpoint, request(package=PKG, epochs=5), outcomes.append)
    time.sleep(0.3)
    agent.stop()
    assert handle.wait(10)
    assert isinstance(outcomes[0], ConnectionLost)


def test_connect_failure():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    _, outcomes = send(Transport(connect_timeout=1), ("127.0.0.1", port), request())
    assert isinstance(outcomes[0], ConnectFailed)


def test_benchmark_ratio_tracks_throttle(make_agent):
    fast, slow = make_agent("fast", delay=0.01), make_agent("slow", delay=0.02)
    t = Transport()
    a = t.benchmark_request(fast.endpoint, PKG, 10, "blobs", HP)
    b = t.benchmark_request(slow.endpoint, PKG, 10, "blobs", HP)
    assert b / a == pytest.approx(2.0, rel=0.3)
    with pytest.raises(ValueError):
        t.benchmark_request(fast.endpoint, PKG, 0, "blobs")


def test_each_request_completes_exactly_once_under_chaos(make_agent):
    rng = np.random.default_rng(7)
    agents = [make_agent(f"c{i}", delay=float(rng.choice([0.0, 0.01, 0.03]))) for i in range(4)]
    calls: dict[int, int] = {}
    lock = threading.Lock()
    handles = []
    t = Transport()

    def callback(i):
        def cb(_):
            with lock:
                calls[i] = calls.get(i, 0) + 1
        return cb

    for i in range(40):
        agent = agents[i % 4]
        req = request(round_number=i, package=PKG, deadline=float(rng.choice([0.05, 0.3, 5.0])),
                      epochs=int(rng.integers(1, 3)))
        handles.append(t.send_train_request(agent.endpoint, req, callback(i)))
        if i == 25:
            agents[3].stop()
        time.sleep(0.01)
    for h in handles:
        assert h.wait(30)
    time.sleep(1.0)
    assert calls == {i: 1 for i in range(40)}


def test_rpc_server_stop_drops_connections():
    started = threading.Event()

    def handler(header, sections, ack):
        started.set()
        time.sleep(5)
        return {"ok": True}, []

    server = RpcServer("127.0.0.1", 0, handler).start()
    result = {}

    def call():
        try:
            Transport().call(server.endpoint, {"type": "x"})
        except Exception as e:
            result["error"] = e

    th = threading.Thread(target=call)
    th.start()
    assert started.wait(5)
    server.stop()
    th.join(10)
    assert isinstance(result.get("error"), ConnectionLost)


def test_model_package_sections_roundtrip():
    pkg = ModelPackage("m", {"manifest.json": b"{}", "extra.bin": b"\x00" * 10})
    assert ModelPackage.from_sections("m", dict(pkg.sections())).sha256 == pkg.sha256
    assert PKG.manifest()["family"] == "logreg"
