"""Stateless client agent: trains or validates on request, caches model
packages by digest, and publishes adverts and heartbeats."""

from __future__ import annotations

import json
import logging
import os
import shutil
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .discovery import ADVERT_TOPIC, DISCOVER_TOPIC, HEARTBEAT_TOPIC, BrokerClient, ConnectionLost
from .engine.data import DatasetMissing, load_dataset
from .engine.models import Hyperparameters, evaluate, init_weights, train_local
from .transport import ModelPackage, RpcServer, TrainRequest, TrainResponse, package_digest
from .weights import ShapeMismatch

log = logging.getLogger("fedfleet.client")


class PackageMissing(LookupError):
    pass


class TrainerError(RuntimeError):
    pass


class _Killed(Exception):
    """Raised inside a running trainer when the agent is being shut down."""


@dataclass
class ClientConfig:
    client_id: str
    data_dir: str
    cache_dir: str
    broker: tuple[str, int] | None = None
    rpc_host: str = "127.0.0.1"
    rpc_port: int = 0
    heartbeat_interval: float = 5.0
    wipe_after_round: bool = False
    # artificial per-mini-batch delay, to emulate slower hardware
    minibatch_delay_s: float = 0.0
    # re-advertise every this many heartbeats so a restarted leader relearns us
    advert_every: int = 6
    hardware: dict = field(default_factory=dict)
    benchmark_s: float | None = None

    def __post_init__(self):
        if not self.client_id:
            raise ValueError("client_id must be nonempty")
        if not self.heartbeat_interval > 0:
            raise ValueError("heartbeat_interval must be positive")

    @classmethod
    def from_mapping(cls, raw: dict, env: dict | None = None) -> "ClientConfig":
        """Build from a YAML mapping; ``FEDFLEET_BROKER`` (host:port),
        ``FEDFLEET_RPC_HOST`` and ``FEDFLEET_RPC_PORT`` override endpoints."""
        env = os.environ if env is None else env
        raw = dict(raw)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown client config keys: {sorted(unknown)}")
        if env.get("FEDFLEET_BROKER"):
            raw["broker"] = env["FEDFLEET_BROKER"]
        if env.get("FEDFLEET_RPC_HOST"):
            raw["rpc_host"] = env["FEDFLEET_RPC_HOST"]
        if env.get("FEDFLEET_RPC_PORT"):
            raw["rpc_port"] = int(env["FEDFLEET_RPC_PORT"])
        if isinstance(raw.get("broker"), str):
            host, port = raw["broker"].rsplit(":", 1)
            raw["broker"] = (host, int(port))
        return cls(**raw)


def local_datasets(data_dir: str | Path) -> dict[str, list[int]]:
    """Per-label training sample counts for every dataset under ``data_dir``."""
    out = {}
    root = Path(data_dir)
    if not root.is_dir():
        return out
    for sub in sorted(root.iterdir()):
        if (sub / "train.bin").exists():
            try:
                out[sub.name] = [int(c) for c in load_dataset(sub, "train").label_counts()]
            except (OSError, ValueError) as e:
                log.info("component=client action=skip_dataset name=%s reason=%s", sub.name, e)
    return out


class ClientAgent:
    def __init__(self, config: ClientConfig):
        self.config = config
        self.cache_dir = Path(config.cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._busy = threading.Lock()
        self._stopping = threading.Event()
        self._server: RpcServer | None = None
        self._broker: BrokerClient | None = None
        self._hb_thread: threading.Thread | None = None
        self.heartbeats_sent = 0
        self.requests_served = 0
        bench = self._benchmark_cache()
        if config.benchmark_s is None and bench:
            config.benchmark_s = max(bench.values())

    # ------------------------------------------------------------ package cache
    def _pkg_dir(self, sha: str) -> Path:
        return self.cache_dir / sha

    def cache_lookup(self, sha256: str) -> ModelPackage | None:
        d = self._pkg_dir(sha256)
        meta = d / ".package.json"
        if not meta.exists():
            return None
        try:
            name = json.loads(meta.read_text())["package_name"]
            files = {p.name: p.read_bytes() for p in d.iterdir() if p.name != ".package.json"}
        except (OSError, ValueError, KeyError):
            return None
        if package_digest(files) != sha256:
            log.info("component=client action=cache_corrupt sha=%s", sha256[:12])
            return None
        return ModelPackage(name, files)

    def cache_store(self, pkg: ModelPackage) -> None:
        d = self._pkg_dir(pkg.sha256)
        tmp = d.with_name(d.name + f".tmp{threading.get_ident()}")
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir(parents=True)
        for name, data in pkg.files.items():
            (tmp / name).write_bytes(data)
        (tmp / ".package.json").write_text(json.dumps({"package_name": pkg.package_name}))
        shutil.rmtree(d, ignore_errors=True)
        os.replace(tmp, d)

    def cached_packages(self) -> list[str]:
        return sorted(p.name for p in self.cache_dir.iterdir() if (p / ".package.json").exists())

    def wipe_cache(self) -> None:
        for p in self.cache_dir.iterdir():
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)

    def _benchmark_cache(self) -> dict:
        try:
            return json.loads((self.cache_dir / "benchmarks.json").read_text())
        except (OSError, ValueError):
            return {}

    # ------------------------------------------------------------ request handlers
    def _resolve(self, req: TrainRequest) -> ModelPackage:
        if req.package is not None:
            if req.package.sha256 != req.package_sha256:
                raise _DigestError()
            self.cache_store(req.package)
            return req.package
        pkg = self.cache_lookup(req.package_sha256)
        if pkg is None:
            raise PackageMissing(req.package_sha256)
        return pkg

    def _seed(self, seed: int) -> int:
        return (int(seed) ^ zlib.crc32(self.config.client_id.encode())) & 0x7FFFFFFF

    def _step_hook(self, _step: int) -> None:
        if self._stopping.is_set():
            raise _Killed()
        if self.config.minibatch_delay_s > 0:
            time.sleep(self.config.minibatch_delay_s)

    def _respond(self, req: TrainRequest, work) -> TrainResponse:
        resp = TrainResponse(req.session_id, req.round_number, self.config.client_id)
        if not self._busy.acquire(blocking=False):
            resp.status, resp.error = "error", "Busy"
            return resp
        try:
            pkg = self._resolve(req)
            work(pkg, resp)
        except _DigestError:
            resp.status, resp.error = "error", "DigestMismatch"
        except PackageMissing:
            resp.status, resp.error = "error", "PackageMissing"
        except DatasetMissing as e:
            resp.status, resp.error = "error", f"DatasetMissing: {e}"
        except _Killed:
            raise
        except (ShapeMismatch, ValueError, ArithmeticError) as e:
            resp.status, resp.error = "error", f"TrainerError: {e}"
        finally:
            self._busy.release()
            self.requests_served += 1
        if self.config.wipe_after_round:
            self.wipe_cache()
        resp.cached_packages = self.cached_packages()
        return resp

    def _dataset_dir(self, name: str) -> Path:
        d = Path(self.config.data_dir) / name
        if not (d / "train.bin").exists():
            raise DatasetMissing(f"client {self.config.client_id} has no dataset {name!r}")
        return d

    def handle_train(self, req: TrainRequest) -> TrainResponse:
        if req.validate_only:
            return self.handle_validate(req)

        def work(pkg, resp):
            data = load_dataset(self._dataset_dir(req.dataset), "train")
            hp = Hyperparameters(**dict(req.hyperparameters, seed=self._seed(req.hyperparameters.get("seed", 0))))
            model, metrics = train_local(req.global_model, data, hp, step_hook=self._step_hook)
            resp.local_model = model
            resp.training_metrics = dict(metrics, round=req.round_number)

        return self._respond(req, work)

    def handle_validate(self, req: TrainRequest) -> TrainResponse:
        def work(pkg, resp):
            d = self._dataset_dir(req.dataset)
            if not (d / "val.bin").exists():
                raise DatasetMissing(f"no validation split for {req.dataset!r}")
            data = load_dataset(d, "val")
            if len(data) == 0:
                raise ValueError("empty validation split")
            loss = req.hyperparameters.get("loss", "crossentropy")
            resp.validation_metrics = dict(evaluate(req.global_model, data, loss), round=req.round_number)

        return self._respond(req, work)

    def run_benchmark(self, pkg: ModelPackage, dataset: str, minibatches: int,
                      hyperparameters: dict | None = None) -> float:
        """Time ``minibatches`` mini-batches of training on local data."""
        if minibatches <= 0:
            raise ValueError("minibatches must be positive")
        data = load_dataset(self._dataset_dir(dataset), "train")
        man = pkg.manifest()
        w = init_weights(man.get("family", "logreg"), data.num_features, data.num_labels,
                         hidden=int(man.get("hidden", 32)), seed=0)
        hp = dict(hyperparameters or {})
        bs = int(hp.get("batch_size", 32))
        # enough rows for exactly `minibatches` steps of one epoch
        idx = np.arange(min(len(data), bs * minibatches))
        reps = -(-bs * minibatches // max(1, len(idx)))
        sub = data.subset(np.tile(idx, reps)[: bs * minibatches])
        h = Hyperparameters(epochs=1, batch_size=bs, learning_rate=float(hp.get("learning_rate", 0.01)),
                            optimizer=hp.get("optimizer", "sgd"), loss=hp.get("loss", "crossentropy"))
        t0 = time.perf_counter()
        train_local(w, sub, h, step_hook=self._step_hook)
        seconds = time.perf_counter() - t0
        cache = self._benchmark_cache()
        cache[pkg.sha256] = seconds
        (self.cache_dir / "benchmarks.json").write_text(json.dumps(cache))
        self.config.benchmark_s = seconds
        return seconds

    def _rpc(self, header: dict, sections: dict, ack):
        kind = header.get("type")
        if kind in ("train", "validate"):
            ack()
            try:
                req = TrainRequest.decode(header, sections)
            except Exception as e:
                return {"type": "response", "status": "error", "error": f"bad request: {e}",
                        "session_id": header.get("session_id", ""), "round_number": header.get("round_number", 0),
                        "client_id": self.config.client_id}, []
            resp = self.handle_train(req)
            return resp.encode()
        if kind == "package_probe":
            return {"cached": self.cache_lookup(header["sha256"]) is not None}, []
        if kind == "package_deliver":
            pkg = ModelPackage.from_sections(header["package_name"], sections)
            if pkg.sha256 != header["sha256"]:
                return {"status": "error", "error": "DigestMismatch"}, []
            self.cache_store(pkg)
            return {"status": "ok"}, []
        if kind == "benchmark":
            pkg = self.cache_lookup(header["package_sha256"])
            if pkg is None:
                return {"status": "error", "error": "PackageMissing"}, []
            if not self._busy.acquire(blocking=False):
                return {"status": "error", "error": "Busy"}, []
            try:
                secs = self.run_benchmark(pkg, header["dataset"], int(header["minibatches"]),
                                          header.get("hyperparameters"))
            except (DatasetMissing, ValueError) as e:
                return {"status": "error", "error": str(e)}, []
            finally:
                self._busy.release()
            return {"status": "ok", "seconds": secs}, []
        return {"status": "error", "error": f"unknown request type {kind!r}"}, []

    # ------------------------------------------------------------ lifecycle
    def advertisement(self) -> dict:
        host, port = self.endpoint
        return {"client_id": self.config.client_id, "rpc_endpoint": [host, port],
                "hardware_information": self.config.hardware,
                "dataset_details": local_datasets(self.config.data_dir),
                "benchmark": self.config.benchmark_s,
                "heartbeat_interval": self.config.heartbeat_interval}

    @property
    def endpoint(self) -> tuple[str, int]:
        if self._server is None:
            raise RuntimeError("agent not started")
        return self._server.endpoint

    def _publish(self, topic: str, msg: dict) -> None:
        try:
            self._broker.publish(topic, json.dumps(msg).encode())
        except ConnectionLost:
            log.info("component=client action=publish_failed client=%s topic=%s", self.config.client_id, topic)

    def _on_discover(self, _payload: bytes) -> None:
        if not self._stopping.is_set():
            threading.Thread(target=self._publish, args=(ADVERT_TOPIC, self.advertisement()), daemon=True).start()

    def _heartbeat_loop(self) -> None:
        n = 0
        while not self._stopping.wait(self.config.heartbeat_interval):
            n += 1
            if self.config.advert_every and n % self.config.advert_every == 0:
                self._publish(ADVERT_TOPIC, self.advertisement())
            self._publish(HEARTBEAT_TOPIC, {"client_id": self.config.client_id, "timestamp": time.time()})
            self.heartbeats_sent += 1

    def start(self) -> "ClientAgent":
        self._server = RpcServer(self.config.rpc_host, self.config.rpc_port, self._guarded_rpc).start()
        if self.config.broker is not None:
            self._broker = BrokerClient(*self.config.broker, name=self.config.client_id)
            self._broker.subscribe(DISCOVER_TOPIC, self._on_discover)
            self._publish(ADVERT_TOPIC, self.advertisement())
            self._hb_thread = threading.Thread(target=self._heartbeat_loop,
                                               name=f"heartbeat-{self.config.client_id}", daemon=True)
            self._hb_thread.start()
        log.info("component=client action=start client=%s endpoint=%s:%d", self.config.client_id, *self.endpoint)
        return self

    def _guarded_rpc(self, header, sections, ack):
        if self._stopping.is_set():
            raise ConnectionAbortedError("agent stopped")
        try:
            return self._rpc(header, sections, ack)
        except _Killed:
            raise ConnectionAbortedError("agent stopped") from None

    def stop(self) -> None:
        """Abrupt stop: no goodbye message, in-flight requests are dropped."""
        self._stopping.set()
        if self._server is not None:
            self._server.stop()
        if self._broker is not None:
            self._broker.close()

    @property
    def alive(self) -> bool:
        return not self._stopping.is_set()

    def wait(self) -> None:
        self._stopping.wait()


class _DigestError(Exception):
    pass
