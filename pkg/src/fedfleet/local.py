"""One-machine deployments: synthetic data preparation plus a broker and a
pool of client agents, run as threads or as separate processes."""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .client import ClientAgent, ClientConfig
from .discovery import Broker
from .engine.data import Dataset, make_blobs, save_dataset, train_val_split
from .engine.partition import PartitionPlan, partition, skew_metrics

log = logging.getLogger("fedfleet.local")


@dataclass
class DataSpec:
    dataset: str = "blobs"
    num_samples: int = 4000
    num_features: int = 20
    num_labels: int = 10
    separation: float = 1.0
    scheme: str = "iid"
    delta: int = 3
    alpha: float = 0.5
    seed: int = 0
    # fraction held back on the leader for global validation
    val_fraction: float = 0.2
    # fraction of each client's shard kept as its local validation split
    client_val_fraction: float = 0.2


def client_ids(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"client-{i:0{width}d}" for i in range(n)]


def prepare_data(root: str | Path, num_clients: int, spec: DataSpec) -> tuple[Dataset, PartitionPlan, Dataset]:
    """Write ``root/leader/<dataset>/val.*`` and ``root/<client>/<dataset>/{train,val}.*``.

    Returns the pooled training data, the partition plan and the leader split.
    """
    root = Path(root)
    full = make_blobs(spec.num_samples, spec.num_features, spec.num_labels, spec.separation, spec.seed)
    train, val = train_val_split(full, spec.val_fraction, spec.seed + 1)
    save_dataset(val, root / "leader" / spec.dataset, "val")
    plan = partition(train, spec.scheme, num_clients, spec.seed, delta=spec.delta, alpha=spec.alpha)
    for i, (cid, idx) in enumerate(zip(client_ids(num_clients), plan.assignment)):
        shard = train.subset(idx)
        d = root / cid / spec.dataset
        if len(shard) >= 2 and spec.client_val_fraction > 0:
            tr, cv = train_val_split(shard, spec.client_val_fraction, spec.seed + 100 + i)
            save_dataset(tr, d, "train")
            save_dataset(cv, d, "val")
        else:
            save_dataset(shard, d, "train")
    cv, js = skew_metrics(plan, train) if len(train) else (0.0, 0.0)
    log.info("component=local action=prepare clients=%d scheme=%s cv=%.3f js=%.3f", num_clients, spec.scheme, cv, js)
    return train, plan, val


class LocalCluster:
    """Broker plus ``num_clients`` agents on localhost.

    ``minibatch_delay`` may be a scalar or one value per client.
    """

    def __init__(self, root: str | Path, num_clients: int, *, mode: str = "thread",
                 heartbeat_interval: float = 5.0, minibatch_delay=0.0, advert_every: int = 6,
                 broker_endpoint: tuple[str, int] | None = None, wipe_after_round: bool = False):
        if mode not in ("thread", "process"):
            raise ValueError("mode must be 'thread' or 'process'")
        self.root = Path(root)
        self.num_clients = num_clients
        self.mode = mode
        self.heartbeat_interval = heartbeat_interval
        delays = np.broadcast_to(np.asarray(minibatch_delay, dtype=float), (num_clients,))
        self.delays = [float(x) for x in delays]
        self.advert_every = advert_every
        self.wipe_after_round = wipe_after_round
        self.ids = client_ids(num_clients)
        self.broker: Broker | None = None
        self._external_broker = broker_endpoint
        self.agents: dict[str, ClientAgent] = {}
        self.procs: dict[str, subprocess.Popen] = {}
        self.killed: dict[str, float] = {}

    @property
    def broker_endpoint(self) -> tuple[str, int]:
        return self._external_broker or self.broker.endpoint

    def client_config(self, i: int) -> ClientConfig:
        cid = self.ids[i]
        return ClientConfig(client_id=cid, data_dir=str(self.root / cid), cache_dir=str(self.root / cid / ".cache"),
                            broker=tuple(self.broker_endpoint), heartbeat_interval=self.heartbeat_interval,
                            minibatch_delay_s=self.delays[i], advert_every=self.advert_every,
                            wipe_after_round=self.wipe_after_round, hardware={"host": "localhost", "slot": i})

    def start(self) -> "LocalCluster":
        if self._external_broker is None:
            self.broker = Broker().start()
        for i, cid in enumerate(self.ids):
            cfg = self.client_config(i)
            if self.mode == "thread":
                self.agents[cid] = ClientAgent(cfg).start()
            else:
                path = self.root / cid / "client.yaml"
                raw = {k: v for k, v in cfg.__dict__.items()}
                raw["broker"] = "%s:%d" % tuple(cfg.broker)
                path.write_text(yaml.safe_dump(raw))
                env = dict(os.environ, PYTHONUNBUFFERED="1")
                log_fh = open(self.root / cid / "client.log", "ab")
                self.procs[cid] = subprocess.Popen(
                    [sys.executable, "-m", "fedfleet", "client", "--config", str(path)],
                    stdout=log_fh, stderr=subprocess.STDOUT, env=env)
                log_fh.close()
        return self

    def alive(self) -> list[str]:
        return [c for c in self.ids if c not in self.killed]

    def kill(self, cid: str) -> None:
        """Terminate one agent without any goodbye; it does not come back."""
        if cid in self.killed:
            return
        self.killed[cid] = time.time()
        if cid in self.agents:
            self.agents[cid].stop()
        elif cid in self.procs:
            self.procs[cid].send_signal(signal.SIGKILL)
            self.procs[cid].wait()
        log.info("component=local action=kill client=%s", cid)

    def wait_registered(self, info, count: int | None = None, timeout: float = 60.0) -> None:
        """Block until ``count`` clients (default all) are active in ``info``."""
        need = self.num_clients if count is None else count
        deadline = time.time() + timeout
        while time.time() < deadline:
            active = [c for c in info.primaries() if info.get(c, "is_active")]
            if len(active) >= need:
                return
            time.sleep(0.05)
        raise TimeoutError(f"only {len(active)} of {need} clients registered")

    def stop(self) -> None:
        for agent in self.agents.values():
            agent.stop()
        for p in self.procs.values():
            if p.poll() is None:
                p.terminate()
        for p in self.procs.values():
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()
        if self.broker is not None:
            self.broker.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
