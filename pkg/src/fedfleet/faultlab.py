"""Failure experiments: Poisson-style client kills and leader kill/failover.

Client kills follow a fixed check cadence: at every check time ``t`` (session
seconds) each surviving client dies with probability ``1 - exp(-t / mttf)``.
Dead clients stay dead.
"""

from __future__ import annotations

import json
import logging
import math
import signal
import subprocess
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .config import SessionConfig, load_session_config
from .leader import ResumeFailed
from .metrics import read_metrics

log = logging.getLogger("fedfleet.faultlab")

FAILOVER_TARGETS = ("same-host-restart", "standby-host")


@dataclass
class FaultPlan:
    mttf_s: float = math.inf
    check_interval_s: float = 5.0
    seed: int = 0
    leader_kill_rounds: list[int] = field(default_factory=list)
    # "alternate" cycles through FAILOVER_TARGETS
    failover: str = "alternate"

    def __post_init__(self):
        if not self.mttf_s > 0:
            raise ValueError("mttf_s must be positive")
        if not self.check_interval_s > 0:
            raise ValueError("check_interval_s must be positive")
        if self.failover not in FAILOVER_TARGETS + ("alternate",):
            raise ValueError(f"failover must be one of {FAILOVER_TARGETS} or 'alternate'")

    def target(self, kill_index: int) -> str:
        if self.failover == "alternate":
            return FAILOVER_TARGETS[kill_index % 2]
        return self.failover

    @classmethod
    def from_mapping(cls, raw: dict) -> "FaultPlan":
        raw = dict(raw or {})
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fault plan keys: {sorted(unknown)}")
        if raw.get("mttf_s") is None:
            raw.pop("mttf_s", None)
        return cls(**raw)


def kill_probability(t: float, mttf: float) -> float:
    """Chance a client still alive at check time ``t`` dies at that check."""
    if math.isinf(mttf):
        return 0.0
    return 1.0 - math.exp(-t / mttf)


def check_times(horizon_s: float, interval: float) -> list[float]:
    n = int(math.floor(horizon_s / interval + 1e-9))
    return [interval * k for k in range(1, n + 1)]


def mttf_for_fraction(fraction: float, horizon_s: float, interval: float = 5.0) -> float:
    """MTTF at which a client survives the whole horizon with probability
    ``1 - fraction``: survival is ``exp(-sum(t_k) / mttf)`` over the checks."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    total = sum(check_times(horizon_s, interval))
    if total <= 0:
        raise ValueError("horizon shorter than one check interval")
    return total / -math.log(1.0 - fraction)


def plan_client_kills(clients: list[str], plan: FaultPlan, horizon_s: float) -> list[tuple[str, float]]:
    """Deterministic kill log ``[(client_id, t), ...]`` for a seeded plan."""
    rng = np.random.default_rng(plan.seed)
    alive = sorted(clients)
    kills = []
    for t in check_times(horizon_s, plan.check_interval_s):
        p = kill_probability(t, plan.mttf_s)
        draws = rng.random(len(alive))
        dead = [c for c, u in zip(alive, draws) if u < p]
        kills += [(c, t) for c in dead]
        alive = [c for c in alive if c not in dead]
    return kills


class KillScheduler:
    """Supervisor thread that carries out a kill log against a cluster."""

    def __init__(self, kill_fn, kills: list[tuple[str, float]]):
        self.kill_fn = kill_fn
        self.kills = list(kills)
        self.log: list[tuple[str, float, float]] = []  # (client, planned t, wallclock)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.start_time: float | None = None

    def start(self, start_time: float | None = None) -> "KillScheduler":
        self.start_time = time.time() if start_time is None else start_time
        self._thread = threading.Thread(target=self._run, name="kill-scheduler", daemon=True)
        self._thread.start()
        return self

    def _run(self) -> None:
        for cid, t in self.kills:
            if self._stop.wait(max(0.0, self.start_time + t - time.time())):
                return
            self.kill_fn(cid)
            self.log.append((cid, t, time.time()))
            log.info("component=faultlab action=kill client=%s t=%.1f", cid, t)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)


def schedule_client_kills(cluster, plan: FaultPlan, horizon_s: float,
                          start_time: float | None = None) -> KillScheduler:
    """Start killing ``cluster`` agents per ``plan``; returns the running scheduler."""
    kills = plan_client_kills(cluster.alive(), plan, horizon_s)
    return KillScheduler(cluster.kill, kills).start(start_time)


# ---------------------------------------------------------------- leader failover

@dataclass
class KillRecord:
    round_at_kill: int
    target: str
    killed_at: float
    resumed_at: float | None = None
    restored_round: int | None = None
    restore_time_s: float | None = None
    restore_source: str | None = None

    @property
    def detection_to_resume_s(self) -> float | None:
        return None if self.resumed_at is None else self.resumed_at - self.killed_at

    @property
    def completed_rounds_lost(self) -> int | None:
        return None if self.restored_round is None else max(0, self.round_at_kill - self.restored_round)

    @property
    def rounds_lost(self) -> int | None:
        # completed rounds rolled back plus the round that was in flight
        lost = self.completed_rounds_lost
        return None if lost is None else lost + 1


@dataclass
class RecoveryReport:
    kills: list[KillRecord]
    final_round: int
    final_accuracy: float | None
    exit_code: int
    metrics: list[dict]

    def summary(self) -> dict:
        return {"kills": [dict(asdict(k), detection_to_resume_s=k.detection_to_resume_s, rounds_lost=k.rounds_lost)
                          for k in self.kills],
                "final_round": self.final_round, "final_accuracy": self.final_accuracy,
                "exit_code": self.exit_code}


def _leader_cmd(config_path, broker, metrics_path, log_path, resume: bool, summary_path=None) -> list[str]:
    cmd = [sys.executable, "-m", "fedfleet", "--log-level", "INFO", "--log-file", str(log_path), "leader",
           "--config", str(config_path), "--broker", "%s:%d" % tuple(broker), "--metrics", str(metrics_path)]
    if summary_path:
        cmd += ["--summary", str(summary_path)]
    if resume:
        cmd.append("--resume")
    return cmd


def _read_events(path) -> list[dict]:
    out = []
    p = Path(path)
    if not p.exists():
        return out
    for line in p.read_text().splitlines():
        try:
            out.append(json.loads(line))
        except ValueError:
            pass
    return out


def kill_and_failover(config_path, broker_endpoint, plan: FaultPlan, work_dir, timeout_s: float = 600.0,
                      poll_s: float = 0.02) -> RecoveryReport:
    """Run a leader process, SIGKILL it after each scheduled round and start
    a replacement with ``--resume``. Needs a durable store or checkpoints."""
    cfg = load_session_config(config_path)
    if cfg.state_backend != "durable" and not cfg.checkpoint_dir:
        raise ResumeFailed("neither a durable store nor checkpointing is configured")
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    metrics_path = work / "leader_metrics.jsonl"
    summary_path = work / "leader_summary.json"
    for p in (metrics_path, summary_path):
        if p.exists():
            p.unlink()
    pending = sorted(plan.leader_kill_rounds)
    kills: list[KillRecord] = []
    deadline = time.time() + timeout_s
    proc = subprocess.Popen(_leader_cmd(config_path, broker_endpoint, metrics_path, work / "leader-0.log",
                                        False, summary_path), stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        while True:
            if time.time() > deadline:
                raise TimeoutError("failover experiment did not finish in time")
            events = _read_events(metrics_path)
            rounds = [e["round"] for e in events if e.get("event") == "round"]
            last = max(rounds) if rounds else 0
            if kills and kills[-1].resumed_at is None:
                for e in events:
                    if e.get("event") == "restore" and e["time"] > kills[-1].killed_at:
                        kills[-1].restore_time_s = e["restore_time_s"]
                        kills[-1].restore_source = e.get("source")
                    if e.get("event") == "resume" and e["time"] > kills[-1].killed_at:
                        kills[-1].resumed_at = e["time"]
                        kills[-1].restored_round = e["round"]
            code = proc.poll()
            if code is not None:
                if code == 3 and kills and kills[-1].resumed_at is None:
                    raise ResumeFailed("replacement leader could not restore the session")
                break
            if pending and last >= pending[0] and (not kills or kills[-1].resumed_at is not None):
                pending.pop(0)
                proc.send_signal(signal.SIGKILL)
                proc.wait()
                target = plan.target(len(kills))
                kills.append(KillRecord(last, target, time.time()))
                log.info("component=faultlab action=kill_leader round=%d target=%s", last, target)
                log_name = f"leader-{len(kills)}-{'standby' if target == 'standby-host' else 'restart'}.log"
                proc = subprocess.Popen(_leader_cmd(config_path, broker_endpoint, metrics_path, work / log_name,
                                                    True, summary_path),
                                        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
                continue
            time.sleep(poll_s)
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
    metrics = read_metrics(metrics_path)
    accs = [m["global_accuracy"] for m in metrics if m.get("global_accuracy") is not None]
    return RecoveryReport(kills, max((m["round"] for m in metrics), default=0), accs[-1] if accs else None,
                          proc.returncode, metrics)


# ---------------------------------------------------------------- paired client-failure runs

def client_failure_run(cfg: SessionConfig, cluster_kwargs: dict, data_spec, work_dir, *,
                       plan: FaultPlan | None = None, horizon_s: float = 60.0,
                       detection_grace_s: float | None = None) -> dict:
    """One session over a fresh local cluster, optionally with client kills.

    Returns the session result, the kill log, inactivity detections and the
    dispatch log (client, wallclock) needed to check reselection.
    """
    from .leader import Leader
    from .local import LocalCluster, prepare_data

    work = Path(work_dir)
    n = cluster_kwargs.pop("num_clients")
    _, _, val = prepare_data(work, n, data_spec)
    cluster = LocalCluster(work, n, **cluster_kwargs).start()
    scheduler = None
    try:
        leader = Leader(cfg, cluster.broker_endpoint, validation=val,
                        metrics_path=work / "metrics.jsonl", summary_path=work / "summary.json")
        leader.discovery.start()
        cluster.wait_registered(leader.states.client_info, timeout=60)
        if plan is not None and not math.isinf(plan.mttf_s):
            scheduler = schedule_client_kills(cluster, plan, horizon_s)
        # run the manager directly so discovery keeps sweeping afterwards
        result = leader.manager.run()
        if scheduler is not None:
            scheduler.stop()
            grace = detection_grace_s
            if grace is None:
                grace = (cfg.heartbeat_miss_threshold + 1) * cluster.heartbeat_interval + 2 * leader.discovery.sweep_period
            last_kill = max((w for _, _, w in scheduler.log), default=time.time())
            killed = {c for c, _, _ in scheduler.log}
            while time.time() < last_kill + grace + 1.0:
                if killed <= {c for c, _ in leader.discovery.inactive_log}:
                    break
                time.sleep(0.2)
        leader.discovery.stop()
        dispatches = [(e["client"], e["t"]) for e in (leader.manager.event_log or []) if e["action"] == "dispatch"]
        return {"result": result, "kills": list(scheduler.log) if scheduler else [],
                "inactive": list(leader.discovery.inactive_log), "dispatches": dispatches,
                "num_clients": n}
    finally:
        if scheduler is not None:
            scheduler.stop()
        cluster.stop()


def load_fault_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    unknown = set(raw) - {"client_kills", "leader_kills", "cluster", "data", "horizon_s", "kill_fraction"}
    if unknown:
        raise ValueError(f"unknown fault file keys: {sorted(unknown)}")
    return raw

