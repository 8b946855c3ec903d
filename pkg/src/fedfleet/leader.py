"""Leader process: opens (or restores) session states, tracks clients through
the broker, and runs the session manager."""

from __future__ import annotations

import logging
import time

from .config import SessionConfig
from .discovery import Discovery
from .engine.data import DatasetMissing, load_dataset
from .metrics import MetricsWriter
from .session import SessionManager, SessionResult
from .state import NotFound, SessionStates, StateObject, durable_states, latest_checkpoint, memory_states, restore
from .transport import Transport

log = logging.getLogger("fedfleet.leader")


class ResumeFailed(RuntimeError):
    pass


def open_states(cfg: SessionConfig, resume: bool = False,
                client_info: StateObject | None = None) -> tuple[SessionStates, str]:
    """States for a new or resumed session, plus where they came from.

    On resume the durable store wins over disk checkpoints when both exist.
    """
    sid = cfg.session_id
    if cfg.state_backend == "durable":
        states = durable_states(sid, cfg.state_dir, fresh=not resume, fsync=cfg.fsync)
        if not resume:
            return states, "fresh"
        if states.session_value("global_model") is not None:
            return states, "durable"
        states.close()
    elif not resume:
        return memory_states(sid, client_info), "fresh"
    if cfg.checkpoint_dir and latest_checkpoint(cfg.checkpoint_dir, sid) is not None:
        try:
            states = restore(cfg.checkpoint_dir, sid)
        except NotFound as e:
            raise ResumeFailed(str(e)) from None
        if client_info is not None:
            states.client_info = client_info
        return states, "checkpoint"
    raise ResumeFailed(f"no durable store or checkpoint to resume session {sid!r} from")


class Leader:
    def __init__(self, cfg: SessionConfig, broker_endpoint, *, resume: bool = False, metrics_path=None,
                 summary_path=None, client_info: StateObject | None = None, transport: Transport | None = None,
                 validation=None, sweep_period: float = 1.0, **session_kwargs):
        self.cfg = cfg
        self.broker_endpoint = tuple(broker_endpoint)
        self.resume = resume
        self.metrics_path = metrics_path
        t0 = time.perf_counter()
        self.states, self.source = open_states(cfg, resume, client_info)
        self.restore_time_s = time.perf_counter() - t0
        if validation is None and cfg.validation_data:
            try:
                validation = load_dataset(cfg.validation_data, "val")
            except DatasetMissing:
                log.warning("component=leader action=no_validation path=%s", cfg.validation_data)
        self.manager = SessionManager(cfg, self.states, transport, validation=validation, resume=resume,
                                      metrics_path=metrics_path, summary_path=summary_path, **session_kwargs)
        self.discovery = Discovery(self.states.client_info, self.broker_endpoint, cfg.heartbeat_miss_threshold,
                                   sweep_period, on_change=self.manager.notify)
        if resume:
            MetricsWriter(metrics_path).write({"event": "restore", "source": self.source,
                                               "restore_time_s": self.restore_time_s, "time": time.time()})
            log.info("component=leader action=restored source=%s seconds=%.3f", self.source, self.restore_time_s)

    def run(self, keep_discovery: bool = False) -> SessionResult:
        self.discovery.start()
        try:
            return self.manager.run()
        finally:
            if not keep_discovery:
                self.stop()

    def stop(self) -> None:
        self.discovery.stop()

