"""Leader-side session lifecycle.

All work happens on one thread consuming a single event queue. Transport
callbacks, deadline timers and membership changes only enqueue events, so
state digests taken between two events never see a half-applied event.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SchemaError, SessionConfig
from .engine.data import Dataset
from .engine.models import FAMILIES, evaluate, init_weights
from .metrics import MetricsWriter
from .state import SessionStates, checkpoint, checkpoint_path
from .strategies import StrategyContext, make_aggregator, make_selector
from .transport import ModelPackage, TrainRequest, TrainResponse, Transport, TransportError, builtin_package
from .weights import ModelWeights

log = logging.getLogger("fedfleet.session")

FALLBACK_DEADLINE_S = 60.0
MIN_DEADLINE_S = 5.0


class NoClientsAvailable(RuntimeError):
    pass


class StrategyIsolationError(AssertionError):
    pass


@dataclass
class Event:
    kind: str  # session_start | client_response | client_failure | timer_expired | membership
    client_id: str | None = None
    payload: object = None
    round: int | None = None
    request: str = "train"
    token: int = 0


@dataclass
class _Pending:
    token: int
    round: int
    request: str
    sent_at: float
    handle: object = None


@dataclass
class SessionResult:
    session_id: str
    status: str
    rounds_completed: int
    final_accuracy: float | None
    final_loss: float | None
    wallclock_s: float
    metrics: list = field(default_factory=list)
    train_requests: int = 0
    validate_requests: int = 0
    failures: int = 0
    productive_s: float = 0.0
    overhead_s: float = 0.0
    checkpoint_time_s: float = 0.0
    max_dispatch_spread_s: float = 0.0
    error: str | None = None
    global_model: ModelWeights | None = None

    @property
    def overhead_fraction(self) -> float:
        return self.overhead_s / self.wallclock_s if self.wallclock_s > 0 else 0.0

    def summary(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k not in ("metrics", "global_model")}
        out["overhead_fraction"] = self.overhead_fraction
        return out


class _Lazy(Sequence):
    """A client list computed on first use; aggregators rarely look at it."""

    def __init__(self, fn):
        self._fn, self._items = fn, None

    def _get(self) -> list:
        if self._items is None:
            self._items = self._fn()
        return self._items

    def __getitem__(self, i):
        return self._get()[i]

    def __len__(self) -> int:
        return len(self._get())


def _union_length(intervals: list[tuple[float, float]]) -> float:
    total, end = 0.0, -math.inf
    for a, b in sorted(intervals):
        if b <= end:
            continue
        total += b - max(a, end)
        end = b
    return total


class SessionManager:
    """Runs one session to termination.

    ``validation`` is the leader-held split used for global accuracy;
    ``resume=True`` continues from whatever ``states`` already hold.
    """

    def __init__(self, cfg: SessionConfig, states: SessionStates, transport: Transport | None = None, *,
                 validation: Dataset | None = None, num_features: int | None = None,
                 package: ModelPackage | None = None, metrics_path=None, summary_path=None,
                 record_events: bool = True, check_isolation: bool = False, idle_tick: float = 0.25,
                 client_wait_s: float = 30.0, stall_timeout_s: float | None = None, resume: bool = False,
                 initial_model: ModelWeights | None = None):
        self.cfg = cfg
        self._user_config = cfg.to_dict()
        self.states = states
        self.sid = cfg.session_id
        self.transport = transport or Transport()
        self.validation = validation
        if package is None and cfg.model_family not in FAMILIES:
            raise SchemaError(f"unknown model {cfg.model_id!r}; set model_config.model_args.family",
                              "client_training_config.model_id")
        self.package = package or builtin_package(cfg.model_id, cfg.model_family, cfg.hidden)
        self.selector = make_selector(cfg.client_selection, cfg.client_selection_args)
        self.aggregator = make_aggregator(cfg.aggregator, cfg.aggregator_args)
        self.metrics_out = MetricsWriter(metrics_path)
        self.summary_path = summary_path
        self.check_isolation = check_isolation
        self.idle_tick = idle_tick
        self.client_wait_s = client_wait_s
        self.stall_timeout_s = stall_timeout_s
        self.resume = resume
        self.rng = np.random.default_rng(cfg.seed)
        self.events: queue.Queue[Event] = queue.Queue()
        self.event_log: list[dict] | None = [] if record_events else None
        self.metrics: list[dict] = []
        self.inflight: dict[str, _Pending] = {}
        self._token = 0
        self._event_index = 0
        self._finished = False
        self._stop_requested = threading.Event()
        self._status = "running"
        self._error: str | None = None
        self._num_features = num_features or cfg.num_features
        self._initial_model = initial_model
        # per-round accounting, reset whenever a global model is committed
        self._intervals: list[tuple[float, float]] = []
        self._round_start = 0.0
        self._round_selected: list[str] = []
        self._round_failed: list[str] = []
        self._round_agg = self._round_val = self._round_ckpt = self._round_dispatch = 0.0
        self._round_spread = 0.0
        self.counts = {"train": 0, "validate": 0, "failures": 0}
        self.checkpoint_time_s = 0.0
        self.productive_s = 0.0
        self.overhead_s = 0.0
        self.max_spread = 0.0
        self.last_accuracy: float | None = None
        self.last_loss: float | None = None
        self._last_progress = time.time()
        self._avail: list[str] | None = None
        self._model_shapes: dict | None = None

    # ------------------------------------------------------------ helpers
    @property
    def round_number(self) -> int:
        return int(self.states.session_value("last_round_number", 0) or 0)

    @property
    def global_model(self) -> ModelWeights:
        return self.states.session_value("global_model")

    def _log_event(self, action: str, **details) -> None:
        if self.event_log is not None:
            self.event_log.append({"i": self._event_index, "action": action, "t": time.time(), **details})

    def _ctx(self, owner: str) -> StrategyContext:
        s = self.states
        views = {name: (obj.rw() if name == owner else obj.ro()) for name, obj in s.all().items()}
        return StrategyContext(
            session_id=self.sid, available_clients=_Lazy(self._available_this_event),
            client_selection=views["client_selection"], aggregation=views["aggregation"],
            client_training=views["client_training"], client_info=views["client_info"],
            training_session=views["training_session"], user_config=dict(self._user_config),
            dataset=self.cfg.dataset, rng=self.rng)

    def _plugin(self, owner: str, fn, *args):
        ctx = self._ctx(owner)
        if not self.check_isolation:
            return fn(ctx, *args)
        before = {k: o.digest() for k, o in self.states.all().items() if k != owner}
        out = fn(ctx, *args)
        after = {k: o.digest() for k, o in self.states.all().items() if k != owner}
        if before != after:
            raise StrategyIsolationError(f"{owner} plugin changed read-only states")
        return out

    def _available_this_event(self) -> list[str]:
        # nothing the session does between an event's aggregate and select
        # changes availability, so one scan per event is enough
        if self._avail is None:
            self._avail = self.available_clients()
        return list(self._avail)

    _AVAIL_FIELDS = ("is_active", "is_training", "rpc_endpoint", "unreachable_since", "heartbeat_timestamp")

    def available_clients(self) -> list[str]:
        info = self.states.client_info
        clients = info.primaries()
        n = len(self._AVAIL_FIELDS)
        values = info.get_many([(c, f) for c in clients for f in self._AVAIL_FIELDS])
        out = []
        for i, c in enumerate(clients):
            active, training, endpoint, since, beat = values[i * n:(i + 1) * n]
            # a refused connection sidelines the client until it heartbeats again
            sidelined = since is not None and (beat or 0.0) <= since
            if active and not training and endpoint is not None and not sidelined:
                out.append(c)
        return out

    def active_clients(self) -> list[str]:
        info = self.states.client_info
        return [c for c in info.primaries() if info.get(c, "is_active")]

    def notify(self, kind: str, client_id: str | None = None) -> None:
        """Membership hook for discovery (thread-safe)."""
        self.events.put(Event("membership", client_id, kind))

    def stop(self) -> None:
        self._stop_requested.set()

    # ------------------------------------------------------------ initialization
    def _initial_weights(self) -> ModelWeights:
        if self._initial_model is not None:
            return ModelWeights(self._initial_model)
        if self.validation is not None:
            d, labels = self.validation.num_features, self.validation.num_labels
        else:
            d, labels = self._num_features, self.cfg.num_classes
        if d is None or labels is None:
            raise ValueError("leader needs validation data or num_features/num_classes to build the model")
        return init_weights(self.cfg.model_family, d, labels, self.cfg.hidden, self.cfg.seed)

    def _init_states(self) -> None:
        s = self.states
        for obj in (s.training_session, s.client_training, s.client_selection, s.aggregation):
            obj.clear()
        s.training_session.update_many({
            (self.sid, "global_model"): self._initial_weights(),
            (self.sid, "training_config"): self.cfg.to_dict(),
            (self.sid, "last_round_number"): 0,
            (self.sid, "training_state_id"): "client_training",
            (self.sid, "agg_state_id"): "aggregation",
            (self.sid, "cs_state_id"): "client_selection",
            (self.sid, "status"): "running",
        })
        for c in s.client_info.primaries():
            s.client_info.put(c, "is_training", False)

    def _prepare_resume(self) -> None:
        s = self.states
        if s.session_value("global_model") is None:
            raise ValueError(f"no restorable state for session {self.sid!r}")
        rnd = self.round_number
        for c in s.client_info.primaries():
            s.client_info.put(c, "is_training", False)
        # round-scoped data past the restored round cannot be trusted
        for c in s.client_training.primaries():
            last = s.client_training.get(c, "last_round_participated")
            if last is not None and last > rnd:
                s.client_training.put(c, "last_round_participated", rnd)
        self._plugin("client_selection", self.selector.on_resume)
        self._plugin("aggregation", self.aggregator.on_resume)
        s.training_session.put(self.sid, "status", "running")
        self.metrics_out.write({"event": "resume", "round": rnd, "time": time.time()})
        log.info("component=session action=resume session=%s round=%d", self.sid, rnd)

    def _wait_for_clients(self) -> None:
        deadline = time.time() + self.client_wait_s
        while not self.active_clients():
            if time.time() > deadline or self._stop_requested.is_set():
                raise NoClientsAvailable(f"no active clients after {self.client_wait_s:.0f}s")
            time.sleep(0.05)

    def _benchmark_missing(self, clients: list[str]) -> None:
        info = self.states.client_info
        todo = [c for c in clients if info.get(c, "benchmark") is None]
        if self.cfg.skip_benchmark or not todo:
            return
        hp = self.cfg.hyperparameters()
        results: dict[str, float] = {}

        def run(cid):
            try:
                results[cid] = self.transport.benchmark_request(
                    tuple(info.get(cid, "rpc_endpoint")), self.package, self.cfg.benchmark_minibatches,
                    self.cfg.dataset, hp)
            except (TransportError, OSError) as e:
                log.info("component=session action=benchmark_failed client=%s reason=%s", cid, e)

        threads = [threading.Thread(target=run, args=(c,), daemon=True) for c in todo]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for cid, secs in results.items():
            info.put(cid, "benchmark", secs)
        log.info("component=session action=benchmark clients=%d", len(results))

    # ------------------------------------------------------------ main loop
    def run(self) -> SessionResult:
        if self.resume:
            self._prepare_resume()
            if self.round_number >= self.cfg.termination.rounds:
                self._finished = True
        else:
            self._init_states()
        self._wait_for_clients()
        self._benchmark_missing(self.active_clients())
        self.session_start = time.time()
        self._round_start = self.session_start
        self._last_progress = self.session_start
        self.events.put(Event("session_start"))
        stall = self.stall_timeout_s
        try:
            while not self._finished:
                if self._stop_requested.is_set():
                    self._status, self._error = "failed", "stopped"
                    break
                try:
                    ev = self.events.get(timeout=self.idle_tick)
                except queue.Empty:
                    ev = Event("timer_expired")
                self._handle(ev)
                now = time.time()
                budget = self.cfg.termination.time_budget_s
                if budget is not None and now - self.session_start >= budget and not self._finished:
                    log.info("component=session action=terminate reason=time_budget")
                    self._finished = True
                limit = stall if stall is not None else max(120.0, 4 * self._deadline([]))
                if not self._finished and not self.inflight and now - self._last_progress > limit:
                    self._status, self._error = "failed", "stalled: no client could be dispatched"
                    log.warning("component=session action=abort reason=stalled")
                    break
        finally:
            self._close_round_accounting(time.time())
        status = "completed" if self._status == "running" else self._status
        self.states.training_session.put(self.sid, "status", status)
        if self.cfg.checkpoint_dir and status == "completed":
            self._checkpoint(force=True)
        result = self.result(status)
        if self.summary_path:
            Path(self.summary_path).write_text(json.dumps(result.summary(), indent=2, default=str))
        log.info("component=session action=finish session=%s status=%s rounds=%d acc=%s",
                 self.sid, status, result.rounds_completed, result.final_accuracy)
        return result

    def result(self, status: str | None = None) -> SessionResult:
        wall = time.time() - getattr(self, "session_start", time.time())
        return SessionResult(
            self.sid, status or self._status, self.round_number, self.last_accuracy, self.last_loss, wall,
            list(self.metrics), self.counts["train"], self.counts["validate"], self.counts["failures"],
            self.productive_s, self.overhead_s, self.checkpoint_time_s, self.max_spread, self._error,
            self.global_model)

    def _handle(self, ev: Event) -> None:
        self._event_index += 1
        self._avail = None
        if ev.kind != "timer_expired":
            self._log_event("event", kind=ev.kind, client=ev.client_id, round=ev.round, request=ev.request)
        if ev.kind == "client_response":
            self._on_response(ev)
        elif ev.kind == "client_failure":
            self._on_failure(ev)
        elif ev.kind == "session_start":
            self._select_and_dispatch()
        elif ev.kind in ("timer_expired", "membership"):
            # synchronous strategies only need a nudge when nothing is running
            if not self.inflight or not self.aggregator.synchronous:
                self._select_and_dispatch(quiet=True)

    # ------------------------------------------------------------ event handlers
    def _claim(self, ev: Event) -> _Pending | None:
        pending = self.inflight.get(ev.client_id)
        if pending is None or pending.token != ev.token:
            log.info("component=session action=drop_stale client=%s round=%s", ev.client_id, ev.round)
            self._log_event("stale", client=ev.client_id, round=ev.round)
            return None
        del self.inflight[ev.client_id]
        if pending.handle is not None and pending.handle.completed_at is not None:
            self._intervals.append((pending.sent_at, pending.handle.completed_at))
        self._last_progress = time.time()
        return pending

    def _on_response(self, ev: Event) -> None:
        pending = self._claim(ev)
        if pending is None:
            return
        resp: TrainResponse = ev.payload
        cid = ev.client_id
        info, ct = self.states.client_info, self.states.client_training
        if resp.session_id != self.sid:
            log.info("component=session action=drop_foreign client=%s session=%s", cid, resp.session_id)
            info.put(cid, "is_training", False)
            return
        if pending.request == "validate":
            ct.put(cid, "validation_metrics", resp.validation_metrics)
            info.update_many({(cid, "is_training"): False, (cid, "models"): resp.cached_packages})
            self._select_and_dispatch()
            return
        model = resp.local_model
        if self._model_shapes is None:
            self._model_shapes = self.global_model.shapes()
        if model is None or model.shapes() != self._model_shapes:
            self._fail(cid, pending, "TrainerError: response weights do not match the global model")
            return
        # (1) record the client's result
        ct.update_many({(cid, "model_weights"): model, (cid, "training_metrics"): resp.training_metrics,
                        (cid, "missed_deadline"): False})
        info.update_many({(cid, "is_training"): False, (cid, "models"): resp.cached_packages})
        # (2) aggregate, (3) commit a new global model if one came back
        new = self._aggregate(cid, model)
        if new is not None:
            self._commit(new)
        # (4) select, (5) dispatch
        if not self._finished:
            self._select_and_dispatch()

    def _on_failure(self, ev: Event) -> None:
        pending = self._claim(ev)
        if pending is None:
            return
        self._fail(ev.client_id, pending, str(ev.payload))

    def _fail(self, cid: str, pending: _Pending, reason: str) -> None:
        info, ct = self.states.client_info, self.states.client_training
        failed = list(info.get(cid, "failed_rounds") or []) + [pending.round]
        updates = {(cid, "is_training"): False, (cid, "failed_rounds"): failed}
        if reason.startswith("ConnectFailed"):
            updates[(cid, "unreachable_since")] = time.time()
        info.update_many(updates)
        ct.put(cid, "missed_deadline", reason.startswith("DeadlineExceeded"))
        self.counts["failures"] += 1
        self._round_failed.append(cid)
        log.info("component=session action=client_failure client=%s round=%d reason=%s",
                 cid, pending.round, reason)
        self._log_event("failure", client=cid, round=pending.round, reason=reason)
        if pending.request == "train":
            if self.aggregator.synchronous and pending.round < self.round_number:
                self._log_event("failure_after_aggregation", client=cid, round=pending.round)
            else:
                new = self._aggregate(cid, None)
                if new is not None:
                    self._commit(new)
        if not self._finished:
            self._select_and_dispatch()

    def _aggregate(self, cid: str, model: ModelWeights | None) -> ModelWeights | None:
        t0 = time.time()
        new = self._plugin("aggregation", self.aggregator.aggregate, cid, model)
        self._round_agg += time.time() - t0
        self._log_event("aggregate", client=cid, failure=model is None, produced=new is not None)
        return new

    def _commit(self, new: ModelWeights) -> None:
        rnd = self.round_number + 1
        self.states.training_session.update_many({(self.sid, "global_model"): ModelWeights(new),
                                                  (self.sid, "last_round_number"): rnd})
        self._log_event("global_model", round=rnd)
        self._last_progress = time.time()
        acc = loss = None
        interval = self.cfg.validation_round_interval
        if self.validation is not None and interval > 0 and rnd % interval == 0:
            t0 = time.time()
            m = evaluate(new, self.validation, self.cfg.loss_function)
            t1 = time.time()
            self._round_val += t1 - t0
            self._intervals.append((t0, t1))
            acc, loss = m["accuracy"], m["loss"]
            self.last_accuracy, self.last_loss = acc, loss
        if rnd % self.cfg.checkpoint_interval == 0 and self.cfg.checkpoint_dir:
            self._checkpoint()
        self._emit_round(rnd, acc, loss)
        term = self.cfg.termination
        if rnd >= term.rounds:
            self._finished = True
        elif term.accuracy_threshold is not None and acc is not None and acc >= term.accuracy_threshold:
            log.info("component=session action=terminate reason=accuracy round=%d acc=%.4f", rnd, acc)
            self._finished = True

    def _checkpoint(self, force: bool = False) -> None:
        t0 = time.time()
        try:
            checkpoint(self.states, checkpoint_path(self.cfg.checkpoint_dir, self.sid, self.round_number))
        except OSError as e:
            log.error("component=session action=checkpoint_failed reason=%s", e)
        dt = time.time() - t0
        self.checkpoint_time_s += dt
        self._round_ckpt += dt

    def _close_round_accounting(self, now: float) -> tuple[float, float]:
        start = self._round_start
        spans = [(max(a, start), min(b, now)) for a, b in self._intervals if b > start]
        spans += [(max(p.sent_at, start), now) for p in self.inflight.values()]
        productive = _union_length([s for s in spans if s[1] > s[0]])
        wall = now - start - self._round_ckpt
        overhead = max(0.0, wall - productive)
        self.productive_s += productive
        self.overhead_s += overhead
        self._intervals = [(a, b) for a, b in self._intervals if b > now]
        self._round_start = now
        return productive, overhead

    def _emit_round(self, rnd: int, acc, loss) -> None:
        now = time.time()
        productive, overhead = self._close_round_accounting(now)
        rec = {"event": "round", "round": rnd, "wallclock_s": now - self.session_start,
               "global_accuracy": acc, "global_loss": loss,
               "selected_clients": sorted(set(self._round_selected)),
               "failed_clients": sorted(set(self._round_failed)),
               "agg_time_s": self._round_agg, "val_time_s": self._round_val, "overhead_s": overhead,
               "productive_s": productive, "dispatch_time_s": self._round_dispatch,
               "dispatch_spread_s": self._round_spread, "checkpoint_time_s": self._round_ckpt}
        self.metrics.append(rec)
        self.metrics_out.write(rec)
        self._round_selected, self._round_failed = [], []
        self._round_agg = self._round_val = self._round_ckpt = self._round_dispatch = self._round_spread = 0.0

    # ------------------------------------------------------------ selection and dispatch
    def _select_and_dispatch(self, quiet: bool = False) -> None:
        res = self._plugin("client_selection", self.selector.select)
        if not (quiet and res.deferred):
            self._log_event("select", train=list(res.train or []), validate=list(res.validate or []))
        if res.deferred:
            return
        self._dispatch(list(res.train or []), list(res.validate or []))

    def _deadline(self, clients: list[str]) -> float:
        if self.cfg.train_timeout_duration_s is not None:
            return float(self.cfg.train_timeout_duration_s)
        info = self.states.client_info
        estimates = []
        for c in clients:
            bench = info.get(c, "benchmark")
            counts = (info.get(c, "dataset_details") or {}).get(self.cfg.dataset)
            if bench is None or not counts:
                continue
            steps = self.cfg.epochs * math.ceil(sum(counts) / self.cfg.batch_size)
            estimates.append(float(bench) / self.cfg.benchmark_minibatches * max(1, steps))
        if not estimates or len(estimates) < len(clients):
            return FALLBACK_DEADLINE_S
        return max(MIN_DEADLINE_S, self.cfg.deadline_factor * max(estimates))

    def _dispatch(self, train: list[str], validate: list[str]) -> None:
        t_start = time.time()
        info, ct = self.states.client_info, self.states.client_training
        rnd = self.round_number
        model = self.global_model
        jobs = [(c, "train") for c in train] + [(c, "validate") for c in validate if c not in train]
        if train and not self.cfg.skip_benchmark:
            self._benchmark_missing(train)
        deadline = self._deadline([c for c, _ in jobs])
        sent = []
        for cid, kind in jobs:
            if cid in self.inflight:
                log.info("component=session action=skip_busy client=%s", cid)
                continue
            self._token += 1
            endpoint = info.get(cid, "rpc_endpoint")
            pending = _Pending(self._token, rnd, kind, time.time())
            self.inflight[cid] = pending
            if kind == "train":
                self._round_selected.append(cid)
                ct.update_many({(cid, "last_round_participated"): rnd,
                                (cid, "current_model_id"): self.cfg.model_id,
                                (cid, "current_dataset"): self.cfg.dataset})
                self.counts["train"] += 1
            else:
                self.counts["validate"] += 1
            if not info.get(cid, "is_active") or endpoint is None:
                self.events.put(Event("client_failure", cid, "Unavailable: client inactive", rnd, kind,
                                      pending.token))
                continue
            info.put(cid, "is_training", True)
            hp = dict(self.cfg.hyperparameters(), seed=self.cfg.seed * 1_000_003 + rnd)
            inline = None if self.package.sha256 in (info.get(cid, "models") or []) else self.package
            req = TrainRequest(self.sid, rnd, self.package.sha256, model, hp, deadline,
                               self.cfg.dataset, kind == "validate", inline)
            pending.sent_at = time.time()
            pending.handle = self.transport.send_train_request(
                tuple(endpoint), req, self._callback(cid, rnd, kind, pending.token),
                fallback_package=self.package)
            sent.append(pending.sent_at)
            self._log_event("dispatch", client=cid, round=rnd, request=kind)
        t_end = time.time()
        self._round_dispatch += t_end - t_start
        self._intervals.append((t_start, t_end))
        if sent:
            spread = max(sent) - min(sent)
            self._round_spread = max(self._round_spread, spread)
            self.max_spread = max(self.max_spread, spread)

    def _callback(self, cid: str, rnd: int, kind: str, token: int):
        def done(outcome):
            if isinstance(outcome, TrainResponse) and outcome.ok:
                self.events.put(Event("client_response", cid, outcome, rnd, kind, token))
            else:
                reason = (f"{outcome.kind}: {outcome.detail}" if isinstance(outcome, TransportError)
                          else f"RemoteError: {getattr(outcome, 'error', outcome)}")
                self.events.put(Event("client_failure", cid, reason, rnd, kind, token))
        return done
