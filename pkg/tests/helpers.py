"""Shared builders for strategy and session tests."""

import numpy as np

from fedfleet.config import SessionConfig, Termination
from fedfleet.engine.data import Dataset, load_dataset
from fedfleet.session import SessionManager
from fedfleet.state import memory_states
from fedfleet.strategies import StrategyContext


def add_client(states, cid, *, benchmark=1.0, histogram=None, dataset="blobs", active=True, training=False):
    info = states.client_info
    info.put(cid, "is_active", active)
    info.put(cid, "is_training", training)
    info.put(cid, "benchmark", benchmark)
    info.put(cid, "rpc_endpoint", ["127.0.0.1", 1])
    if histogram is not None:
        info.put(cid, "dataset_details", {dataset: list(histogram)})


def context(states, owner, available=None, seed=0, dataset="blobs"):
    views = {sid: (obj.rw() if sid == owner else obj.ro()) for sid, obj in states.all().items()}
    if available is None:
        info = states.client_info
        available = [c for c in info.primaries() if info.get(c, "is_active") and not info.get(c, "is_training")]
    return StrategyContext(session_id=states.session_id, available_clients=available,
                           client_selection=views["client_selection"], aggregation=views["aggregation"],
                           client_training=views["client_training"], client_info=views["client_info"],
                           training_session=views["training_session"], dataset=dataset,
                           rng=np.random.default_rng(seed))


def new_states(round_number=0, model=None, session_id="s"):
    st = memory_states(session_id)
    st.training_session.put(session_id, "last_round_number", round_number)
    if model is not None:
        st.training_session.put(session_id, "global_model", model)
    return st


def set_round(states, r, model=None):
    states.training_session.put(states.session_id, "last_round_number", r)
    if model is not None:
        states.training_session.put(states.session_id, "global_model", model)


def report(states, cid, trained_from, model=None, samples=None, loss=None):
    ct = states.client_training
    ct.put(cid, "last_round_participated", trained_from)
    metrics = {}
    if samples is not None:
        metrics["num_samples"] = samples
    if loss is not None:
        metrics["loss"] = loss
    ct.put(cid, "training_metrics", metrics)
    if model is not None:
        ct.put(cid, "local_model", model)


def make_cfg(rounds=3, strategy="fedavg", sel_args=None, agg_args=None, **kw):
    kw.setdefault("skip_benchmark", True)
    kw.setdefault("learning_rate", 0.1)
    kw.setdefault("batch_size", 16)
    term = kw.pop("termination", None) or Termination(rounds)
    return SessionConfig(session_id="s", aggregator=strategy, client_selection=strategy,
                         num_training_rounds=rounds, model_id="logreg", dataset="blobs",
                         client_selection_args=sel_args or {}, aggregator_args=agg_args or {},
                         termination=term, **kw)


def register(states, agent, benchmark=None):
    adv = agent.advertisement()
    info = states.client_info
    cid = adv["client_id"]
    info.update_many({(cid, "is_active"): True, (cid, "is_training"): False,
                      (cid, "rpc_endpoint"): list(adv["rpc_endpoint"]),
                      (cid, "dataset_details"): adv["dataset_details"], (cid, "benchmark"): benchmark})


def union(agents, split="train"):
    return Dataset.concat([load_dataset(f"{a.config.data_dir}/blobs", split) for a in agents])


def run(cfg, agents, states=None, transport=None, **kw):
    states = states or memory_states(cfg.session_id)
    for a in agents:
        register(states, a)
    kw.setdefault("validation", union(agents, "val"))
    mgr = SessionManager(cfg, states, transport, **kw)
    return mgr, mgr.run()
