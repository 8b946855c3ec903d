"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import yaml

from .config import SchemaError, SessionConfig, load_session_config
from .strategies import StrategyNotFound

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("fedfleet.cli")


def _setup_logging(level: str, log_file: str | None = None) -> None:
    kwargs = {"filename": log_file} if log_file else {"stream": sys.stderr}
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), force=True,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s", **kwargs)


def _endpoint(text: str | None, env_key: str = "FEDFLEET_BROKER") -> tuple[str, int]:
    text = text or os.environ.get(env_key)
    if not text:
        raise SchemaError(f"no endpoint given (use --broker or set {env_key})")
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise SchemaError(f"bad endpoint {text!r}; expected host:port") from None


# ---------------------------------------------------------------- subcommands

def cmd_broker(args) -> int:
    from .discovery import Broker

    host, port = _endpoint(args.listen or os.environ.get("FEDFLEET_BROKER") or "127.0.0.1:1883")
    broker = Broker(host, port)
    print(f"broker listening on {broker.endpoint[0]}:{broker.endpoint[1]}", flush=True)
    try:
        broker.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_client(args) -> int:
    from .client import ClientAgent, ClientConfig

    with open(args.config, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    try:
        cfg = ClientConfig.from_mapping(raw)
    except (TypeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    agent = ClientAgent(cfg).start()
    print(f"client {cfg.client_id} serving on {agent.endpoint[0]}:{agent.endpoint[1]}", flush=True)
    try:
        agent.wait()
    except KeyboardInterrupt:
        agent.stop()
    return EXIT_OK


def _finish(result, csv_path=None) -> int:
    if csv_path:
        from .metrics import emit_metrics

        emit_metrics(result.metrics, csv_path, "csv")
    print(json.dumps(result.summary(), default=str), flush=True)
    return EXIT_OK if result.status == "completed" else EXIT_RUNTIME


def cmd_leader(args) -> int:
    from .leader import Leader, ResumeFailed
    from .session import NoClientsAvailable

    cfg = load_session_config(args.config)
    broker = _endpoint(args.broker)
    try:
        leader = Leader(cfg, broker, resume=args.resume, metrics_path=args.metrics, summary_path=args.summary,
                        client_wait_s=args.client_wait)
        result = leader.run()
    except (ResumeFailed, NoClientsAvailable) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return _finish(result, args.csv)


def _data_spec(cfg: SessionConfig, args):
    from .local import DataSpec

    return DataSpec(dataset=cfg.dataset, num_samples=args.samples, num_features=args.features,
                    num_labels=cfg.num_classes or args.labels, separation=args.separation, scheme=args.scheme,
                    delta=args.delta, alpha=args.alpha, seed=args.seed)


def cmd_run(args) -> int:
    """Broker, clients and leader on this machine, with synthetic data."""
    from .leader import Leader
    from .local import LocalCluster, prepare_data

    cfg = load_session_config(args.config)
    work = Path(args.work_dir)
    spec = _data_spec(cfg, args)
    _, _, val = prepare_data(work, args.clients, spec)
    with LocalCluster(work, args.clients, mode=args.mode, heartbeat_interval=args.heartbeat_interval,
                      broker_endpoint=_endpoint(args.broker) if args.broker else None) as cluster:
        leader = Leader(cfg, cluster.broker_endpoint, validation=val,
                        metrics_path=args.metrics or work / "metrics.jsonl",
                        summary_path=args.summary or work / "summary.json")
        result = leader.run()
    return _finish(result, args.csv or work / "metrics.csv")


def _derived_config(src: str, out: Path, **overrides) -> Path:
    """Copy a session YAML with server-side paths pointed into ``out``."""
    raw = yaml.safe_load(Path(src).read_text())
    if overrides.get("validation_data"):
        raw.setdefault("server_training_config", {})["validation_data"] = str(overrides["validation_data"])
    if overrides.get("state"):
        sc = raw.setdefault("session_config", {})
        sc["state"] = dict(sc.get("state") or {}, **overrides["state"])
    path = out / "session.yaml"
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    return path


def cmd_faultlab(args) -> int:
    from .faultlab import FaultPlan, client_failure_run, kill_and_failover, load_fault_file, mttf_for_fraction
    from .local import DataSpec, LocalCluster, prepare_data
    from .metrics import emit_metrics

    faults = load_fault_file(args.faults)
    base_cfg = load_session_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cluster_kw = dict(faults.get("cluster") or {})
    n = int(cluster_kw.pop("num_clients", 10))
    spec = DataSpec(**dict({"dataset": base_cfg.dataset}, **(faults.get("data") or {})))
    horizon = float(faults.get("horizon_s", 60.0))
    kills = dict(faults.get("client_kills") or {})
    if "kill_fraction" in faults and "mttf_s" not in kills:
        kills["mttf_s"] = mttf_for_fraction(float(faults["kill_fraction"]), horizon,
                                            float(kills.get("check_interval_s", 5.0)))
    leader_kills = dict(faults.get("leader_kills") or {})
    summary: dict = {}
    runs = [("faults", True)] + ([("baseline", False)] if args.baseline else [])
    for name, with_faults in runs:
        work = out / name
        work.mkdir(parents=True, exist_ok=True)
        if leader_kills and with_faults:
            plan = FaultPlan(seed=int(kills.get("seed", 0)), leader_kill_rounds=list(leader_kills.get("rounds", [])),
                             failover=leader_kills.get("failover", "alternate"))
            _, _, _ = prepare_data(work, n, spec)
            cfg_path = _derived_config(args.config, work, validation_data=work / "leader" / spec.dataset,
                                       state={"backend": "durable", "directory": str(work / "state")})
            with LocalCluster(work, n, **cluster_kw) as cluster:
                report = kill_and_failover(cfg_path, cluster.broker_endpoint, plan, work)
            emit_metrics(report.metrics, work / "metrics.csv")
            summary[name] = report.summary()
            continue
        cfg = dataclasses.replace(base_cfg)
        plan = FaultPlan.from_mapping(kills) if with_faults and kills else None
        res = client_failure_run(cfg, dict(cluster_kw, num_clients=n), spec, work, plan=plan, horizon_s=horizon)
        emit_metrics(res["result"].metrics, work / "metrics.csv")
        summary[name] = {"result": res["result"].summary(), "kills": res["kills"], "inactive": res["inactive"]}
    if args.baseline:
        def acc(entry):
            return entry.get("final_accuracy", (entry.get("result") or {}).get("final_accuracy"))

        a, b = acc(summary["faults"]), acc(summary["baseline"])
        summary["diff"] = {"final_accuracy_faults": a, "final_accuracy_baseline": b,
                           "delta": None if a is None or b is None else a - b}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    print(json.dumps(summary.get("diff", {}), default=str), flush=True)
    return EXIT_OK


def cmd_partition(args) -> int:
    from .engine.data import load_dataset, make_blobs, save_dataset
    from .engine.partition import label_count_matrix, partition, skew_metrics

    if args.input:
        data = load_dataset(args.input, args.split)
    else:
        data = make_blobs(args.samples, args.features, args.labels, seed=args.seed)
    plan = partition(data, args.scheme, args.clients, args.seed, delta=args.delta, alpha=args.alpha)
    out = Path(args.out)
    for i, idx in enumerate(plan.assignment):
        save_dataset(data.subset(idx), out / f"client-{i:03d}", "train")
    cv, js = skew_metrics(plan, data)
    report = {"scheme": args.scheme, "clients": args.clients, "seed": args.seed, "cv": cv, "js": js,
              "sizes": plan.sizes().tolist(), "label_counts": label_count_matrix(plan, data).tolist()}
    if args.scheme == "label_skew":
        report["delta"] = args.delta
        report["shards_per_label"] = math.ceil(args.clients * args.delta / data.num_labels)
    if args.scheme == "dirichlet":
        report["alpha"] = args.alpha
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(json.dumps({"cv": cv, "js": js}), flush=True)
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import emit_metrics, read_metrics

    records = read_metrics(args.input)
    emit_metrics(records, args.output, args.format)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_data_args(p) -> None:
    p.add_argument("--samples", type=int, default=4000)
    p.add_argument("--features", type=int, default=20)
    p.add_argument("--labels", type=int, default=10)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--scheme", choices=("iid", "label_skew", "dirichlet"), default="iid")
    p.add_argument("--delta", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfleet", description="Federated learning orchestration")
    parser.add_argument("--log-level", default=os.environ.get("FEDFLEET_LOG_LEVEL", "WARNING"))
    parser.add_argument("--log-file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("broker", help="run the publish/subscribe broker")
    p.add_argument("--listen", default=None, help="host:port (default $FEDFLEET_BROKER or 127.0.0.1:1883)")
    p.set_defaults(fn=cmd_broker)

    p = sub.add_parser("client", help="run a client agent")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_client)

    p = sub.add_parser("leader", help="run a session leader")
    p.add_argument("--config", required=True)
    p.add_argument("--broker", default=None, help="host:port (default $FEDFLEET_BROKER)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--metrics", default=None, help="per-round JSONL output")
    p.add_argument("--summary", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--client-wait", type=float, default=60.0)
    p.set_defaults(fn=cmd_leader)

    p = sub.add_parser("run", help="broker, clients and leader on this machine")
    p.add_argument("--config", required=True)
    p.add_argument("--clients", type=int, default=6)
    p.add_argument("--work-dir", default="fedfleet-run")
    p.add_argument("--mode", choices=("thread", "process"), default="thread")
    p.add_argument("--heartbeat-interval", type=float, default=5.0)
    p.add_argument("--broker", default=None, help="use an external broker instead of starting one")
    p.add_argument("--metrics", default=None)
    p.add_argument("--summary", default=None)
    p.add_argument("--csv", default=None)
    _add_data_args(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("faultlab", help="failure experiments")
    fsub = p.add_subparsers(dest="fault_command", required=True)
    fr = fsub.add_parser("run")
    fr.add_argument("--config", required=True)
    fr.add_argument("--faults", required=True)
    fr.add_argument("--baseline", action="store_true", help="also run without faults and diff")
    fr.add_argument("--out", default="faultlab-out")
    fr.set_defaults(fn=cmd_faultlab)

    p = sub.add_parser("partition", help="split a dataset across clients and report skew")
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--input", default=None, help="dataset directory (default: synthetic blobs)")
    p.add_argument("--split", default="train")
    p.add_argument("--out", default="partitions")
    _add_data_args(p)
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("metrics", help="convert a JSONL metrics stream")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.set_defaults(fn=cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level, args.log_file)
    try:
        return args.fn(args)
    except (SchemaError, StrategyNotFound, FileNotFoundError, yaml.YAMLError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:
        log.exception("component=cli action=failed")
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
