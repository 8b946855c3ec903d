"""Kill the leader twice mid-session and let a replacement resume it.

The session state lives in the durable store, so each replacement picks up
at the last committed round.

    python3 demos/leader_failover.py
"""

import logging
import tempfile
from pathlib import Path

import yaml

from fedfleet.faultlab import FaultPlan, kill_and_failover
from fedfleet.local import DataSpec, LocalCluster, prepare_data


def main():
    logging.basicConfig(level=logging.WARNING)
    root = Path(tempfile.mkdtemp(prefix="fedfleet-failover-"))
    prepare_data(root, 6, DataSpec(num_samples=4000, separation=0.8))
    doc = {
        "session_config": {"session_id": "failover-demo", "aggregator": "fedavg", "client_selection": "fedavg",
                           "client_selection_args": {"num_clients": 3},
                           "state": {"backend": "durable", "directory": "state"}},
        "benchmark_config": {"skip_benchmark": True},
        "server_training_config": {"num_training_rounds": 12, "validation_data": "leader/blobs"},
        "client_training_config": {"model_id": "logreg", "dataset": "blobs", "learning_rate": 0.1},
        "model_config": {"model_args": {"num_classes": 10}},
    }
    config = root / "session.yaml"
    config.write_text(yaml.safe_dump(doc))
    with LocalCluster(root, 6, heartbeat_interval=1.0, minibatch_delay=0.02) as cluster:
        report = kill_and_failover(config, cluster.broker_endpoint, FaultPlan(leader_kill_rounds=[4, 8]),
                                   root / "faultlab")
    for k in report.kills:
        print(f"killed after round {k.round_at_kill} -> {k.target}: restored round {k.restored_round} "
              f"from {k.restore_source} in {k.restore_time_s * 1000:.0f} ms, rounds lost {k.rounds_lost}")
    print(f"finished round {report.final_round}, accuracy {report.final_accuracy:.3f}, exit {report.exit_code}")


if __name__ == "__main__":
    main()
