"""Train the same label-skewed federation with each built-in strategy.

Runs a broker and 12 thread clients on localhost and prints the global
accuracy every few rounds. Takes well under a minute.

    python3 demos/compare_strategies.py
"""

import logging
import tempfile
from pathlib import Path

from fedfleet.config import SessionConfig, Termination
from fedfleet.leader import Leader
from fedfleet.local import DataSpec, LocalCluster, prepare_data

ROUNDS = 30
STRATEGIES = {
    "fedavg": {"num_clients": 4},
    "fedasync": {"num_clients": 4},
    "fedat": {"num_tiers": 3, "num_clients_selected_per_tier": 2},
    "tifl": {"num_tiers": 3, "num_clients": 3},
    "haccs": {"num_clusters": 4, "num_clients": 3},
}


def session(name, args):
    return SessionConfig(session_id=name, aggregator=name, client_selection=name, num_training_rounds=ROUNDS,
                         model_id="logreg", dataset="blobs", client_selection_args=args, aggregator_args=args,
                         learning_rate=0.1, batch_size=32, skip_benchmark=False, termination=Termination(ROUNDS))


def main():
    logging.basicConfig(level=logging.WARNING)
    root = Path(tempfile.mkdtemp(prefix="fedfleet-demo-"))
    spec = DataSpec(num_samples=6000, separation=0.8, scheme="label_skew", delta=3)
    _, plan, val = prepare_data(root, 12, spec)
    # staggered device speeds so the tiered strategies have something to sort
    delays = [0.001 * (i % 4) for i in range(12)]
    with LocalCluster(root, 12, heartbeat_interval=1.0, minibatch_delay=delays) as cluster:
        for name, args in STRATEGIES.items():
            leader = Leader(session(name, args), cluster.broker_endpoint, validation=val)
            leader.discovery.start()
            cluster.wait_registered(leader.states.client_info)
            res = leader.run()
            curve = " ".join(f"{m['global_accuracy']:.2f}" for m in res.metrics[4::5])
            print(f"{name:9s} final {res.final_accuracy:.3f}  every 5th round: {curve}  "
                  f"({res.wallclock_s:.1f} s)")
    print(f"data and logs under {root}")


if __name__ == "__main__":
    main()
