"""Randomly kill about 40% of the clients during a session.

A scaled-down version of the acceptance experiment: 20 clients with 1 s
heartbeats. Compares against the same session without failures.

    python3 demos/client_failures.py
"""

import logging
import tempfile
from pathlib import Path

from fedfleet.config import SessionConfig, Termination
from fedfleet.faultlab import FaultPlan, client_failure_run, mttf_for_fraction
from fedfleet.local import DataSpec


def main():
    logging.basicConfig(level=logging.WARNING)
    root = Path(tempfile.mkdtemp(prefix="fedfleet-clients-"))
    cfg = SessionConfig(session_id="kills", aggregator="fedavg", client_selection="fedavg", num_training_rounds=40,
                        model_id="logreg", dataset="blobs", client_selection_args={"num_clients": 4},
                        learning_rate=0.1, skip_benchmark=True, heartbeat_miss_threshold=3,
                        termination=Termination(40))
    spec = DataSpec(num_samples=6000, separation=0.8)
    cluster = {"num_clients": 20, "heartbeat_interval": 1.0, "minibatch_delay": 0.05}
    horizon = 8.0
    plan = FaultPlan(mttf_s=mttf_for_fraction(0.4, horizon, 1.0), check_interval_s=1.0, seed=3)
    faults = client_failure_run(cfg, dict(cluster), spec, root / "faults", plan=plan, horizon_s=horizon)
    clean = client_failure_run(cfg, dict(cluster), spec, root / "clean")
    inactive = dict(faults["inactive"])
    for cid, t, wall in faults["kills"]:
        seen = inactive.get(cid)
        lag = f"{seen - wall:.1f} s" if seen else "not detected"
        print(f"{cid} killed at t={t:.0f} s, marked inactive after {lag}")
    print(f"with failures: {faults['result'].final_accuracy:.3f}  without: {clean['result'].final_accuracy:.3f}")


if __name__ == "__main__":
    main()
