"""Client data partitioners and label-skew metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset

log = logging.getLogger("fedfleet.partition")


class InfeasibleAssignment(ValueError):
    pass


@dataclass
class PartitionPlan:
    scheme: str
    num_clients: int
    seed: int
    assignment: list[np.ndarray]
    params: dict = field(default_factory=dict)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignment])


def _labels_of(data) -> tuple[np.ndarray, int]:
    if isinstance(data, Dataset):
        return data.labels, data.num_labels
    labels = np.asarray(data, dtype=np.int64)
    return labels, int(labels.max()) + 1 if len(labels) else 0


def partition_iid(data, num_clients: int, seed: int = 0) -> PartitionPlan:
    """Every label's samples are dealt evenly over all clients."""
    labels, l = _labels_of(data)
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    offset = 0
    for label in range(l):
        idx = rng.permutation(np.flatnonzero(labels == label))
        chunks = np.array_split(idx, num_clients)
        # rotate so remainders do not always land on the first clients
        for i, chunk in enumerate(chunks):
            parts[(i + offset) % num_clients].append(chunk)
        offset += len(idx) % num_clients
    assignment = [np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64) for p in parts]
    return PartitionPlan("iid", num_clients, seed, assignment)


def partition_label_skew(data, num_clients: int, delta: int, seed: int = 0,
                         num_labels: int | None = None) -> PartitionPlan:
    """Split each label into ``ceil(c*delta/l)`` equal shards and give every
    client ``delta`` shards of distinct labels.

    Shards left over once every client holds ``delta`` labels are merged into
    the smallest client already holding that label, so all samples are used
    and no client gains a label.
    """
    labels, l = _labels_of(data)
    l = num_labels or l
    c = num_clients
    if not 1 <= delta <= l:
        raise InfeasibleAssignment(f"delta must lie in [1, {l}], got {delta}")
    shards_per_label = math.ceil(c * delta / l)
    if shards_per_label > c:
        raise InfeasibleAssignment("more shards per label than clients")
    rng = np.random.default_rng(seed)
    shards: list[list[np.ndarray]] = []
    for label in range(l):
        idx = rng.permutation(np.flatnonzero(labels == label))
        if len(idx) < shards_per_label:
            raise InfeasibleAssignment(f"label {label} has {len(idx)} samples for {shards_per_label} shards")
        shards.append(list(np.array_split(idx, shards_per_label)))
    remaining = np.full(l, shards_per_label)
    held: list[list[int]] = [[] for _ in range(c)]
    parts: list[list[np.ndarray]] = [[] for _ in range(c)]
    for client in rng.permutation(c):
        priority = rng.random(l)
        order = sorted((k for k in range(l) if remaining[k] > 0), key=lambda k: (-remaining[k], priority[k]))
        if len(order) < delta:
            raise InfeasibleAssignment(f"only {len(order)} labels left for client {client}, need {delta}")
        for k in order[:delta]:
            remaining[k] -= 1
            parts[client].append(shards[k][remaining[k]])
            held[client].append(k)
    for k in range(l):
        while remaining[k] > 0:
            holders = [i for i in range(c) if k in held[i]]
            if not holders:
                raise InfeasibleAssignment(f"label {k} is held by no client; samples would be dropped")
            target = min(holders, key=lambda i: (sum(len(p) for p in parts[i]), i))
            remaining[k] -= 1
            parts[target].append(shards[k][remaining[k]])
    assignment = [np.sort(np.concatenate(p)) for p in parts]
    return PartitionPlan("label_skew", c, seed, assignment,
                         {"delta": delta, "shards_per_label": shards_per_label})


def partition_dirichlet(data, num_clients: int, alpha: float, seed: int = 0,
                        num_labels: int | None = None) -> PartitionPlan:
    """Per label, a Dirichlet(alpha) draw over clients apportions its samples.

    Clients that already hold at least an equal share of the data are
    excluded from later labels' draws, which bounds quantity skew the usual
    way for this partitioner.
    """
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    labels, l = _labels_of(data)
    l = num_labels or l
    c = num_clients
    rng = np.random.default_rng(seed)
    fair_share = len(labels) / c
    parts: list[list[np.ndarray]] = [[] for _ in range(c)]
    sizes = np.zeros(c)
    for label in range(l):
        idx = rng.permutation(np.flatnonzero(labels == label))
        p = rng.dirichlet(np.full(c, alpha))
        p = p * (sizes < fair_share)
        p = p / p.sum() if p.sum() > 0 else np.full(c, 1.0 / c)
        cuts = (np.cumsum(p) * len(idx)).astype(int)[:-1]
        for i, chunk in enumerate(np.split(idx, cuts)):
            parts[i].append(chunk)
            sizes[i] += len(chunk)
    assignment = [np.sort(np.concatenate(p)) for p in parts]
    empty = sum(len(a) == 0 for a in assignment)
    if empty:
        log.info("partition=dirichlet alpha=%s empty_clients=%d", alpha, empty)
    return PartitionPlan("dirichlet", c, seed, assignment, {"alpha": alpha})


def partition(data, scheme: str, num_clients: int, seed: int = 0, **kwargs) -> PartitionPlan:
    if scheme == "iid":
        return partition_iid(data, num_clients, seed)
    if scheme == "label_skew":
        return partition_label_skew(data, num_clients, kwargs["delta"], seed)
    if scheme == "dirichlet":
        return partition_dirichlet(data, num_clients, kwargs["alpha"], seed)
    raise ValueError(f"unknown partition scheme {scheme!r}")


def label_count_matrix(plan: PartitionPlan, data, num_labels: int | None = None) -> np.ndarray:
    labels, l = _labels_of(data)
    l = num_labels or l
    return np.stack([np.bincount(labels[a], minlength=l) for a in plan.assignment])


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats."""
    p = np.asarray(p, dtype=float) / np.sum(p)
    q = np.asarray(q, dtype=float) / np.sum(q)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def skew_metrics(plan: PartitionPlan, data, num_labels: int | None = None) -> tuple[float, float]:
    """Mean per-client coefficient of variation of label counts and mean
    Jensen-Shannon divergence from the pooled label distribution.

    Empty clients have no distribution and are left out of both means.
    """
    labels, l = _labels_of(data)
    l = num_labels or l
    counts = label_count_matrix(plan, labels, l).astype(float)
    reference = np.bincount(labels, minlength=l).astype(float)
    cvs, jss = [], []
    for row in counts:
        if row.sum() == 0:
            continue
        cvs.append(row.std() / row.mean())
        jss.append(js_divergence(row, reference))
    return float(np.mean(cvs)), float(np.mean(jss))
