"""Client selection and aggregation plugin interfaces."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..weights import ModelWeights, check_same_shapes

log = logging.getLogger("fedfleet.strategies")


class SelectionResult(NamedTuple):
    """Clients to train and clients to validate; ``None`` in both defers."""

    train: list[str] | None = None
    validate: list[str] | None = None

    @property
    def deferred(self) -> bool:
        return not self.train and not self.validate


DEFER = SelectionResult(None, None)


@dataclass
class StrategyContext:
    """State handles for one plugin call.

    The owner of a state receives it read-write; the other four are
    read-only views.
    """

    session_id: str
    available_clients: list[str]
    client_selection: object
    aggregation: object
    client_training: object
    client_info: object
    training_session: object
    user_config: dict = field(default_factory=dict)
    dataset: str = ""
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @property
    def round_number(self) -> int:
        return int(self.training_session.get(self.session_id, "last_round_number", 0) or 0)

    @property
    def global_model(self) -> ModelWeights:
        return self.training_session.get(self.session_id, "global_model")

    @property
    def training_config(self) -> dict:
        return self.training_session.get(self.session_id, "training_config", {}) or {}

    def active_clients(self) -> list[str]:
        return [c for c in self.client_info.primaries() if self.client_info.get(c, "is_active")]

    def is_training(self, client_id: str) -> bool:
        return bool(self.client_info.get(client_id, "is_training"))

    def latency(self, client_id: str) -> float | None:
        v = self.client_info.get(client_id, "benchmark")
        return None if v is None else float(v)

    def trained_from(self, client_id: str) -> int | None:
        return self.client_training.get(client_id, "last_round_participated")

    def sample_count(self, client_id: str) -> float:
        """Training samples a client holds: advertised histogram first, then
        what its last training run reported."""
        details = self.client_info.get(client_id, "dataset_details") or {}
        counts = details.get(self.dataset) if self.dataset else None
        if counts:
            return float(sum(counts))
        metrics = self.client_training.get(client_id, "training_metrics") or {}
        return float(metrics.get("num_samples", 1.0))

    def label_histogram(self, client_id: str) -> list[float] | None:
        details = self.client_info.get(client_id, "dataset_details") or {}
        return details.get(self.dataset)

    def sample(self, population: list[str], k: int) -> list[str]:
        k = min(k, len(population))
        if k <= 0:
            return []
        picked = self.rng.choice(len(population), size=k, replace=False)
        return sorted(population[i] for i in picked)


class ClientSelector:
    name = "base"

    def __init__(self, **args):
        self.args = args

    def select(self, ctx: StrategyContext) -> SelectionResult:
        raise NotImplementedError

    def on_resume(self, ctx: StrategyContext) -> None:
        """Forget in-flight bookkeeping after the leader restarts mid-round."""


class Aggregator:
    name = "base"
    # synchronous aggregators ignore failures reported after their round closed
    synchronous = True

    def __init__(self, **args):
        self.args = args

    def aggregate(self, ctx: StrategyContext, client_id: str,
                  local_model: ModelWeights | None) -> ModelWeights | None:
        raise NotImplementedError

    def on_resume(self, ctx: StrategyContext) -> None:
        pass


def fedavg_aggregate(models: list[tuple[ModelWeights, float]]) -> ModelWeights:
    """Sample-weighted elementwise mean ``sum(n_i w_i) / sum(n_i)``."""
    if not models:
        raise ValueError("nothing to aggregate")
    check_same_shapes(w for w, _ in models)
    total = float(sum(n for _, n in models))
    if not total > 0:
        raise ValueError("total sample weight must be positive")
    out = {}
    for name in models[0][0]:
        acc = np.zeros(np.shape(models[0][0][name]), dtype=np.float64)
        for w, n in models:
            acc += float(n) * np.asarray(w[name], dtype=np.float64)
        out[name] = acc / total
    return ModelWeights(out)


def fedasync_mixing(alpha: float, staleness: int, exponent: float) -> float:
    """Staleness-discounted mixing weight ``alpha * (staleness + 1) ** -exponent``."""
    if staleness < 0:
        raise ValueError("update cannot come from a future round")
    return alpha * (staleness + 1) ** (-exponent)


def fedasync_aggregate(global_model: ModelWeights, update: ModelWeights, update_round: int,
                       current_round: int, alpha: float = 0.9, exponent: float = 0.5) -> ModelWeights:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    a_t = fedasync_mixing(alpha, current_round - update_round, exponent)
    return mix_models(global_model, update, a_t)


def mix_models(global_model: ModelWeights, update: ModelWeights, weight: float) -> ModelWeights:
    """``(1 - weight) * global + weight * update``, elementwise."""
    check_same_shapes([global_model, update])
    return ModelWeights({k: (1.0 - weight) * np.asarray(global_model[k], dtype=np.float64)
                         + weight * np.asarray(update[k], dtype=np.float64) for k in global_model})
