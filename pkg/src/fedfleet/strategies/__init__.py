"""Strategy registry keyed by the names used in session YAML files."""

from .base import (
    DEFER,
    Aggregator,
    ClientSelector,
    SelectionResult,
    StrategyContext,
    fedasync_aggregate,
    fedasync_mixing,
    fedavg_aggregate,
    mix_models,
)
from .clustering import agglomerative_cluster, tiers_by_latency
from .fedasync import FedAsyncAggregator, FedAsyncSelector
from .fedat import FedATAggregator, FedATSelector, tier_weighted_average
from .fedavg import FedAvgAggregator, FedAvgSelector
from .haccs import HACCSSelector, cluster_weights
from .tifl import TiFLSelector


class StrategyNotFound(KeyError):
    pass


SELECTORS = {
    "fedavg": FedAvgSelector,
    "fedasync": FedAsyncSelector,
    "tifl": TiFLSelector,
    "fedat": FedATSelector,
    "haccs": HACCSSelector,
}

# TiFL and HACCS reuse plain federated averaging for aggregation
AGGREGATORS = {
    "fedavg": FedAvgAggregator,
    "fedasync": FedAsyncAggregator,
    "tifl": FedAvgAggregator,
    "fedat": FedATAggregator,
    "haccs": FedAvgAggregator,
}


def make_selector(name: str, args: dict | None = None) -> ClientSelector:
    try:
        cls = SELECTORS[name]
    except KeyError:
        raise StrategyNotFound(f"unknown client selection strategy {name!r}") from None
    return cls(**(args or {}))


def make_aggregator(name: str, args: dict | None = None) -> Aggregator:
    try:
        cls = AGGREGATORS[name]
    except KeyError:
        raise StrategyNotFound(f"unknown aggregation strategy {name!r}") from None
    return cls(**(args or {}))


__all__ = [
    "DEFER", "Aggregator", "ClientSelector", "SelectionResult", "StrategyContext", "StrategyNotFound",
    "fedasync_aggregate", "fedasync_mixing", "fedavg_aggregate", "mix_models", "agglomerative_cluster",
    "tiers_by_latency", "FedAsyncAggregator", "FedAsyncSelector", "FedATAggregator", "FedATSelector",
    "tier_weighted_average", "FedAvgAggregator", "FedAvgSelector", "HACCSSelector", "cluster_weights",
    "TiFLSelector", "SELECTORS", "AGGREGATORS", "make_selector", "make_aggregator",
]
