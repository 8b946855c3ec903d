"""Synchronous federated averaging with optional m-of-n aggregation."""

from __future__ import annotations

import math

from .base import DEFER, Aggregator, ClientSelector, SelectionResult, StrategyContext, fedavg_aggregate, log


def needs_fresh_selection(ctx: StrategyContext) -> bool:
    """True when the previous selection is finished: a new global model exists,
    the aggregator aborted the round, or the last attempt found nobody."""
    cs = ctx.client_selection
    if cs.get("selected_round") != ctx.round_number:
        return True
    if int(ctx.aggregation.get("abort_count", None, 0)) > int(cs.get("aborts_seen", None, 0)):
        return True
    return not cs.get("selected_clients")


def record_selection(ctx: StrategyContext, chosen: list[str]) -> None:
    cs = ctx.client_selection
    cs.put("selected_clients", None, chosen)
    cs.put("selected_round", None, ctx.round_number)
    cs.put("aborts_seen", None, int(ctx.aggregation.get("abort_count", None, 0)))


class FedAvgSelector(ClientSelector):
    """Pick a fraction of active clients once per global model version.

    args: ``fraction`` (default 0.1) or an explicit ``num_clients``.
    """

    name = "fedavg"

    def select(self, ctx: StrategyContext) -> SelectionResult:
        if not needs_fresh_selection(ctx):
            return DEFER
        if not ctx.available_clients:
            return DEFER
        if "num_clients" in self.args:
            k = int(self.args["num_clients"])
        else:
            k = math.floor(float(self.args.get("fraction", 0.1)) * len(ctx.active_clients()))
        chosen = ctx.sample(ctx.available_clients, max(1, k))
        record_selection(ctx, chosen)
        return SelectionResult(chosen, None)

    def on_resume(self, ctx: StrategyContext) -> None:
        ctx.client_selection.delete("selected_round")


class FedAvgAggregator(Aggregator):
    """Average the selected clients' models weighted by sample count.

    args: ``min_clients`` (m) or ``min_fraction``; by default all n selected
    clients must report. The round aggregates as soon as m models are in and
    aborts as soon as fewer than m can still arrive.
    """

    name = "fedavg"

    def required(self, n: int) -> int:
        if "min_clients" in self.args:
            return max(1, min(n, int(self.args["min_clients"])))
        if "min_fraction" in self.args:
            return max(1, min(n, math.ceil(float(self.args["min_fraction"]) * n)))
        return n

    def aggregate(self, ctx, client_id, local_model):
        rnd = ctx.round_number
        cs = ctx.client_selection
        selected = cs.get("selected_clients") or []
        if cs.get("selected_round") != rnd or client_id not in selected or ctx.trained_from(client_id) != rnd:
            log.info("strategy=fedavg action=ignore_stale client=%s round=%d", client_id, rnd)
            return None
        agg = ctx.aggregation
        stash_key, fail_key = f"clientweights_{rnd}", f"failed_{rnd}"
        if local_model is None:
            agg.put(fail_key, client_id, True)
        else:
            agg.put(stash_key, client_id, local_model)
        done = agg.secondaries(stash_key)
        failed = agg.secondaries(fail_key)
        m = self.required(len(selected))
        if len(done) >= m:
            model = fedavg_aggregate([(agg.get(stash_key, c), ctx.sample_count(c)) for c in done])
            self._clear_rounds(agg)
            return model
        if len(selected) - len(failed) < m:
            log.info("strategy=fedavg action=abort_round round=%d failed=%d required=%d", rnd, len(failed), m)
            self._clear_rounds(agg)
            agg.put("abort_count", None, int(agg.get("abort_count", None, 0)) + 1)
        return None

    @staticmethod
    def _clear_rounds(agg) -> None:
        for p in agg.primaries():
            if p.startswith(("clientweights_", "failed_")):
                agg.delete_primary(p)

    def on_resume(self, ctx) -> None:
        self._clear_rounds(ctx.aggregation)
