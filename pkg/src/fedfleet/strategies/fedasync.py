"""Asynchronous aggregation: every returned model is mixed into the global
model with a staleness-discounted weight."""

from __future__ import annotations

import math

from .base import DEFER, Aggregator, ClientSelector, SelectionResult, fedasync_aggregate


class FedAsyncSelector(ClientSelector):
    """Start a fraction of active clients, then keep that many in flight.

    In steady state this picks exactly one new client per aggregation; a
    failed client is replaced the same way.
    """

    name = "fedasync"

    def select(self, ctx):
        cs = ctx.client_selection
        target = cs.get("target_concurrency")
        if target is None:
            if not ctx.available_clients:
                return DEFER
            if "num_clients" in self.args:
                target = int(self.args["num_clients"])
            else:
                target = math.floor(float(self.args.get("fraction", 0.1)) * len(ctx.active_clients()))
            target = max(1, target)
            cs.put("target_concurrency", None, target)
        in_flight = sum(1 for c in ctx.client_info.primaries() if ctx.is_training(c))
        need = target - in_flight
        if need <= 0 or not ctx.available_clients:
            return DEFER
        chosen = ctx.sample(ctx.available_clients, need)
        cs.put("selected_clients", None, chosen)
        return SelectionResult(chosen, None)


class FedAsyncAggregator(Aggregator):
    """args: ``mixing`` (alpha, default 0.9), ``staleness_exponent`` (a, default 0.5)."""

    name = "fedasync"
    synchronous = False

    def aggregate(self, ctx, client_id, local_model):
        if local_model is None:
            return None
        tau = ctx.trained_from(client_id)
        t = ctx.round_number
        tau = t if tau is None else min(int(tau), t)
        return fedasync_aggregate(ctx.global_model, local_model, tau, t,
                                  float(self.args.get("mixing", 0.9)),
                                  float(self.args.get("staleness_exponent", 0.5)))
