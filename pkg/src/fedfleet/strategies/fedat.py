"""Synchronous training within latency tiers, asynchronous across tiers.

Client Selection state keys: ``client_to_tier_id_dict``, ``selected_clients_tier_{i}``,
``selected_round_tier_{i}``, ``tier_agg_num_{i}``.
Aggregation state keys: ``clientweights_{i}`` (per client), ``update_count_tier_{i}``,
``tier_model_tier_{i}``, ``tier_abort_{i}``.
"""

from __future__ import annotations

from ..weights import ModelWeights
from .base import DEFER, Aggregator, ClientSelector, SelectionResult, fedavg_aggregate, log
from .clustering import tiers_by_latency


def tier_weighted_average(tier_models: list[ModelWeights], update_counts: list[int]) -> ModelWeights:
    """Global model as the update-count weighted mean of the tier models."""
    pairs = [(m, n) for m, n in zip(tier_models, update_counts) if n > 0]
    return fedavg_aggregate(pairs)


class FedATSelector(ClientSelector):
    """args: ``num_tiers`` (3), ``num_clients_selected_per_tier`` (2)."""

    name = "fedat"

    def _per_tier(self) -> int:
        return int(self.args.get("num_clients_selected_per_tier", self.args.get("clients_per_tier", 2)))

    def _pick(self, ctx, tier: int, members: list[str]) -> list[str]:
        cs = ctx.client_selection
        pool = [c for c in members if c in set(ctx.available_clients)]
        chosen = ctx.sample(pool, self._per_tier())
        cs.put(f"selected_clients_tier_{tier}", None, chosen)
        cs.put(f"selected_round_tier_{tier}", None, ctx.round_number)
        cs.put(f"tier_pending_{tier}", None, not chosen)
        return chosen

    def select(self, ctx):
        cs = ctx.client_selection
        mapping = cs.get("client_to_tier_id_dict")
        if mapping is None:
            if not ctx.available_clients:
                return DEFER
            latencies = {c: ctx.latency(c) or 0.0 for c in ctx.available_clients}
            tiers = tiers_by_latency(latencies, int(self.args.get("num_tiers", 3)))
            mapping = {c: i for i, t in enumerate(tiers) for c in t}
            cs.put("client_to_tier_id_dict", None, mapping)
            cs.put("num_tiers", None, len(tiers))
            chosen = []
            for i, members in enumerate(tiers):
                cs.put(f"tier_agg_num_{i}", None, 0)
                cs.put(f"tier_abort_seen_{i}", None, 0)
                chosen += self._pick(ctx, i, members)
            return SelectionResult(sorted(chosen), None) if chosen else DEFER

        num_tiers = int(cs.get("num_tiers"))
        members = [[c for c, t in mapping.items() if t == i] for i in range(num_tiers)]
        agg = ctx.aggregation
        if cs.get("resume_pending"):
            cs.put("resume_pending", None, False)
            chosen = []
            for i in range(num_tiers):
                cs.put(f"tier_agg_num_{i}", None, int(agg.get(f"update_count_tier_{i}", None, 0)))
                cs.put(f"tier_abort_seen_{i}", None, int(agg.get(f"tier_abort_{i}", None, 0)))
                chosen += self._pick(ctx, i, members[i])
            return SelectionResult(sorted(chosen), None) if chosen else DEFER
        for i in range(num_tiers):
            cs_num = int(cs.get(f"tier_agg_num_{i}", None, 0))
            agg_num = int(agg.get(f"update_count_tier_{i}", None, 0))
            aborts = int(agg.get(f"tier_abort_{i}", None, 0))
            if cs_num < agg_num:
                cs.put(f"tier_agg_num_{i}", None, cs_num + 1)
            elif aborts > int(cs.get(f"tier_abort_seen_{i}", None, 0)):
                cs.put(f"tier_abort_seen_{i}", None, aborts)
            elif not cs.get(f"tier_pending_{i}"):
                continue
            chosen = self._pick(ctx, i, members[i])
            if chosen:
                return SelectionResult(chosen, None)
        return DEFER

    def on_resume(self, ctx) -> None:
        if ctx.client_selection.get("client_to_tier_id_dict") is not None:
            ctx.client_selection.put("resume_pending", None, True)


class FedATAggregator(Aggregator):
    name = "fedat"
    synchronous = False

    def aggregate(self, ctx, client_id, local_model):
        agg = ctx.aggregation
        cs = ctx.client_selection
        num_tiers = int(cs.get("num_tiers", None, 0))
        if not agg.get("initialized"):
            g = ctx.global_model
            for i in range(num_tiers):
                agg.put(f"update_count_tier_{i}", None, 0)
                agg.put(f"tier_model_tier_{i}", None, g)
            agg.put("initialized", None, True)
        mapping = cs.get("client_to_tier_id_dict") or {}
        tier = mapping.get(client_id)
        if tier is None:
            return None
        selected = cs.get(f"selected_clients_tier_{tier}") or []
        if client_id not in selected or ctx.trained_from(client_id) != cs.get(f"selected_round_tier_{tier}"):
            log.info("strategy=fedat action=ignore_stale client=%s tier=%d", client_id, tier)
            return None
        stash = f"clientweights_{tier}"
        agg.put(stash, client_id, local_model)
        returned = agg.entries(stash)
        if not all(c in returned for c in selected):
            return None
        agg.delete_primary(stash)
        ok = {c: w for c, w in returned.items() if w is not None}
        if not ok:
            agg.put(f"tier_abort_{tier}", None, int(agg.get(f"tier_abort_{tier}", None, 0)) + 1)
            log.info("strategy=fedat action=abort_tier tier=%d", tier)
            return None
        tier_model = fedavg_aggregate([(w, ctx.sample_count(c)) for c, w in sorted(ok.items())])
        agg.put(f"tier_model_tier_{tier}", None, tier_model)
        agg.put(f"update_count_tier_{tier}", None, int(agg.get(f"update_count_tier_{tier}", None, 0)) + 1)
        models = [agg.get(f"tier_model_tier_{i}") for i in range(num_tiers)]
        counts = [int(agg.get(f"update_count_tier_{i}", None, 0)) for i in range(num_tiers)]
        return tier_weighted_average(models, counts)

    def on_resume(self, ctx) -> None:
        for p in ctx.aggregation.primaries():
            if p.startswith("clientweights_"):
                ctx.aggregation.delete_primary(p)

