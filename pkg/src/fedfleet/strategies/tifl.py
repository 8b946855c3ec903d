"""Tier-based selection: latency tiers, a tier drawn per round by probability,
with periodic client-side validation sweeps to re-weight the tiers."""

from __future__ import annotations

import numpy as np

from .base import DEFER, ClientSelector, SelectionResult, log
from .clustering import tiers_by_latency
from .fedavg import needs_fresh_selection, record_selection


class TiFLSelector(ClientSelector):
    """args: ``num_tiers`` (3), ``num_clients`` per round (2),
    ``credits_per_tier`` (rounds / tiers), ``val_round_interval`` (10)."""

    name = "tifl"

    def _setup(self, ctx) -> bool:
        cs = ctx.client_selection
        latencies = {c: ctx.latency(c) or 0.0 for c in ctx.available_clients}
        if not latencies:
            return False
        num_tiers = int(self.args.get("num_tiers", 3))
        tiers = tiers_by_latency(latencies, num_tiers)
        rounds = int(ctx.training_config.get("num_training_rounds", 100))
        credits = self.args.get("credits_per_tier")
        credits = int(credits) if credits is not None else max(1, rounds // len(tiers))
        cs.put("client_tiers", None, tiers)
        cs.put("tier_probs", None, [1.0 / len(tiers)] * len(tiers))
        cs.put("tier_credits", None, [credits] * len(tiers))
        cs.put("val_ongoing", None, False)
        return True

    def _place_newcomers(self, ctx, tiers: list[list[str]]) -> list[list[str]]:
        known = {c for t in tiers for c in t}
        fresh = [c for c in ctx.available_clients if c not in known and ctx.latency(c) is not None]
        if not fresh:
            return tiers
        means = [np.mean([ctx.latency(c) or 0.0 for c in t]) for t in tiers]
        for c in fresh:
            tiers[int(np.argmin([abs(m - ctx.latency(c)) for m in means]))].append(c)
        ctx.client_selection.put("client_tiers", None, tiers)
        return tiers

    def _validation_sweep(self, ctx) -> SelectionResult | None:
        """Returns a result to hand back, or None once the sweep is complete."""
        cs = ctx.client_selection
        rnd = ctx.round_number
        if not cs.get("val_ongoing"):
            targets = sorted(ctx.available_clients)
            if not targets:
                return DEFER
            cs.put("val_ongoing", None, True)
            cs.put("val_clients", None, targets)
            return SelectionResult(None, targets)
        targets = cs.get("val_clients") or []
        losses = {}
        for c in targets:
            vm = ctx.client_training.get(c, "validation_metrics") or {}
            if vm.get("round") != rnd:
                return DEFER
            if "loss" in vm:
                losses[c] = float(vm["loss"])
        tiers = cs.get("client_tiers")
        tier_loss = [np.mean([losses[c] for c in t if c in losses]) if any(c in losses for c in t) else np.nan
                     for t in tiers]
        known = [v for v in tier_loss if not np.isnan(v)]
        fill = float(np.mean(known)) if known else 1.0
        weights = np.array([fill if np.isnan(v) else v for v in tier_loss]) + 1e-12
        cs.put("tier_probs", None, list(weights / weights.sum()))
        cs.put("val_ongoing", None, False)
        cs.put("val_done_round", None, rnd)
        return None

    def select(self, ctx):
        cs = ctx.client_selection
        rnd = ctx.round_number
        if cs.get("client_tiers") is None:
            if not self._setup(ctx):
                return DEFER
        interval = int(self.args.get("val_round_interval", 10))
        if rnd > 0 and interval > 0 and rnd % interval == 0 and cs.get("val_done_round") != rnd:
            pending = self._validation_sweep(ctx)
            if pending is not None:
                return pending
        if not needs_fresh_selection(ctx) or not ctx.available_clients:
            return DEFER
        tiers = self._place_newcomers(ctx, cs.get("client_tiers"))
        probs = np.asarray(cs.get("tier_probs"), dtype=float)
        credits = list(cs.get("tier_credits"))
        avail = set(ctx.available_clients)
        usable = [i for i, t in enumerate(tiers) if credits[i] > 0 and avail.intersection(t)]
        if not usable:
            # every tier with free clients is out of credit; keep training anyway
            usable = [i for i, t in enumerate(tiers) if avail.intersection(t)]
            log.info("strategy=tifl action=credits_exhausted round=%d", rnd)
        if not usable:
            return DEFER
        p = probs[usable] / probs[usable].sum()
        tier = usable[int(ctx.rng.choice(len(usable), p=p))]
        credits[tier] -= 1
        cs.put("tier_credits", None, credits)
        pool = sorted(avail.intersection(tiers[tier]))
        chosen = ctx.sample(pool, int(self.args.get("num_clients", 2)))
        cs.put("chosen_tier", None, tier)
        record_selection(ctx, chosen)
        return SelectionResult(chosen, None)

    def on_resume(self, ctx) -> None:
        ctx.client_selection.delete("selected_round")
        ctx.client_selection.put("val_ongoing", None, False)
