"""Histogram-clustered selection: group clients by label distribution, weigh
clusters by training loss against latency, and take the fastest client of
each sampled cluster."""

from __future__ import annotations

import numpy as np

from .base import DEFER, ClientSelector, SelectionResult, log
from .clustering import agglomerative_cluster
from .fedavg import needs_fresh_selection, record_selection


def _minmax(values: np.ndarray) -> np.ndarray:
    span = values.max() - values.min()
    return np.zeros_like(values) if span <= 0 else (values - values.min()) / span


def cluster_weights(avg_loss: np.ndarray, max_latency: np.ndarray, tradeoff: float) -> np.ndarray:
    """``tradeoff * loss_score + (1 - tradeoff) * speed_score`` per cluster.

    Both scores are min-max normalized over the clusters; the speed score is
    ``1 - normalized max latency`` so faster clusters weigh more.
    """
    return tradeoff * _minmax(avg_loss) + (1.0 - tradeoff) * (1.0 - _minmax(max_latency))


class HACCSSelector(ClientSelector):
    """args: ``num_clusters`` (4), ``num_clients`` selection slots (2),
    ``tradeoff`` loss/latency weight (0.5)."""

    name = "haccs"

    def select(self, ctx):
        if not needs_fresh_selection(ctx) or not ctx.available_clients:
            return DEFER
        hist = {}
        for c in ctx.available_clients:
            h = ctx.label_histogram(c)
            if not h or sum(h) <= 0:
                log.info("strategy=haccs action=exclude reason=missing_histogram client=%s", c)
                continue
            hist[c] = np.asarray(h, dtype=float) / float(sum(h))
        ids = sorted(hist)
        if not ids:
            return DEFER
        k = min(int(self.args.get("num_clusters", 4)), len(ids))
        labels = agglomerative_cluster(np.stack([hist[c] for c in ids]), k)
        clusters = [[c for c, lab in zip(ids, labels) if lab == i] for i in range(k)]

        lat = {c: ctx.latency(c) for c in ids}
        known_lat = [v for v in lat.values() if v is not None]
        fill_lat = float(np.mean(known_lat)) if known_lat else 0.0
        lat = {c: (fill_lat if v is None else v) for c, v in lat.items()}
        loss = {}
        for c in ids:
            m = ctx.client_training.get(c, "training_metrics") or {}
            if "loss" in m:
                loss[c] = float(m["loss"])
        # clusters nobody has trained in yet get the highest observed loss
        fill_loss = max(loss.values()) if loss else 1.0
        avg_loss = np.array([np.mean([loss.get(c, fill_loss) for c in cl]) for cl in clusters])
        max_lat = np.array([max(lat[c] for c in cl) for cl in clusters])
        w = cluster_weights(avg_loss, max_lat, float(self.args.get("tradeoff", 0.5)))
        p = w / w.sum() if w.sum() > 0 else np.full(k, 1.0 / k)

        slots = int(self.args.get("num_clients", 2))
        draws = ctx.rng.choice(k, size=slots, replace=True, p=p)
        chosen: list[str] = []
        for cl in draws:
            for c in sorted(clusters[cl], key=lambda c: (lat[c], c)):
                if c not in chosen:
                    chosen.append(c)
                    break
        chosen.sort()
        record_selection(ctx, chosen)
        return SelectionResult(chosen, None)

    def on_resume(self, ctx) -> None:
        ctx.client_selection.delete("selected_round")
