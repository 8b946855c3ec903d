import itertools
import math

import numpy as np
import pytest
from scipy.cluster.hierarchy import cut_tree, linkage

from fedfleet.strategies import (
    DEFER,
    FedAsyncAggregator,
    FedAsyncSelector,
    FedATAggregator,
    FedATSelector,
    FedAvgAggregator,
    FedAvgSelector,
    HACCSSelector,
    StrategyNotFound,
    TiFLSelector,
    agglomerative_cluster,
    cluster_weights,
    fedasync_aggregate,
    fedasync_mixing,
    fedavg_aggregate,
    make_aggregator,
    make_selector,
    tier_weighted_average,
    tiers_by_latency,
)
from fedfleet.weights import ModelWeights

from helpers import add_client, context, new_states, report, set_round


def random_model(rng, shapes):
    return ModelWeights({k: rng.normal(size=s) for k, s in shapes.items()})


def random_shapes(rng):
    return {f"t{i}": tuple(int(d) for d in rng.integers(1, 4, size=rng.integers(0, 3))) for i in range(rng.integers(1, 4))}


# ---- brute-force references

def ref_weighted_mean(models, weights):
    out = {}
    for name in models[0]:
        flat = [np.asarray(m[name], dtype=np.float64).ravel().tolist() for m in models]
        vals = []
        for e in range(len(flat[0])):
            num = 0.0
            for f, w in zip(flat, weights):
                num += f[e] * w
            vals.append(num / sum(weights))
        out[name] = np.array(vals).reshape(np.shape(models[0][name]))
    return out


def ref_mix(g, u, tau, t, alpha, a):
    s = alpha * math.pow(t - tau + 1, -a)
    return {k: np.array([(1 - s) * x + s * y for x, y in zip(np.ravel(g[k]).astype(float), np.ravel(u[k]).astype(float))]
                        ).reshape(np.shape(g[k])) for k in g}


def ref_complete_linkage(points, k):
    clusters = [frozenset([i]) for i in range(len(points))]

    def dist(a, b):
        return max(math.dist(points[i], points[j]) for i in a for j in b)

    while len(clusters) > k:
        best = None
        for x, y in itertools.combinations(range(len(clusters)), 2):
            d = dist(clusters[x], clusters[y])
            if best is None or d < best[0]:
                best = (d, x, y)
        _, x, y = best
        merged = clusters[x] | clusters[y]
        clusters = [c for i, c in enumerate(clusters) if i not in (x, y)] + [merged]
    return set(clusters)


def as_groups(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def close(a, b, tol=1e-7):
    # results are float32 tensors, so the tolerance scales with magnitude above 1
    return set(a) == set(b) and all(
        np.all(np.abs(np.asarray(a[k], float) - b[k]) <= tol * np.maximum(1.0, np.abs(b[k]))) for k in a)


# ---- aggregation primitives

def test_fedavg_aggregate_small_cases():
    out = fedavg_aggregate([(ModelWeights(x=[1.0]), 1), (ModelWeights(x=[3.0]), 3)])
    assert out["x"].tolist() == [2.5]
    m = ModelWeights(x=np.arange(4.0))
    assert fedavg_aggregate([(m, 7)]).bit_equal(m)
    with pytest.raises(ValueError):
        fedavg_aggregate([])


def test_fedavg_aggregate_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(150):
        shapes = random_shapes(rng)
        models = [random_model(rng, shapes) for _ in range(rng.integers(1, 6))]
        weights = [float(rng.integers(1, 500)) for _ in models]
        got = fedavg_aggregate(list(zip(models, weights)))
        assert close(got, ref_weighted_mean(models, weights))


def test_fedasync_mixing_values():
    g, u = ModelWeights(x=[0.0]), ModelWeights(x=[1.0])
    assert fedasync_aggregate(g, u, 5, 5, alpha=0.9)["x"][0] == pytest.approx(0.9)
    weights = [fedasync_mixing(0.9, s, 0.5) for s in range(6)]
    assert all(a > b for a, b in zip(weights, weights[1:]))
    assert {fedasync_mixing(0.9, s, 0.0) for s in range(6)} == {0.9}
    with pytest.raises(ValueError):
        fedasync_mixing(0.9, -1, 0.5)


def test_fedasync_aggregate_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(150):
        shapes = random_shapes(rng)
        g, u = random_model(rng, shapes), random_model(rng, shapes)
        t = int(rng.integers(0, 30))
        tau = int(rng.integers(0, t + 1))
        alpha, a = float(rng.uniform(0.05, 1.0)), float(rng.uniform(0, 2))
        got = fedasync_aggregate(g, u, tau, t, alpha, a)
        assert close(got, ref_mix(g, u, tau, t, alpha, a))


def test_tier_weighted_average_matches_reference():
    rng = np.random.default_rng(2)
    for _ in range(150):
        shapes = random_shapes(rng)
        models = [random_model(rng, shapes) for _ in range(rng.integers(1, 5))]
        counts = [int(c) for c in rng.integers(0, 6, size=len(models))]
        if sum(counts) == 0:
            counts[0] = 1
        used = [(m, c) for m, c in zip(models, counts) if c > 0]
        got = tier_weighted_average(models, counts)
        assert close(got, ref_weighted_mean([m for m, _ in used], [c for _, c in used]))


# ---- clustering

def test_clustering_matches_exhaustive_reference():
    rng = np.random.default_rng(3)
    for trial in range(120):
        n = int(rng.integers(2, 13))
        dims = 1 if trial % 2 else int(rng.integers(2, 5))
        pts = rng.normal(size=(n, dims))
        k = int(rng.integers(1, n + 1))
        got = agglomerative_cluster(pts, k)
        assert as_groups(got) == ref_complete_linkage([tuple(p) for p in pts], k)
        # a second independent route through scipy's implementation
        if n > 1:
            assert as_groups(got) == as_groups(cut_tree(linkage(pts, "complete"), n_clusters=k).ravel())


def test_clustering_boundaries():
    pts = np.arange(5.0)
    assert len(set(agglomerative_cluster(pts, 5))) == 5
    assert set(agglomerative_cluster(pts, 1)) == {0}
    with pytest.raises(ValueError):
        agglomerative_cluster(pts, 6)


def test_latency_tiers():
    lat = {"a": 1.0, "b": 1.1, "c": 5.0, "d": 5.2, "e": 20.0}
    assert tiers_by_latency(lat, 3) == [["a", "b"], ["c", "d"], ["e"]]
    assert tiers_by_latency({}, 3) == []


# ---- FedAvg selection and aggregation

def test_fedavg_selects_ten_percent_once_per_model():
    st = new_states()
    for i in range(208):
        add_client(st, f"c{i:03d}")
    sel = FedAvgSelector(fraction=0.1)
    res = sel.select(context(st, "client_selection"))
    assert len(res.train) == len(set(res.train)) == 20 and res.validate is None
    assert sel.select(context(st, "client_selection")) == DEFER
    set_round(st, 1)
    assert len(sel.select(context(st, "client_selection")).train) == 20


def test_fedavg_defers_with_nobody_available():
    st = new_states()
    add_client(st, "c1", active=False)
    assert FedAvgSelector().select(context(st, "client_selection")) == DEFER


def fedavg_round(selected, required=None, samples=None):
    st = new_states(round_number=4, model=ModelWeights(x=[0.0]))
    for c in selected:
        add_client(st, c)
    st.client_selection.put("selected_clients", None, selected)
    st.client_selection.put("selected_round", None, 4)
    for c in selected:
        report(st, c, 4, samples=(samples or {}).get(c, 1))
    args = {} if required is None else {"min_clients": required}
    return st, FedAvgAggregator(**args)


def test_fedavg_waits_for_all_then_weights_by_samples():
    st, agg = fedavg_round(["c1", "c3"], samples={"c1": 1, "c3": 3})
    assert agg.aggregate(context(st, "aggregation"), "c3", ModelWeights(x=[3.0])) is None
    out = agg.aggregate(context(st, "aggregation"), "c1", ModelWeights(x=[1.0]))
    assert out["x"].tolist() == [2.5]
    assert not any(p.startswith("clientweights_") for p in st.aggregation.primaries())


def test_fedavg_m_of_n():
    st, agg = fedavg_round([f"c{i}" for i in range(5)], required=3)
    ctx = lambda: context(st, "aggregation")  # noqa: E731
    assert agg.aggregate(ctx(), "c0", None) is None
    assert agg.aggregate(ctx(), "c1", None) is None
    assert agg.aggregate(ctx(), "c2", ModelWeights(x=[1.0])) is None
    assert agg.aggregate(ctx(), "c3", ModelWeights(x=[2.0])) is None
    assert agg.aggregate(ctx(), "c4", ModelWeights(x=[3.0]))["x"].tolist() == [2.0]


def test_fedavg_m_of_n_aborts_when_m_unreachable():
    st, agg = fedavg_round([f"c{i}" for i in range(5)], required=3)
    for c in ("c0", "c1", "c2"):
        assert agg.aggregate(context(st, "aggregation"), c, None) is None
    assert st.aggregation.get("abort_count") == 1
    # the selector sees the abort and picks again for the same model version
    res = FedAvgSelector(num_clients=2).select(context(st, "client_selection"))
    assert len(res.train) == 2


def test_plain_fedavg_failure_aborts_round():
    st, agg = fedavg_round(["c1", "c2"])
    assert agg.aggregate(context(st, "aggregation"), "c1", ModelWeights(x=[1.0])) is None
    assert agg.aggregate(context(st, "aggregation"), "c2", None) is None
    assert st.aggregation.get("abort_count") == 1


def test_fedavg_ignores_stale_response():
    st, agg = fedavg_round(["c1"])
    report(st, "c1", 3)
    assert agg.aggregate(context(st, "aggregation"), "c1", ModelWeights(x=[1.0])) is None


# ---- FedAsync

def test_fedasync_keeps_target_in_flight():
    st = new_states(model=ModelWeights(x=[0.0]))
    for i in range(10):
        add_client(st, f"c{i}")
    sel = FedAsyncSelector(num_clients=3)
    first = sel.select(context(st, "client_selection"))
    assert len(first.train) == 3
    for c in first.train:
        st.client_info.put(c, "is_training", True)
    assert sel.select(context(st, "client_selection")) == DEFER
    st.client_info.put(first.train[0], "is_training", False)
    assert len(sel.select(context(st, "client_selection")).train) == 1


def test_fedasync_aggregator_discounts_staleness():
    st = new_states(round_number=3, model=ModelWeights(x=[0.0]))
    report(st, "c1", 1)
    out = FedAsyncAggregator(mixing=0.5, staleness_exponent=1.0).aggregate(
        context(st, "aggregation"), "c1", ModelWeights(x=[1.0]))
    assert out["x"][0] == pytest.approx(0.5 / 3)
    assert FedAsyncAggregator().aggregate(context(st, "aggregation"), "c1", None) is None


# ---- TiFL

def tifl_states(n=6):
    st = new_states(model=ModelWeights(x=[0.0]))
    st.training_session.put("s", "training_config", {"num_training_rounds": 30})
    for i in range(n):
        add_client(st, f"c{i}", benchmark=[1, 1.1, 5, 5.2, 20, 21][i])
    return st


def test_tifl_starts_with_equal_tier_probabilities():
    st = tifl_states()
    res = TiFLSelector(num_tiers=3, num_clients=1).select(context(st, "client_selection"))
    assert st.client_selection.get("tier_probs") == pytest.approx([1 / 3] * 3)
    assert st.client_selection.get("tier_credits") is not None and len(res.train) == 1
    tiers = st.client_selection.get("client_tiers")
    assert tiers == [["c0", "c1"], ["c2", "c3"], ["c4", "c5"]]
    assert any(res.train[0] in t for t in tiers)


def test_tifl_validation_sweep_covers_all_available():
    st = tifl_states()
    sel = TiFLSelector(num_tiers=3, num_clients=1, val_round_interval=10)
    sel.select(context(st, "client_selection"))
    set_round(st, 10)
    res = sel.select(context(st, "client_selection"))
    assert res.train is None and res.validate == [f"c{i}" for i in range(6)]
    assert sel.select(context(st, "client_selection")) == DEFER
    for i in range(6):
        # the slow tier reports the highest validation loss
        st.client_training.put(f"c{i}", "validation_metrics", {"round": 10, "loss": [1, 1, 1, 1, 4, 4][i]})
    res = sel.select(context(st, "client_selection"))
    assert res.train and res.validate is None
    assert st.client_selection.get("tier_probs") == pytest.approx([1 / 6, 1 / 6, 4 / 6])


def test_tifl_spends_credits():
    st = tifl_states()
    sel = TiFLSelector(num_tiers=3, num_clients=1, credits_per_tier=1)
    seen = []
    for r in range(3):
        set_round(st, r)
        sel.select(context(st, "client_selection", seed=r))
        seen.append(st.client_selection.get("chosen_tier"))
    assert sorted(seen) == [0, 1, 2]
    assert st.client_selection.get("tier_credits") == [0, 0, 0]


# ---- FedAT

def test_fedat_weights_tiers_by_update_count():
    st = new_states(model=ModelWeights(x=[0.0]))
    for cid, lat in (("f1", 1.0), ("f2", 1.1), ("s1", 9.0), ("s2", 9.5)):
        add_client(st, cid, benchmark=lat)
    sel, agg = FedATSelector(num_tiers=2, num_clients_selected_per_tier=2), FedATAggregator()
    first = sel.select(context(st, "client_selection"))
    assert first.train == ["f1", "f2", "s1", "s2"]

    def respond(cid, value, rnd):
        report(st, cid, rnd, samples=1)
        return agg.aggregate(context(st, "aggregation"), cid, ModelWeights(x=[value]))

    assert respond("f1", 3.0, 0) is None
    out = respond("f2", 3.0, 0)
    assert out["x"][0] == pytest.approx(3.0)
    set_round(st, 1, out)
    assert sel.select(context(st, "client_selection")).train == ["f1", "f2"]
    assert sel.select(context(st, "client_selection")) == DEFER
    respond("f1", 3.0, 1)
    out = respond("f2", 3.0, 1)
    set_round(st, 2, out)
    sel.select(context(st, "client_selection"))
    respond("s1", 6.0, 0)
    out = respond("s2", 6.0, 0)
    # tier 0 finished twice, tier 1 once: (2 * 3 + 1 * 6) / 3
    assert out["x"][0] == pytest.approx(4.0)
    assert st.aggregation.get("update_count_tier_0") == 2 and st.aggregation.get("update_count_tier_1") == 1


def test_fedat_tier_with_pending_client_returns_none():
    st = new_states(model=ModelWeights(x=[0.0]))
    for cid, lat in (("a", 1.0), ("b", 1.0), ("c", 8.0)):
        add_client(st, cid, benchmark=lat)
    FedATSelector(num_tiers=2).select(context(st, "client_selection"))
    report(st, "a", 0)
    assert FedATAggregator().aggregate(context(st, "aggregation"), "a", ModelWeights(x=[1.0])) is None


# ---- HACCS

def test_haccs_weights():
    w = cluster_weights(np.array([2.0, 2.0, 2.0]), np.array([1.0, 2.0, 3.0]), 0.5)
    assert w.tolist() == pytest.approx([0.5, 0.25, 0.0])
    w = cluster_weights(np.array([1.0, 3.0]), np.array([5.0, 5.0]), 1.0)
    assert w.tolist() == pytest.approx([0.0, 1.0])


def test_haccs_identical_histograms_share_cluster_and_fastest_wins():
    st = new_states(model=ModelWeights(x=[0.0]))
    add_client(st, "A", benchmark=2.0, histogram=[10, 0, 0])
    add_client(st, "B", benchmark=5.0, histogram=[20, 0, 0])
    add_client(st, "C", benchmark=1.0, histogram=[0, 0, 9])
    for k in (1, 2):
        labels = {}
        sel = HACCSSelector(num_clusters=k, num_clients=1)
        for seed in range(20):
            set_round(st, seed + 1)
            res = sel.select(context(st, "client_selection", seed=seed))
            labels.setdefault(res.train[0], 0)
            labels[res.train[0]] += 1
        # B is never picked: A is faster in the same cluster
        assert "B" not in labels


def test_haccs_skips_clients_without_histogram():
    st = new_states()
    add_client(st, "A", histogram=[1, 1])
    add_client(st, "B")
    res = HACCSSelector(num_clusters=2, num_clients=2).select(context(st, "client_selection"))
    assert res.train == ["A"]


# ---- registry

def test_registry():
    assert isinstance(make_selector("tifl", {"num_tiers": 2}), TiFLSelector)
    assert isinstance(make_aggregator("haccs"), FedAvgAggregator)
    with pytest.raises(StrategyNotFound):
        make_selector("nope")
    with pytest.raises(StrategyNotFound):
        make_aggregator("nope")
