import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import approx_fprime

from fedfleet.engine import (
    DatasetMissing,
    Hyperparameters,
    InfeasibleAssignment,
    evaluate,
    init_weights,
    load_dataset,
    loss_and_grad,
    make_blobs,
    partition,
    partition_dirichlet,
    partition_iid,
    partition_label_skew,
    save_dataset,
    skew_metrics,
    train_local,
)
from fedfleet.engine.models import check_shapes, loss_value
from fedfleet.engine.partition import js_divergence, label_count_matrix
from fedfleet.weights import ModelWeights, ShapeMismatch


def flat_loss(family, shapes, X, y, loss):
    names = sorted(shapes)

    def f(theta):
        params, pos = {}, 0
        for n in names:
            size = int(np.prod(shapes[n]))
            params[n] = theta[pos:pos + size].reshape(shapes[n])
            pos += size
        return loss_value(params, X, y, loss)
    return names, f


@pytest.mark.parametrize("family", ["logreg", "mlp"])
@pytest.mark.parametrize("loss", ["crossentropy", "mse"])
def test_gradient_matches_finite_differences(family, loss, blobs):
    w = init_weights(family, blobs.num_features, blobs.num_labels, hidden=5, seed=2)
    params = {k: v.astype(np.float64) + 0.05 for k, v in w.items()}
    X, y = blobs.features[:40].astype(np.float64), blobs.labels[:40]
    _, grads = loss_and_grad(params, X, y, loss)
    names, f = flat_loss(family, {k: v.shape for k, v in params.items()}, X, y, loss)
    theta = np.concatenate([params[n].ravel() for n in names])
    numeric = approx_fprime(theta, f, 1e-6)
    analytic = np.concatenate([grads[n].ravel() for n in names])
    assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def test_full_batch_step_is_one_gradient_step(blobs):
    w = init_weights("logreg", blobs.num_features, blobs.num_labels, seed=1)
    h = Hyperparameters(epochs=1, batch_size=len(blobs), learning_rate=0.3)
    out, metrics = train_local(w, blobs, h)
    X, y = blobs.features.astype(np.float64), blobs.labels
    names, f = flat_loss("logreg", w.shapes(), X, y, "crossentropy")
    theta = np.concatenate([w[n].astype(np.float64).ravel() for n in names])
    expected = theta - 0.3 * approx_fprime(theta, f, 1e-6)
    got = np.concatenate([out[n].astype(np.float64).ravel() for n in names])
    assert np.allclose(got, expected, rtol=1e-4, atol=1e-6)
    assert metrics["steps"] == 1 and metrics["num_samples"] == len(blobs)


def test_zero_epochs_is_identity(blobs):
    w = init_weights("mlp", blobs.num_features, blobs.num_labels, seed=4)
    out, metrics = train_local(w, blobs, Hyperparameters(epochs=0))
    assert out.bit_equal(w) and metrics["steps"] == 0


def test_separable_blobs_train_to_high_accuracy():
    d = make_blobs(400, 2, 2, separation=6.0, seed=5)
    w = init_weights("logreg", 2, 2)
    out, _ = train_local(w, d, Hyperparameters(epochs=50, batch_size=16, learning_rate=0.1))
    assert evaluate(out, d)["accuracy"] >= 0.99


def test_random_weights_are_near_chance():
    d = make_blobs(5000, 10, 10, separation=1.0, seed=6)
    accs = []
    for s in range(5):
        rng = np.random.default_rng(s)
        w = ModelWeights(W=rng.uniform(-1e-3, 1e-3, (10, 10)), b=np.zeros(10))
        accs.append(evaluate(w, d)["accuracy"])
    assert abs(np.mean(accs) - 0.1) <= 0.05


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_training_decreases_loss(blobs, optimizer):
    w = init_weights("mlp", blobs.num_features, blobs.num_labels, hidden=8, seed=0)
    out, _ = train_local(w, blobs, Hyperparameters(epochs=1, batch_size=32, learning_rate=0.01, optimizer=optimizer))
    assert evaluate(out, blobs)["loss"] <= evaluate(w, blobs)["loss"]


def test_training_is_deterministic(blobs):
    w = init_weights("logreg", blobs.num_features, blobs.num_labels)
    h = Hyperparameters(epochs=2, batch_size=17, seed=9)
    a, _ = train_local(w, blobs, h)
    b, _ = train_local(w, blobs, h)
    assert a.bit_equal(b)


def test_shape_errors(blobs):
    with pytest.raises(ShapeMismatch):
        evaluate(ModelWeights(), blobs)
    with pytest.raises(ShapeMismatch):
        check_shapes(init_weights("logreg", 3, 4), blobs.num_features, blobs.num_labels)
    with pytest.raises(ValueError):
        evaluate(init_weights("logreg", 8, 4), blobs.subset([]))


def test_hyperparameter_validation():
    with pytest.raises(ValueError):
        Hyperparameters(epochs=-1)
    with pytest.raises(ValueError):
        Hyperparameters(optimizer="lbfgs")


def test_dataset_roundtrip_and_missing(tmp_path, blobs):
    save_dataset(blobs, tmp_path / "d", "train")
    back = load_dataset(tmp_path / "d", "train")
    assert np.array_equal(back.features, blobs.features) and np.array_equal(back.labels, blobs.labels)
    assert back.num_labels == blobs.num_labels
    with pytest.raises(DatasetMissing):
        load_dataset(tmp_path / "d", "val")


# ---- partitioning

def assert_cover(plan, n):
    joined = np.concatenate(plan.assignment)
    assert len(joined) == n and len(np.unique(joined)) == n


@given(st.integers(1, 12), st.integers(0, 50), st.sampled_from(["iid", "label_skew", "dirichlet"]))
@settings(max_examples=60, deadline=None)
def test_every_sample_assigned_exactly_once(clients, seed, scheme):
    labels = np.repeat(np.arange(10), 40)
    delta = min(10, max(1, seed % 4 + 1))
    if scheme == "label_skew" and clients * delta < 10:
        # not enough label slots to hold every label
        with pytest.raises(InfeasibleAssignment):
            partition(labels, scheme, clients, seed, delta=delta)
        return
    plan = partition(labels, scheme, clients, seed, delta=delta, alpha=0.3)
    assert_cover(plan, len(labels))


def test_label_skew_counts_labels():
    labels = np.repeat(np.arange(10), 100)
    plan = partition_label_skew(labels, 10, 3, seed=1)
    assert plan.params["shards_per_label"] == 3
    held = (label_count_matrix(plan, labels) > 0).sum(axis=1)
    assert held.tolist() == [3] * 10
    plan = partition_label_skew(labels, 4, 10, seed=1)
    assert ((label_count_matrix(plan, labels) > 0).sum(axis=1) == 10).all()
    big = partition_label_skew(np.repeat(np.arange(10), 5000), 46, 3, seed=0)
    assert big.params["shards_per_label"] == math.ceil(46 * 3 / 10) == 14


def test_label_skew_infeasible():
    with pytest.raises(InfeasibleAssignment):
        partition_label_skew(np.repeat(np.arange(10), 10), 4, 11)


def test_cv_of_three_equal_labels():
    # three labels with equal counts, seven absent
    row = [1 / 3] * 3 + [0] * 7
    expected = statistics.pstdev(row) / statistics.fmean(row)
    assert expected == pytest.approx(1.528, abs=5e-4)
    labels = np.repeat(np.arange(10), 30)
    plan = partition_label_skew(labels, 10, 3, seed=0)
    cv, _ = skew_metrics(plan, labels)
    assert cv == pytest.approx(expected, rel=1e-9)


def test_iid_has_no_skew():
    labels = np.repeat(np.arange(10), 100)
    cv, js = skew_metrics(partition_iid(labels, 10, seed=3), labels)
    assert cv == pytest.approx(0, abs=1e-12) and js == pytest.approx(0, abs=1e-12)


def test_dirichlet_large_alpha_is_near_uniform():
    labels = np.repeat(np.arange(10), 5000)
    plan = partition_dirichlet(labels, 5, 1000.0, seed=2)
    counts = label_count_matrix(plan, labels).astype(float)
    dist = counts / counts.sum(axis=1, keepdims=True)
    total_variation = 0.5 * np.abs(dist - 0.1).sum(axis=1)
    assert total_variation.max() <= 0.05


def test_js_divergence_against_scipy():
    from scipy.spatial.distance import jensenshannon

    rng = np.random.default_rng(0)
    for _ in range(20):
        p, q = rng.random(10), rng.random(10)
        p[rng.random(10) < 0.3] = 0
        if p.sum() == 0:
            continue
        assert js_divergence(p, q) == pytest.approx(jensenshannon(p, q) ** 2, rel=1e-9)


def test_partition_on_dataset_object(blobs):
    plan = partition(blobs, "iid", 3, seed=0)
    assert_cover(plan, len(blobs))
    sizes = plan.sizes()
    assert sizes.max() - sizes.min() <= blobs.num_labels
