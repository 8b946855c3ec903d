"""Built-in model families and the local trainer.

Two families, identified by their tensor names:

* ``logreg``: ``W`` (l x d), ``b`` (l)
* ``mlp``: ``W1`` (h x d), ``b1`` (h), ``W2`` (l x h), ``b2`` (l), ReLU hidden layer

Training runs in float64 and returns float32 weights.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from ..weights import ModelWeights, ShapeMismatch
from .data import Dataset

FAMILIES = ("logreg", "mlp")
LOSSES = ("crossentropy", "mse")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class Hyperparameters:
    epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.1
    optimizer: str = "sgd"
    loss: str = "crossentropy"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unsupported loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def init_weights(family: str, num_features: int, num_labels: int, hidden: int = 32,
                 seed: int = 0) -> ModelWeights:
    rng = np.random.default_rng(seed)
    if family == "logreg":
        return ModelWeights(W=rng.normal(0, 0.01, (num_labels, num_features)), b=np.zeros(num_labels))
    if family == "mlp":
        return ModelWeights(
            W1=rng.normal(0, np.sqrt(2.0 / num_features), (hidden, num_features)),
            b1=np.zeros(hidden),
            W2=rng.normal(0, np.sqrt(1.0 / hidden), (num_labels, hidden)),
            b2=np.zeros(num_labels),
        )
    raise ValueError(f"unknown model family {family!r}")


def model_family(w) -> str:
    names = set(w)
    if names == {"W", "b"}:
        return "logreg"
    if names == {"W1", "b1", "W2", "b2"}:
        return "mlp"
    raise ShapeMismatch(f"weights {sorted(names)} match no model family")


def check_shapes(w, num_features: int, num_labels: int) -> str:
    family = model_family(w)
    if family == "logreg":
        ok = w["W"].shape == (num_labels, num_features) and w["b"].shape == (num_labels,)
    else:
        h = w["W1"].shape[0]
        ok = (w["W1"].shape == (h, num_features) and w["b1"].shape == (h,)
              and w["W2"].shape == (num_labels, h) and w["b2"].shape == (num_labels,))
    if not ok:
        raise ShapeMismatch(f"{family} weights {dict((k, v.shape) for k, v in w.items())} "
                            f"do not fit d={num_features}, l={num_labels}")
    return family


def _forward(p: dict, X: np.ndarray):
    if "W" in p:
        return X @ p["W"].T + p["b"], None
    a = X @ p["W1"].T + p["b1"]
    h = np.maximum(a, 0.0)
    return h @ p["W2"].T + p["b2"], (a, h)


def _loss_dz(z: np.ndarray, y: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    n = len(y)
    onehot = np.zeros_like(z)
    onehot[np.arange(n), y] = 1.0
    if loss == "crossentropy":
        zs = z - z.max(axis=1, keepdims=True)
        logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
        value = -logp[np.arange(n), y].mean()
        return float(value), (np.exp(logp) - onehot) / n
    diff = z - onehot
    return float(0.5 * (diff ** 2).sum(axis=1).mean()), diff / n


def loss_and_grad(params: dict, X: np.ndarray, y: np.ndarray, loss: str = "crossentropy"):
    """Mean loss over the batch and its gradient w.r.t. every tensor."""
    z, cache = _forward(params, X)
    value, dz = _loss_dz(z, y, loss)
    if cache is None:
        return value, {"W": dz.T @ X, "b": dz.sum(axis=0)}
    a, h = cache
    dh = dz @ params["W2"]
    dh[a <= 0] = 0.0
    return value, {"W2": dz.T @ h, "b2": dz.sum(axis=0), "W1": dh.T @ X, "b1": dh.sum(axis=0)}


def loss_value(params: dict, X: np.ndarray, y: np.ndarray, loss: str = "crossentropy") -> float:
    z, _ = _forward(params, X)
    return _loss_dz(z, y, loss)[0]


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t)
            vh = self.v[k] / (1 - self.b2 ** self.t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def train_local(w, d: Dataset, h: Hyperparameters,
                step_hook: Callable[[int], None] | None = None) -> tuple[ModelWeights, dict]:
    """Run ``h.epochs`` of minibatch training starting from ``w``.

    ``step_hook(step)`` is called after every minibatch; the client agent
    uses it to emulate slower hardware.
    """
    check_shapes(w, d.num_features, d.num_labels)
    if len(d) == 0:
        raise ValueError("cannot train on an empty dataset")
    start = time.perf_counter()
    params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in w.items()}
    X = d.features.astype(np.float64)
    y = d.labels
    rng = np.random.default_rng(h.seed)
    adam = _Adam(params, h.learning_rate) if h.optimizer == "adam" else None
    step = 0
    epoch_loss = None
    for _ in range(h.epochs):
        order = rng.permutation(len(d)) if h.batch_size < len(d) else np.arange(len(d))
        total, seen = 0.0, 0
        for lo in range(0, len(d), h.batch_size):
            idx = order[lo:lo + h.batch_size]
            value, grads = loss_and_grad(params, X[idx], y[idx], h.loss)
            if adam is not None:
                adam.step(params, grads)
            else:
                for k, g in grads.items():
                    params[k] -= h.learning_rate * g
            total += value * len(idx)
            seen += len(idx)
            step += 1
            if step_hook is not None:
                step_hook(step)
        epoch_loss = total / seen
    out = ModelWeights(params)
    final = evaluate(out, d, h.loss)
    metrics = {
        "loss": float(epoch_loss) if epoch_loss is not None else final["loss"],
        "accuracy": final["accuracy"],
        "train_time_s": time.perf_counter() - start,
        "epochs": h.epochs,
        "steps": step,
        "num_samples": len(d),
    }
    return out, metrics


def evaluate(w, d: Dataset, loss: str = "crossentropy") -> dict:
    check_shapes(w, d.num_features, d.num_labels)
    if len(d) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in w.items()}
    z, _ = _forward(params, d.features.astype(np.float64))
    value, _ = _loss_dz(z, d.labels, loss)
    acc = float((z.argmax(axis=1) == d.labels).mean())
    return {"loss": value, "accuracy": acc, "num_samples": len(d)}
