"""Synthetic federated learning tasks: linear and logistic regression."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("linear-regression", "logistic-regression")


@dataclass
class Task:
    """Per-client datasets plus loss, gradient and evaluation.

    Attributes:
        kind: "linear-regression" (squared loss, metric = validation MSE) or
            "logistic-regression" (log loss, labels in {0, 1}, metric =
            validation accuracy).
        features: one (m_c, d) array per client.
        labels: one length-m_c array per client.
        val_features: held-out features.
        val_labels: held-out labels.
        l2: ridge penalty added to the loss.
    """

    kind: str
    features: list[np.ndarray]
    labels: list[np.ndarray]
    val_features: np.ndarray
    val_labels: np.ndarray
    l2: float = 0.0
    _train_x: np.ndarray = field(init=False, repr=False)
    _train_y: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if not self.features or len(self.features) != len(self.labels):
            raise ValueError("need one label array per client feature array")
        d = self.features[0].shape[1]
        for X, y in zip(self.features, self.labels):
            if X.ndim != 2 or X.shape[1] != d or y.shape != (X.shape[0],) or X.shape[0] == 0:
                raise ValueError("inconsistent client dataset shapes")
        if self.val_features.shape[1] != d or self.val_labels.shape != (self.val_features.shape[0],):
            raise ValueError("inconsistent validation set shapes")
        self._train_x = np.concatenate(self.features)
        self._train_y = np.concatenate(self.labels)

    @property
    def d(self) -> int:
        return self.features[0].shape[1]

    @property
    def num_clients(self) -> int:
        return len(self.features)

    @property
    def metric_name(self) -> str:
        return "accuracy" if self.kind == "logistic-regression" else "mse"

    def loss(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        margin = X @ w
        if self.kind == "linear-regression":
            value = 0.5 * np.mean((margin - y) ** 2)
        else:
            # log(1 + exp(-s * margin)) with s = +-1, computed stably
            value = np.mean(np.logaddexp(0.0, -(2.0 * y - 1.0) * margin))
        return float(value + 0.5 * self.l2 * (w @ w))

    def grad(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        margin = X @ w
        if self.kind == "linear-regression":
            resid = margin - y
        else:
            resid = _sigmoid(margin) - y
        return X.T @ resid / X.shape[0] + self.l2 * w

    def train_loss(self, w: np.ndarray) -> float:
        return self.loss(w, self._train_x, self._train_y)

    def val_metric(self, w: np.ndarray) -> float:
        margin = self.val_features @ w
        if self.kind == "linear-regression":
            return float(np.mean((margin - self.val_labels) ** 2))
        return float(np.mean((margin > 0) == (self.val_labels > 0.5)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _split(X: np.ndarray, y: np.ndarray, num_clients: int, per_client: int):
    return (
        [X[c * per_client:(c + 1) * per_client] for c in range(num_clients)],
        [y[c * per_client:(c + 1) * per_client] for c in range(num_clients)],
    )


def make_logistic_task(d: int = 200, num_clients: int = 500, samples_per_client: int = 20,
                       sparsity: int = 20, signal: float = 4.0, label_flip: float = 0.05,
                       val_size: int = 2000, seed: int = 0) -> Task:
    """Sparse logistic regression with Gaussian features.

    The true weight vector has ``sparsity`` nonzeros and norm ``signal``;
    a ``label_flip`` fraction of labels is flipped at random.
    """
    if not 1 <= sparsity <= d:
        raise ValueError("sparsity must lie in [1, d]")
    rng = np.random.default_rng(seed)
    w_true = np.zeros(d)
    support = rng.choice(d, size=sparsity, replace=False)
    w_true[support] = rng.normal(size=sparsity)
    w_true *= signal / np.linalg.norm(w_true)

    def draw(m):
        X = rng.normal(size=(m, d)) / np.sqrt(sparsity)
        y = (X @ w_true > 0).astype(np.float64)
        flip = rng.random(m) < label_flip
        y[flip] = 1.0 - y[flip]
        return X, y

    X, y = draw(num_clients * samples_per_client)
    Xv, yv = draw(val_size)
    feats, labs = _split(X, y, num_clients, samples_per_client)
    return Task("logistic-regression", feats, labs, Xv, yv)


def make_linear_task(d: int = 50, num_clients: int = 200, samples_per_client: int = 20,
                     noise: float = 0.1, val_size: int = 1000, seed: int = 0) -> Task:
    """Linear regression; ``noise`` sets the floor that client update norms decay to."""
    rng = np.random.default_rng(seed)
    w_true = rng.normal(size=d) / np.sqrt(d)

    def draw(m):
        X = rng.normal(size=(m, d))
        return X, X @ w_true + noise * rng.normal(size=m)

    X, y = draw(num_clients * samples_per_client)
    Xv, yv = draw(val_size)
    feats, labs = _split(X, y, num_clients, samples_per_client)
    return Task("linear-regression", feats, labs, Xv, yv)


def save_task(task: Task, path: str | Path):
    """Write a task to an ``.npz`` file readable by ``load_task``."""
    arrays = {"kind": np.array(task.kind), "l2": np.array(task.l2),
              "val_x": task.val_features, "val_y": task.val_labels}
    for c, (X, y) in enumerate(zip(task.features, task.labels)):
        arrays[f"x_{c}"] = X
        arrays[f"y_{c}"] = y
    np.savez(path, **arrays)


def load_task(path: str | Path) -> Task:
    """Read a task file with keys kind, val_x, val_y and x_<c>, y_<c> per client."""
    with np.load(path, allow_pickle=False) as data:
        count = sum(1 for key in data.files if key.startswith("x_"))
        feats = [np.asarray(data[f"x_{c}"], dtype=np.float64) for c in range(count)]
        labs = [np.asarray(data[f"y_{c}"], dtype=np.float64) for c in range(count)]
        l2 = float(data["l2"]) if "l2" in data.files else 0.0
        return Task(str(data["kind"]), feats, labs,
                    np.asarray(data["val_x"], dtype=np.float64), np.asarray(data["val_y"], dtype=np.float64), l2)
