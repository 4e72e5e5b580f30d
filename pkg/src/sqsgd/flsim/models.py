"""Small models over a flat parameter vector with hand-written gradients."""

from __future__ import annotations

import numpy as np


def _softmax_xent(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    n = len(y)
    loss = -log_probs[np.arange(n), y].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


class LogisticRegression:
    """Multinomial logistic regression; ``theta = [W.ravel(), b]`` with ``W`` of
    shape ``(features, classes)``."""

    def __init__(self, features: int, classes: int):
        self.features = features
        self.classes = classes
        self.dim = features * classes + classes

    def _unpack(self, theta):
        f, c = self.features, self.classes
        return theta[: f * c].reshape(f, c), theta[f * c :]

    def init(self, rng: np.random.Generator) -> np.ndarray:
        bound = 1.0 / np.sqrt(self.features)
        return rng.uniform(-bound, bound, self.dim)

    def logits(self, theta, x):
        W, b = self._unpack(theta)
        return x @ W + b

    def loss_grad(self, theta, x, y):
        loss, dlogits = _softmax_xent(self.logits(theta, x), y)
        gW = x.T @ dlogits
        gb = dlogits.sum(axis=0)
        return loss, np.concatenate([gW.ravel(), gb])

    def loss(self, theta, x, y):
        return self.loss_grad(theta, x, y)[0]

    def predict(self, theta, x):
        return self.logits(theta, x).argmax(axis=1)


class MLP:
    """One tanh hidden layer."""

    def __init__(self, features: int, hidden: int, classes: int):
        self.features = features
        self.hidden = hidden
        self.classes = classes
        self._sizes = [features * hidden, hidden, hidden * classes, classes]
        self.dim = sum(self._sizes)

    def _unpack(self, theta):
        f, h, c = self.features, self.hidden, self.classes
        parts = np.split(theta, np.cumsum(self._sizes)[:-1])
        return parts[0].reshape(f, h), parts[1], parts[2].reshape(h, c), parts[3]

    def init(self, rng: np.random.Generator) -> np.ndarray:
        b1 = 1.0 / np.sqrt(self.features)
        b2 = 1.0 / np.sqrt(self.hidden)
        n1 = self._sizes[0] + self._sizes[1]
        return np.concatenate([rng.uniform(-b1, b1, n1), rng.uniform(-b2, b2, self.dim - n1)])

    def _forward(self, theta, x):
        W1, b1, W2, b2 = self._unpack(theta)
        h = np.tanh(x @ W1 + b1)
        return h, h @ W2 + b2

    def logits(self, theta, x):
        return self._forward(theta, x)[1]

    def loss_grad(self, theta, x, y):
        W1, b1, W2, b2 = self._unpack(theta)
        h, logits = self._forward(theta, x)
        loss, dlogits = _softmax_xent(logits, y)
        gW2 = h.T @ dlogits
        gb2 = dlogits.sum(axis=0)
        dh = (dlogits @ W2.T) * (1.0 - h * h)
        gW1 = x.T @ dh
        gb1 = dh.sum(axis=0)
        return loss, np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def loss(self, theta, x, y):
        return self.loss_grad(theta, x, y)[0]

    def predict(self, theta, x):
        return self.logits(theta, x).argmax(axis=1)


def build_model(arch: str, features: int, classes: int, hidden: int = 64):
    if arch == "logreg":
        return LogisticRegression(features, classes)
    if arch == "mlp":
        return MLP(features, hidden, classes)
    raise ValueError(f"unknown architecture {arch!r}")


def accuracy(model, theta, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(model.predict(theta, x) == y))
