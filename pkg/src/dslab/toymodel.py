"""Softmax-linear classifier with exact first- and second-order derivatives.

The model is ``p = softmax(W x)`` with ``W`` of shape ``(C, d)`` and no bias.
For a batch ``X`` of shape ``(n, d)`` the mean cross-entropy gradient is

    G(W, X) = (P - Y)^T X / n.

Matching losses are functions of ``G``, so their derivatives with respect to
the inputs or the weights are vector-Jacobian products of ``G`` itself.
Those products are written out in closed form below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special


@dataclass
class ToyModel:
    weight_matrix: np.ndarray

    @property
    def C(self) -> int:
        return self.weight_matrix.shape[0]

    @property
    def d(self) -> int:
        return self.weight_matrix.shape[1]

    @classmethod
    def init(cls, C: int, d: int, rng: np.random.Generator, scale: float | None = None) -> "ToyModel":
        scale = 1.0 / np.sqrt(d) if scale is None else scale
        return cls(scale * rng.standard_normal((C, d)))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(X @ self.weight_matrix.T, axis=1)


@dataclass
class ClassSet:
    """Feature vectors with integer class labels ``0..C-1``."""

    features: np.ndarray
    labels: np.ndarray
    C: int

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def of_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def subset(self, idx) -> "ClassSet":
        return ClassSet(self.features[idx], self.labels[idx], self.C)


def _weights(model) -> np.ndarray:
    return model.weight_matrix if isinstance(model, ToyModel) else np.asarray(model)


def probabilities(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    return special.softmax(X @ W.T, axis=1)


def _onehot(y: np.ndarray, C: int) -> np.ndarray:
    out = np.zeros((y.shape[0], C))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def per_sample_losses(model, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    W = _weights(model)
    logp = special.log_softmax(X @ W.T, axis=1)
    return -logp[np.arange(X.shape[0]), y]


def loss_and_grad(model, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient in ``W``."""
    W = _weights(model)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    P = probabilities(W, X)
    E = P - _onehot(y, W.shape[0])
    loss = float(np.mean(per_sample_losses(W, X, y)))
    return loss, E.T @ X / X.shape[0]


def grad_W(W: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    E = probabilities(W, X) - _onehot(y, W.shape[0])
    return E.T @ X / X.shape[0]


def per_sample_grad_norms(model, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``|grad_W loss(x, y)|_F``.  The per-sample gradient is ``(p - y) x^T``,
    a rank one matrix, so its norm factorises."""
    W = _weights(model)
    E = probabilities(W, X) - _onehot(y, W.shape[0])
    return np.linalg.norm(E, axis=1) * np.linalg.norm(X, axis=1)


def _jvp_softmax(P: np.ndarray, V: np.ndarray) -> np.ndarray:
    # rows of (diag p - p p^T) v; the softmax Jacobian is symmetric
    return P * (V - np.sum(P * V, axis=1, keepdims=True))


def grad_vjp_inputs(W: np.ndarray, X: np.ndarray, y: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Gradient of ``<U, G(W, X)>`` with respect to ``X``."""
    P = probabilities(W, X)
    E = P - _onehot(y, W.shape[0])
    S = _jvp_softmax(P, X @ U.T)
    return (E @ U + S @ W) / X.shape[0]


def grad_vjp_weights(W: np.ndarray, X: np.ndarray, y: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Gradient of ``<U, G(W, X)>`` with respect to ``W``."""
    P = probabilities(W, X)
    S = _jvp_softmax(P, X @ U.T)
    return S.T @ X / X.shape[0]


def accuracy(model, data: ClassSet) -> float:
    W = _weights(model)
    return float(np.mean(np.argmax(data.features @ W.T, axis=1) == data.labels))


def train_gd(data: ClassSet, steps: int, lr: float, W0: np.ndarray | None = None) -> np.ndarray:
    """Full-batch gradient descent from ``W0`` (zeros by default)."""
    W = np.zeros((data.C, data.d)) if W0 is None else W0.copy()
    for _ in range(steps):
        W -= lr * grad_W(W, data.features, data.labels)
    return W
