"""Ensemble-based sample difficulty and gradient-norm scores.

Difficulty ``chi`` is the fraction of ensemble members that misclassify a
sample; the gradient-norm score is the member-averaged norm of the
per-sample loss gradient.  For the softmax-linear model the per-sample
gradient is ``(p - y) x^T`` and its norm is ``|p - y| |x|``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .toymodel import ClassSet, ToyModel, grad_W, per_sample_grad_norms, per_sample_losses

log = logging.getLogger(__name__)


@dataclass
class Ensemble:
    models: list[np.ndarray]
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.models:
            raise ValueError("ensemble is empty")
        shapes = {np.shape(m) for m in self.models}
        if len(shapes) != 1:
            raise ValueError(f"ensemble members disagree in shape: {sorted(shapes)}")

    @property
    def count(self) -> int:
        return len(self.models)


def build_ensemble(data: ClassSet, members: int = 20, epochs: int = 3, subset: float = 0.5,
                   lr: float = 0.1, batch: int = 32, seed=None) -> Ensemble:
    """Train ``members`` toy models, each from its own seed on a random half of the data."""
    if members < 1:
        raise ValueError("members must be >= 1")
    root = np.random.SeedSequence(seed)
    models, prov = [], []
    for k, child in enumerate(root.spawn(members)):
        rng = np.random.default_rng(child)
        idx = rng.choice(data.n, max(1, int(round(subset * data.n))), replace=False)
        W = ToyModel.init(data.C, data.d, rng).weight_matrix
        for _ in range(epochs):
            order = rng.permutation(idx)
            for s in range(0, order.size, batch):
                b = order[s:s + batch]
                W = W - lr * grad_W(W, data.features[b], data.labels[b])
        models.append(W)
        prov.append({"member": k, "entropy": int(root.entropy) if k == 0 else None,
                     "spawn_key": list(child.spawn_key), "epochs": epochs, "subset": subset,
                     "lr": lr, "batch": batch})
    return Ensemble(models, prov)


def _as_batch(sample):
    x, y = sample
    X = np.atleast_2d(np.asarray(x, dtype=float))
    return X, np.atleast_1d(np.asarray(y, dtype=int))


def sample_difficulty(sample, ensemble: Ensemble) -> float:
    """Fraction of members that misclassify ``sample = (x, y)``."""
    X, y = _as_batch(sample)
    return float(difficulty_scores(X, y, ensemble)[0])


def difficulty_scores(X: np.ndarray, y: np.ndarray, ensemble: Ensemble) -> np.ndarray:
    wrong = np.zeros(X.shape[0])
    for W in ensemble.models:
        wrong += np.argmax(X @ np.asarray(W).T, axis=1) != y
    return wrong / ensemble.count


def gradn_score(sample, ensemble: Ensemble) -> float:
    X, y = _as_batch(sample)
    return float(gradn_scores(X, y, ensemble)[0])


def gradn_scores(X: np.ndarray, y: np.ndarray, ensemble: Ensemble) -> np.ndarray:
    return np.mean([per_sample_grad_norms(W, X, y) for W in ensemble.models], axis=0)


def mean_losses(X: np.ndarray, y: np.ndarray, ensemble: Ensemble) -> np.ndarray:
    return np.mean([per_sample_losses(W, X, y) for W in ensemble.models], axis=0)


@dataclass
class Correlation:
    pearson: float | None
    spearman: float | None
    defined: bool
    reason: str = ""


@dataclass
class DifficultyReport:
    chi: np.ndarray
    gradn: np.ndarray
    mean_loss: np.ndarray
    chi_vs_gradn: Correlation
    chi_vs_loss: Correlation

    COLUMNS = ("index", "chi", "gradn", "mean_loss")

    def rows(self):
        return [(i, float(c), float(g), float(m))
                for i, (c, g, m) in enumerate(zip(self.chi, self.gradn, self.mean_loss))]

    def summary(self) -> dict:
        return {"chi_vs_gradn": vars(self.chi_vs_gradn), "chi_vs_loss": vars(self.chi_vs_loss),
                "n": int(self.chi.size)}


def correlate(a: np.ndarray, b: np.ndarray) -> Correlation:
    """Pearson and Spearman coefficients, flagged undefined for constant input."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 3:
        return Correlation(None, None, False, "fewer than 3 samples")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return Correlation(None, None, False, "constant score vector")
    return Correlation(float(stats.pearsonr(a, b)[0]), float(stats.spearmanr(a, b)[0]), True)


def correlation_report(data: ClassSet, ensemble: Ensemble) -> DifficultyReport:
    X, y = data.features, data.labels
    chi = difficulty_scores(X, y, ensemble)
    gradn = gradn_scores(X, y, ensemble)
    loss = mean_losses(X, y, ensemble)
    return DifficultyReport(chi, gradn, loss, correlate(chi, gradn), correlate(chi, loss))


def ema_smooth(series, decay: float) -> list[float]:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    if len(series) == 0:
        raise ValueError("series is empty")
    out = [float(series[0])]
    for v in series[1:]:
        out.append(decay * out[-1] + (1.0 - decay) * float(v))
    return out
