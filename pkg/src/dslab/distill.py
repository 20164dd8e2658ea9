"""Gradient matching and trajectory matching with gradient-norm regularization.

Synthetic features are learned so that a toy classifier trained on them
behaves like one trained on real data.  The difficulty correction adds
``lam * |grad_W L_syn|^p`` to the matching loss, which pulls the synthetic
set toward samples whose training gradient is small (easy samples).

All derivatives with respect to the synthetic features are exact: the
matching losses depend on the features through the model gradient ``G``,
and the vector-Jacobian products of ``G`` are closed form (see
:mod:`dslab.toymodel`).  Trajectory matching differentiates through the
unrolled student steps in reverse mode.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

import numpy as np

from .toymodel import (
    ClassSet,
    ToyModel,
    _weights,
    accuracy,
    grad_vjp_inputs,
    grad_vjp_weights,
    grad_W,
    loss_and_grad,
    per_sample_grad_norms,
    train_gd,
)

log = logging.getLogger(__name__)

Metric = Literal["cosine-groupwise", "l2"]


class DistillError(RuntimeError):
    pass


# ---------------------------------------------------------------- datasets

def blobs(n_per_class: int, d: int = 16, separation: float = 1.5, seed=None) -> ClassSet:
    """Two isotropic Gaussian blobs centred at ``+-separation/2`` on the first axis."""
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(2), n_per_class)
    X = rng.standard_normal((2 * n_per_class, d))
    X[:, 0] += np.where(y == 0, -0.5, 0.5) * separation
    return ClassSet(X, y, 2)


def xor_blobs(n_per_class: int, d: int = 16, separation: float = 2.0, seed=None) -> ClassSet:
    """Four blobs centred on the corners ``(+-s, +-s)`` of the first two axes."""
    rng = np.random.default_rng(seed)
    corners = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=float) * separation / 2
    y = np.repeat(np.arange(4), n_per_class)
    X = rng.standard_normal((4 * n_per_class, d))
    X[:, :2] += corners[y]
    return ClassSet(X, y, 4)


DATASETS = {"blobs": blobs, "xor": xor_blobs}


def make_dataset(name: str, n_per_class: int, d: int = 16, seed=None) -> ClassSet:
    try:
        return DATASETS[name](n_per_class, d, seed=seed)
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}") from None


# ------------------------------------------------------------ data classes

@dataclass
class SyntheticSet:
    features: np.ndarray  # (C, ipc, d)

    @property
    def C(self) -> int:
        return self.features.shape[0]

    @property
    def ipc(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    def flat(self) -> ClassSet:
        return ClassSet(self.features.reshape(-1, self.d), np.repeat(np.arange(self.C), self.ipc), self.C)

    def copy(self) -> "SyntheticSet":
        return SyntheticSet(self.features.copy())

    def to_json(self, header: dict | None = None) -> str:
        return json.dumps({"manifest": header or {}, "ipc": self.ipc, "d": self.d,
                           "classes": self.features.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSet":
        obj = json.loads(text)
        return cls(np.asarray(obj["classes"], dtype=float))


def init_synthetic(real: ClassSet, ipc: int, rng: np.random.Generator, mode: str = "real") -> SyntheticSet:
    feats = np.empty((real.C, ipc, real.d))
    for c in range(real.C):
        if mode == "real":
            feats[c] = real.features[rng.choice(real.of_class(c), ipc, replace=False)]
        elif mode == "noise":
            feats[c] = rng.standard_normal((ipc, real.d))
        else:
            raise ValueError(f"unknown synthetic init {mode!r}")
    return SyntheticSet(feats)


@dataclass
class MatchConfig:
    lambda_0: float = 0.002
    lambda_schedule: Literal["constant", "logarithmic"] = "constant"
    lambda_end: float = 0.08
    total_steps: int = 10000
    reg_exponent: int = 2
    distance_metric: Metric = "cosine-groupwise"
    iterations: int = 200
    T: int = 10
    M: int = 4
    N: int = 3
    model_steps: int = 1
    eta_model: float = 0.5
    eta_syn: float = 0.1
    batch_real: int = 64
    batch_syn: int = 10
    ipc: int = 1
    tau: float | None = None
    syn_init: Literal["real", "noise"] = "real"
    tm_reg_average: bool = False
    max_start: int | None = None
    eval_every: int = 10
    eval_steps: int = 300
    eval_lr: float = 0.5
    sdc: bool = True

    def __post_init__(self):
        if self.lambda_0 < 0:
            raise ValueError("lambda_0 must be nonnegative")
        if self.reg_exponent not in (1, 2):
            raise ValueError("reg_exponent must be 1 or 2")
        if self.distance_metric not in ("cosine-groupwise", "l2"):
            raise ValueError(f"unknown distance metric {self.distance_metric!r}")
        if self.lambda_schedule not in ("constant", "logarithmic"):
            raise ValueError(f"unknown lambda schedule {self.lambda_schedule!r}")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        for name in ("iterations", "T", "M", "ipc", "batch_real", "batch_syn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.N < 0:
            raise ValueError("N must be >= 0")


def baseline(config: MatchConfig) -> MatchConfig:
    """The same run with the difficulty correction switched off."""
    return replace(config, lambda_0=0.0, lambda_schedule="constant", sdc=False)


@dataclass
class TrajectoryBank:
    checkpoints: list[np.ndarray]
    epochs_per_checkpoint: int
    config_echo: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.checkpoints)


@dataclass
class DistillTrace:
    steps: list[int] = field(default_factory=list)
    lam: list[float] = field(default_factory=list)
    matching_loss: list[float] = field(default_factory=list)
    reg_value: list[float] = field(default_factory=list)
    grad_norm_syn: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    ema_grad_norm: list[float] = field(default_factory=list)

    COLUMNS = ("step", "lambda", "matching_loss", "reg_value", "grad_norm_syn", "test_accuracy")

    def append(self, step, lam, matching, reg, gnorm, acc):
        self.steps.append(step)
        self.lam.append(lam)
        self.matching_loss.append(matching)
        self.reg_value.append(reg)
        self.grad_norm_syn.append(gnorm)
        self.test_accuracy.append(acc)

    def rows(self):
        return list(zip(self.steps, self.lam, self.matching_loss, self.reg_value,
                        self.grad_norm_syn, self.test_accuracy))

    def final_half_grad_norm(self) -> float:
        g = self.grad_norm_syn
        return float(np.mean(g[len(g) // 2:]))


# ------------------------------------------------------------------ losses

def matching_distance(grad_a: np.ndarray, grad_b: np.ndarray, metric: Metric = "cosine-groupwise",
                      *, return_grad: bool = False, diagnostics: dict | None = None):
    """Distance between two model gradients.

    ``cosine-groupwise`` sums ``1 - cos`` over class rows; a zero row counts
    as maximal mismatch 1 and is reported in ``diagnostics['zero_rows']``.
    With ``return_grad`` the derivative with respect to ``grad_b`` is
    returned as well.
    """
    a = np.asarray(grad_a, dtype=float)
    b = np.asarray(grad_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if metric == "l2":
        diff = b - a
        dist = float(np.linalg.norm(diff))
        g = diff / dist if dist > 0 else np.zeros_like(b)
        return (dist, g) if return_grad else dist
    if metric != "cosine-groupwise":
        raise ValueError(f"unknown distance metric {metric!r}")

    a2 = a.reshape(a.shape[0], -1)
    b2 = b.reshape(b.shape[0], -1)
    na = np.linalg.norm(a2, axis=1)
    nb = np.linalg.norm(b2, axis=1)
    ok = (na > 0) & (nb > 0)
    if diagnostics is not None and not ok.all():
        diagnostics["zero_rows"] = np.flatnonzero(~ok).tolist()
    dots = np.sum(a2 * b2, axis=1)
    cos = np.where(ok, dots / np.where(ok, na * nb, 1.0), 0.0)
    dist = float(np.sum(1.0 - cos))
    if not return_grad:
        return dist
    safe_a = np.where(ok, na, 1.0)[:, None]
    safe_b = np.where(ok, nb, 1.0)[:, None]
    g = -(a2 / (safe_a * safe_b) - cos[:, None] * b2 / safe_b**2)
    g[~ok] = 0.0
    return dist, g.reshape(b.shape)


def _norm_power(G: np.ndarray, p: int) -> tuple[float, np.ndarray]:
    """``|G|^p`` and its gradient (zero subgradient at ``G = 0`` for ``p = 1``)."""
    nrm = float(np.linalg.norm(G))
    if p == 2:
        return nrm * nrm, 2.0 * G
    return nrm, (G / nrm if nrm > 0 else np.zeros_like(G))


def gm_sdc_loss(model, real_X: np.ndarray, real_y: np.ndarray, syn_X: np.ndarray, syn_y: np.ndarray,
                lam: float, reg_exponent: int = 2, metric: Metric = "cosine-groupwise"):
    """Gradient-matching loss with the norm penalty, and its gradient in ``syn_X``.

    Returns ``(loss, grad, parts)`` where ``parts`` holds the matching and
    regularizer values separately.  With ``lam == 0`` the penalty is not
    evaluated, so the result equals the bare matching path bit for bit.
    """
    W = _weights(model)
    g_real = grad_W(W, real_X, real_y)
    g_syn = grad_W(W, syn_X, syn_y)
    dist, U = matching_distance(g_real, g_syn, metric, return_grad=True)
    reg = 0.0
    if lam != 0.0:
        reg, dreg = _norm_power(g_syn, reg_exponent)
        U = U + lam * dreg
    grad = grad_vjp_inputs(W, syn_X, syn_y, U)
    return dist + lam * reg, grad, {"matching": dist, "reg": reg}


def gm_filtered_loss(model, real_X: np.ndarray, real_y: np.ndarray, syn_X: np.ndarray, syn_y: np.ndarray,
                     tau: float, metric: Metric = "cosine-groupwise", seed=None, *, return_grad: bool = False):
    """Matching distance after dropping real samples with gradient norm above ``tau``.

    The synthetic pool is subsampled in proportion to the surviving fraction
    of the real batch, so ``tau = inf`` reproduces the unfiltered distance.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    W = _weights(model)
    keep = per_sample_grad_norms(W, real_X, real_y) <= tau
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise DistillError(f"no real sample has gradient norm <= tau={tau}; increase tau")
    n_pool = syn_X.shape[0]
    k = math.ceil(n_pool * n_keep / real_X.shape[0])
    if k >= n_pool:
        sidx = np.arange(n_pool)
    else:
        sidx = np.sort(np.random.default_rng(seed).choice(n_pool, k, replace=False))
    g_real = grad_W(W, real_X[keep], real_y[keep])
    g_syn = grad_W(W, syn_X[sidx], syn_y[sidx])
    if not return_grad:
        return matching_distance(g_real, g_syn, metric)
    dist, U = matching_distance(g_real, g_syn, metric, return_grad=True)
    grad = np.zeros_like(syn_X)
    grad[sidx] = grad_vjp_inputs(W, syn_X[sidx], syn_y[sidx], U)
    return dist, grad


def lambda_at(config: MatchConfig, step: int) -> float:
    """Penalty weight at a given synthetic-update step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if not config.sdc:
        return 0.0
    if config.lambda_schedule == "constant":
        return config.lambda_0
    lo, hi = config.lambda_0, config.lambda_end
    if lo <= 0 or hi <= 0:
        raise ValueError("logarithmic schedule needs positive lambda_0 and lambda_end")
    if step >= config.total_steps:
        return hi
    if step == 0:
        return lo
    frac = step / config.total_steps
    return math.exp(math.log(lo) + frac * (math.log(hi) - math.log(lo)))


def tm_sdc_loss(bank: TrajectoryBank, t: int, syn: SyntheticSet, config: MatchConfig,
                lam: float | None = None, batches: list[np.ndarray] | None = None):
    """Trajectory-matching loss with the norm penalty, and its gradient in the features.

    The student starts at checkpoint ``t`` and takes ``N`` gradient steps on
    the synthetic set (on ``batches[i]`` if given).  The penalty is the
    synthetic-set gradient norm at the final student, or its mean along the
    inner trajectory when ``config.tm_reg_average`` is set.
    """
    M, N, eta = config.M, config.N, config.eta_model
    lam = lambda_at(config, 0) if lam is None else lam
    if t < 0 or t + M >= len(bank):
        raise DistillError(f"start {t} + M={M} is outside a bank of {len(bank)} checkpoints")
    start = bank.checkpoints[t]
    target = bank.checkpoints[t + M]
    denom = float(np.sum((target - start) ** 2))
    if denom == 0.0:
        raise DistillError(f"expert did not move between checkpoints {t} and {t + M}")

    flat = syn.flat()
    X, y = flat.features, flat.labels
    idx = [np.arange(X.shape[0]) if batches is None else np.asarray(batches[i]) for i in range(N)]

    Ws = [start.copy()]
    for i in range(N):
        Ws.append(Ws[-1] - eta * grad_W(Ws[-1], X[idx[i]], y[idx[i]]))

    diff = Ws[-1] - target
    matching = float(np.sum(diff**2)) / denom
    A = 2.0 * diff / denom  # adjoint of W_N
    gX = np.zeros_like(X)

    reg = 0.0
    gnorm_final = float(np.linalg.norm(grad_W(Ws[-1], X, y)))
    reg_points = range(N + 1) if config.tm_reg_average else [N]
    reg_adj = {}
    if lam != 0.0:
        w = 1.0 / len(reg_points)
        for j in reg_points:
            G = grad_W(Ws[j], X, y)
            val, dval = _norm_power(G, config.reg_exponent)
            reg += w * val
            U = lam * w * dval
            gX += grad_vjp_inputs(Ws[j], X, y, U)
            reg_adj[j] = grad_vjp_weights(Ws[j], X, y, U)
        A = A + reg_adj.get(N, 0.0)

    for i in range(N - 1, -1, -1):
        b = idx[i]
        gb = grad_vjp_inputs(Ws[i], X[b], y[b], A)
        np.add.at(gX, b, -eta * gb)
        A = A - eta * grad_vjp_weights(Ws[i], X[b], y[b], A)
        if i in reg_adj:
            A = A + reg_adj[i]

    parts = {"matching": matching, "reg": reg, "grad_norm_final": gnorm_final}
    return matching + lam * reg, gX.reshape(syn.features.shape), parts


# ------------------------------------------------------------- algorithms

def _fresh_accuracy(syn: SyntheticSet, test: ClassSet | None, config: MatchConfig) -> float:
    if test is None:
        return float("nan")
    return accuracy(train_gd(syn.flat(), config.eval_steps, config.eval_lr), test)


def evaluate_synthetic(syn: SyntheticSet, test: ClassSet, config: MatchConfig) -> float:
    """Test accuracy of a model trained from zero weights on the synthetic set."""
    return _fresh_accuracy(syn, test, config)


def _finish_trace(trace: DistillTrace, decay: float = 0.9) -> DistillTrace:
    from .difficulty import ema_smooth

    if trace.grad_norm_syn:
        trace.ema_grad_norm = ema_smooth(trace.grad_norm_syn, decay)
    return trace


def distill_gm(real: ClassSet, config: MatchConfig, seed=None, test: ClassSet | None = None):
    """Per-class gradient matching with the norm penalty.

    Each iteration re-initialises the model, then for ``T`` outer steps
    matches per-class gradients, updates the synthetic features and takes
    ``model_steps`` steps of the model on the synthetic set.  The trace has
    one row per synthetic update.
    """
    rng = np.random.default_rng(seed)
    for c in range(real.C):
        if real.of_class(c).size < config.batch_real:
            raise DistillError(f"class {c} has fewer than batch_real={config.batch_real} samples")
    syn = init_synthetic(real, config.ipc, rng, config.syn_init)
    trace = DistillTrace()
    class_idx = [real.of_class(c) for c in range(real.C)]
    y_slot = [np.full(config.ipc, c) for c in range(real.C)]
    step = 0
    for it in range(config.iterations):
        W = ToyModel.init(real.C, real.d, rng).weight_matrix
        for _ in range(config.T):
            lam = lambda_at(config, step)
            grad = np.zeros_like(syn.features)
            matching = 0.0
            flat = syn.flat()
            gnorm = float(np.linalg.norm(grad_W(W, flat.features, flat.labels)))
            for c in range(real.C):
                ridx = rng.choice(class_idx[c], config.batch_real, replace=False)
                slots = np.arange(config.ipc)
                if config.batch_syn < config.ipc:
                    slots = np.sort(rng.choice(config.ipc, config.batch_syn, replace=False))
                Xs = syn.features[c, slots]
                try:
                    if config.tau is not None:
                        d_c, g = gm_filtered_loss(W, real.features[ridx], real.labels[ridx], Xs,
                                                  y_slot[c][slots], config.tau, config.distance_metric,
                                                  rng, return_grad=True)
                    else:
                        _, g, parts = gm_sdc_loss(W, real.features[ridx], real.labels[ridx], Xs,
                                                  y_slot[c][slots], lam, config.reg_exponent,
                                                  config.distance_metric)
                        d_c = parts["matching"]
                except DistillError as exc:
                    raise DistillError(f"step {step}, class {c}: {exc}") from exc
                grad[c, slots] += g
                matching += d_c
            syn.features -= config.eta_syn * grad
            acc = float("nan")
            if config.eval_every and (step % config.eval_every == 0 or
                                      step == config.iterations * config.T - 1):
                acc = _fresh_accuracy(syn, test, config)
            trace.append(step, lam, matching, gnorm ** config.reg_exponent, gnorm, acc)
            flat = syn.flat()
            for _ in range(config.model_steps):
                W = W - config.eta_model * grad_W(W, flat.features, flat.labels)
            step += 1
    return syn, _finish_trace(trace)


def build_expert_bank(real: ClassSet, epochs_per_checkpoint: int, checkpoints: int, seed=None,
                      lr: float = 0.5, batch: int = 64) -> TrajectoryBank:
    """Train the toy model by minibatch SGD, keeping a snapshot every few epochs."""
    if epochs_per_checkpoint < 1 or checkpoints < 1:
        raise ValueError("epochs_per_checkpoint and checkpoints must be >= 1")
    rng = np.random.default_rng(seed)
    W = ToyModel.init(real.C, real.d, rng).weight_matrix
    snaps = [W.copy()]
    for _ in range(checkpoints):
        for _ in range(epochs_per_checkpoint):
            order = rng.permutation(real.n)
            for s in range(0, real.n, batch):
                b = order[s:s + batch]
                W = W - lr * grad_W(W, real.features[b], real.labels[b])
        snaps.append(W.copy())
    echo = {"epochs_per_checkpoint": epochs_per_checkpoint, "checkpoints": checkpoints,
            "lr": lr, "batch": batch, "seed": None if seed is None else int(seed)}
    return TrajectoryBank(snaps, epochs_per_checkpoint, echo)


def distill_tm(bank: TrajectoryBank, real: ClassSet, config: MatchConfig, seed=None,
               test: ClassSet | None = None):
    """Trajectory matching with the norm penalty.

    Each iteration picks a random start checkpoint, unrolls ``N`` student
    steps on synthetic minibatches and moves the features down the gradient
    of :func:`tm_sdc_loss`.  ``real`` only seeds the synthetic features.
    """
    if len(bank) <= config.M:
        raise DistillError(f"bank of {len(bank)} checkpoints is too short for M={config.M}")
    rng = np.random.default_rng(seed)
    syn = init_synthetic(real, config.ipc, rng, config.syn_init)
    n_syn = syn.C * syn.ipc
    max_start = len(bank) - config.M - 1
    if config.max_start is not None:
        max_start = min(max_start, config.max_start)
    trace = DistillTrace()
    for step in range(config.iterations):
        lam = lambda_at(config, step)
        t = int(rng.integers(0, max_start + 1))
        batches = None
        if config.batch_syn < n_syn:
            batches = [np.sort(rng.choice(n_syn, config.batch_syn, replace=False)) for _ in range(config.N)]
        try:
            _, g, parts = tm_sdc_loss(bank, t, syn, config, lam, batches)
        except DistillError as exc:
            raise DistillError(f"step {step}: {exc}") from exc
        syn.features -= config.eta_syn * g
        acc = float("nan")
        if config.eval_every and (step % config.eval_every == 0 or step == config.iterations - 1):
            acc = _fresh_accuracy(syn, test, config)
        gnorm = parts["grad_norm_final"]
        trace.append(step, lam, parts["matching"], gnorm ** config.reg_exponent, gnorm, acc)
    return syn, _finish_trace(trace)


def tune_eta_syn(real: ClassSet, test: ClassSet, config: MatchConfig, mode: str = "gm", seed=0,
                 grid=(0.01, 0.1, 1.0), bank: TrajectoryBank | None = None) -> float:
    """Pick the synthetic learning rate on the baseline run by final test accuracy."""
    best, best_acc = grid[0], -1.0
    base = baseline(config)
    for eta in grid:
        cfg = replace(base, eta_syn=eta, eval_every=0)
        if mode == "gm":
            syn, _ = distill_gm(real, cfg, seed)
        else:
            syn, _ = distill_tm(bank, real, cfg, seed)
        acc = evaluate_synthetic(syn, test, cfg)
        log.debug("eta_syn=%g -> accuracy %.4f", eta, acc)
        if acc > best_acc:
            best, best_acc = eta, acc
    return best


def config_dict(config: MatchConfig) -> dict:
    return asdict(config)
