"""Monte Carlo expert/student perceptron experiments.

One trial: draw an expert on the sphere of radius sqrt(d), label Gaussian
inputs with it, score every sample by its margin along a probe, keep a
fraction by margin rank, train a max-margin student on the kept samples and
read off the student/expert overlap.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np
from scipy import linalg, optimize

from . import kernels

log = logging.getLogger(__name__)

ProbeMode = Literal["conditioned-gaussian", "trained-epochs"]
SolverMethod = Literal["ipm", "dual-cd", "minover"]


class InfeasibleError(ValueError):
    """The labelled set is not linearly separable through the origin."""


class TrialError(RuntimeError):
    def __init__(self, message: str, trial: int, seed: int):
        super().__init__(f"trial {trial} (seed {seed}): {message}")
        self.trial = trial
        self.seed = seed


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class ExpertModel:
    weights: np.ndarray

    @property
    def d(self) -> int:
        return self.weights.shape[0]


@dataclass
class LabeledSet:
    inputs: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.inputs[idx], self.labels[idx])


@dataclass
class MarginProfile:
    margins: np.ndarray
    probe: np.ndarray
    source: LabeledSet | None = None
    selection: object | None = None
    kept_indices: np.ndarray | None = None


def sample_expert(d: int, seed=None) -> ExpertModel:
    """Uniform direction on the sphere of radius ``sqrt(d)``."""
    if d < 2:
        raise ValueError("dimension must be at least 2")
    v = _rng(seed).standard_normal(d)
    return ExpertModel(v * (math.sqrt(d) / np.linalg.norm(v)))


def generate_set(expert: ExpertModel, n: int, seed=None) -> LabeledSet:
    """``n`` standard Gaussian inputs labelled by the sign of the expert field."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = _rng(seed)
    X = rng.standard_normal((n, expert.d))
    h = X @ expert.weights
    ties = np.flatnonzero(h == 0.0)
    while ties.size:
        X[ties] = rng.standard_normal((ties.size, expert.d))
        h[ties] = X[ties] @ expert.weights
        ties = ties[h[ties] == 0.0]
    return LabeledSet(X, np.sign(h))


def make_probe(expert: ExpertModel, gamma_probe: float, seed=None) -> np.ndarray:
    """Gaussian vector conditioned on making angle ``gamma_probe`` with the expert."""
    if not 0.0 <= gamma_probe <= math.pi / 2 + 1e-15:
        raise ValueError("probe angle must lie in [0, pi/2]")
    d = expert.d
    u = expert.weights / np.linalg.norm(expert.weights)
    v = _rng(seed).standard_normal(d)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    p = math.cos(gamma_probe) * u + math.sin(gamma_probe) * v
    return p * (math.sqrt(d) / np.linalg.norm(p))


def angle_between(a: np.ndarray, b: np.ndarray) -> float:
    c = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.acos(max(-1.0, min(1.0, c)))


def train_probe(data: LabeledSet, epochs: int, seed=None) -> np.ndarray:
    """Rosenblatt perceptron from zero weights over a fixed shuffled order."""
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    order = _rng(seed).permutation(data.n).astype(np.intp)
    w = np.zeros(data.d)
    kernels.perceptron_epochs(np.ascontiguousarray(data.inputs, dtype=float),
                              np.ascontiguousarray(data.labels, dtype=float), w, order, int(epochs))
    return w


def compute_margins(probe: np.ndarray, data: LabeledSet) -> MarginProfile:
    probe = np.asarray(probe, dtype=float)
    if probe.shape != (data.d,):
        raise ValueError(f"probe has shape {probe.shape}, data dimension is {data.d}")
    return MarginProfile(data.labels * (data.inputs @ probe), probe, source=data)


def select_indices(margins: np.ndarray, f: float, kind: str, seed=None,
                   margin_mode: str = "signed") -> np.ndarray:
    """Indices of the ``round(f n)`` kept samples, ascending."""
    if not 0.0 < f <= 1.0:
        raise ValueError(f"fraction f must lie in (0, 1], got {f}")
    n = margins.shape[0]
    k = int(round(f * n))
    if k < 1:
        raise ValueError(f"round(f * n) = {k}: the selected set would be empty")
    score = np.abs(margins) if margin_mode == "absolute" else margins
    if kind == "keep-hardest":
        idx = np.argsort(score, kind="stable")[:k]
    elif kind == "keep-easiest":
        idx = np.argsort(-score, kind="stable")[:k]
    elif kind == "keep-random":
        idx = _rng(seed).choice(n, size=k, replace=False)
    else:
        raise ValueError(f"unknown strategy kind {kind!r}")
    return np.sort(idx)


def select_subset(profile: MarginProfile, f: float, kind: str, seed=None,
                  margin_mode: str = "signed") -> LabeledSet:
    if profile.source is None:
        raise ValueError("margin profile carries no source set")
    idx = select_indices(profile.margins, f, kind, seed, margin_mode)
    profile.kept_indices = idx
    profile.selection = (kind, margin_mode, f)
    return profile.source.subset(idx)


# --------------------------------------------------------------------------
# max-margin training
# --------------------------------------------------------------------------


def _active_set_polish(Z: np.ndarray, alpha: np.ndarray, rounds: int = 20):
    """Exact KKT point from a near-optimal dual iterate, or ``None``.

    On the support ``S`` the optimum satisfies ``Z_S w = 1`` with
    ``w = Z_S^T a``, ``a > 0`` and every other margin ``>= 1``.
    """
    S = np.flatnonzero(alpha > 0.0)
    ones = None
    for _ in range(rounds):
        if S.size == 0:
            return None
        ZS = Z[S]
        ones = np.ones(S.size)
        a, *_ = np.linalg.lstsq(ZS @ ZS.T, ones, rcond=None)
        if np.any(a <= 0.0):
            S = S[a > 0.0]
            continue
        w = ZS.T @ a
        m = Z @ w
        worst = int(np.argmin(m))
        if m[worst] >= 1.0 - 1e-11 and np.max(np.abs(m[S] - 1.0)) <= 1e-9:
            return w
        if m[worst] < 1.0 - 1e-11:
            S = np.union1d(S, [worst])
        else:
            return None
    return None


def _check_separable(Z: np.ndarray) -> None:
    n, d = Z.shape
    res = optimize.linprog(np.zeros(d), A_ub=-Z, b_ub=-np.ones(n),
                           bounds=[(None, None)] * d, method="highs")
    if res.status == 2:
        raise InfeasibleError("data are not linearly separable through the origin")


def _interior_point(Z: np.ndarray, tol: float = 1e-8, max_iter: int = 100):
    """Mehrotra predictor-corrector for ``min |w|^2 / 2  s.t.  Z w >= 1``.

    Each iteration solves the ``d x d`` normal system ``(I + Z^T D Z)``.
    Returns ``(w, multipliers)``; accuracy is only ``tol``, the caller
    polishes on the identified support.
    """
    n, d = Z.shape
    w = np.zeros(d)
    s = np.ones(n)
    lam = np.ones(n)
    with np.errstate(all="ignore"):
        return _ipm_loop(Z, w, s, lam, tol, max_iter)


def _ipm_loop(Z, w, s, lam, tol, max_iter):
    n, d = Z.shape

    def max_step(x, dx):
        neg = dx < 0.0
        return min(1.0, float(np.min(-x[neg] / dx[neg]))) if neg.any() else 1.0

    for _ in range(max_iter):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(lam)) and np.all(s > 0)):
            break
        rd = w - Z.T @ lam
        rp = Z @ w - s - 1.0
        mu = float(lam @ s) / n
        if max(np.abs(rd).max(), np.abs(rp).max()) < tol and mu < tol:
            break
        D = lam / s
        try:
            chol = linalg.cho_factor(np.eye(d) + (Z.T * D) @ Z)
        except (np.linalg.LinAlgError, ValueError):
            break

        def newton(rc):
            dw = linalg.cho_solve(chol, -rd + Z.T @ (-D * rp - rc / s), check_finite=False)
            dl = D * (-rp - Z @ dw) - rc / s
            ds = -(rc + s * dl) / lam
            return dw, ds, dl

        dw, ds, dl = newton(lam * s)
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(dl))):
            break
        mu_aff = float((s + max_step(s, ds) * ds) @ (lam + max_step(lam, dl) * dl)) / n
        sigma = (mu_aff / mu) ** 3
        dw, ds, dl = newton(lam * s + ds * dl - sigma * mu)
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(dl)) and np.all(np.isfinite(ds))):
            break
        a_p = 0.99 * max_step(s, ds)
        a_d = 0.99 * max_step(lam, dl)
        w += a_p * dw
        s += a_p * ds
        lam += a_d * dl
    return w, lam


def train_max_margin(data: LabeledSet, tol: float = 1e-10, method: SolverMethod = "ipm",
                     max_epochs: int = 200_000) -> tuple[np.ndarray, float]:
    """Unit-norm weights maximising ``min_i y_i w . x_i`` and that minimum.

    ``ipm`` (default) runs an interior-point method on the primal; ``dual-cd``
    runs cyclic coordinate descent on the dual.  Both finish with an exact
    solve on the identified support vectors, so the returned margin is exact
    to round-off.  ``minover`` runs the classical MinOver iteration and is
    only accurate to ``tol`` relative gain.
    """
    Z = np.ascontiguousarray(data.inputs * data.labels[:, None], dtype=float)
    n, d = Z.shape
    if method == "minover":
        w = np.zeros(d)
        kernels.minover(Z, w, max_epochs * 10, tol, 500)
        m = Z @ w
        if m.min() <= 0.0:
            _check_separable(Z)
        nrm = np.linalg.norm(w)
        return w / nrm, float(m.min() / nrm)
    if method not in ("ipm", "dual-cd"):
        raise ValueError(f"unknown max-margin method {method!r}")

    if method == "ipm":
        w, lam = _interior_point(Z)
        if np.all(np.isfinite(w)) and np.min(Z @ w) > 0.5:
            slack = Z @ w - 1.0
            # complementarity split first; a relative cut on the multipliers second
            for active in (lam > slack, lam > 1e-6 * lam.max()):
                exact = _active_set_polish(Z, np.where(active, lam, 0.0))
                if exact is not None:
                    return _finish(Z, exact, tol)
        _check_separable(Z)
        log.debug("interior point did not yield a clean support set; using dual CD")

    alpha = np.zeros(n)
    w = np.zeros(d)
    done = 0
    # a loose first stage usually pins the support set; the polish does the rest
    stage_tol = 1e-2
    while done < max_epochs:
        epochs, viol = kernels.dual_cd(Z, alpha, w, max_epochs - done, stage_tol)
        done += epochs
        exact = _active_set_polish(Z, alpha)
        if exact is not None:
            w = exact
            break
        if not np.all(np.isfinite(w)) or np.linalg.norm(w) > 1e12:
            _check_separable(Z)
            raise RuntimeError("dual coordinate descent diverged")
        if stage_tol <= 1e-14:
            break
        stage_tol = max(stage_tol * 1e-2, 1e-14)
    if exact is None:
        _check_separable(Z)
        raise RuntimeError(f"max-margin solver did not converge in {done} epochs")
    return _finish(Z, w, tol)


def _finish(Z: np.ndarray, w: np.ndarray, tol: float) -> tuple[np.ndarray, float]:
    nrm = float(np.linalg.norm(w))
    wu = w / nrm
    kappa = float(np.min(Z @ wu))
    # kappa is 1 / |w| at the optimum; the direct minimum agrees to round-off
    if abs(kappa - 1.0 / nrm) > max(tol, 1e-9) * max(1.0, kappa):
        raise RuntimeError("max-margin polish inconsistent")
    return wu, kappa


def measure_error(student: np.ndarray, expert: ExpertModel,
                  holdout: LabeledSet | None = None) -> tuple[float, float, float | None]:
    """``(R, arccos(R)/pi, holdout error rate or None)``."""
    student = np.asarray(student, dtype=float)
    if student.shape != expert.weights.shape:
        raise ValueError("student and expert dimensions differ")
    ns = np.linalg.norm(student)
    if ns == 0.0:
        raise ValueError("student has zero norm")
    R = float(student @ expert.weights) / (ns * np.linalg.norm(expert.weights))
    R = max(-1.0, min(1.0, R))
    eps = math.acos(R) / math.pi
    emp = None
    if holdout is not None:
        pred = np.sign(holdout.inputs @ student)
        emp = float(np.mean(pred != holdout.labels))
    return R, eps, emp


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


@dataclass
class SimConfig:
    d: int = 200
    alpha_tot: float = 4.0
    f: float = 1.0
    gamma_probe: float = 0.0
    probe_mode: ProbeMode = "conditioned-gaussian"
    probe_epochs: int = 1
    strategy_kind: str = "keep-hardest"
    margin_mode: str = "signed"
    trials: int = 100
    master_seed: int = 0
    holdout_factor: int = 20
    solver: SolverMethod = "ipm"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if not 0.0 < self.f <= 1.0:
            raise ValueError("f must lie in (0, 1]")
        if self.alpha_tot <= 0:
            raise ValueError("alpha_tot must be positive")
        if self.probe_mode not in ("conditioned-gaussian", "trained-epochs"):
            raise ValueError(f"unknown probe mode {self.probe_mode!r}")

    @property
    def alpha_syn(self) -> float:
        return self.f * self.alpha_tot

    @property
    def n_real(self) -> int:
        return int(round(self.alpha_tot * self.d))


@dataclass
class TrialRecord:
    trial: int
    seed: int
    R: float
    epsilon: float
    kappa: float
    epsilon_empirical: float | None
    gamma_achieved: float


@dataclass
class SimResult:
    mean_epsilon: float
    std_error: float
    per_trial: list[TrialRecord]
    config_echo: SimConfig
    mean_epsilon_empirical: float = math.nan
    std_error_empirical: float = math.nan
    flags: list[str] = field(default_factory=list)


def trial_seed(master_seed: int, trial: int) -> int:
    """64-bit seed of one trial, derived from the master seed and trial index."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(trial),))
    return int(ss.generate_state(1, np.uint64)[0])


def run_trial(config: SimConfig, trial: int, seed: int | None = None) -> TrialRecord:
    """One trial; replayable from ``seed`` alone."""
    seed = trial_seed(config.master_seed, trial) if seed is None else seed
    s_expert, s_data, s_probe, s_select, s_holdout = np.random.SeedSequence(seed).spawn(5)
    try:
        expert = sample_expert(config.d, s_expert)
        real = generate_set(expert, config.n_real, s_data)
        if config.probe_mode == "conditioned-gaussian":
            probe = make_probe(expert, config.gamma_probe, s_probe)
        else:
            probe = train_probe(real, config.probe_epochs, s_probe)
            if not np.any(probe):
                probe = make_probe(expert, math.pi / 2, s_probe)
        profile = compute_margins(probe, real)
        syn = select_subset(profile, config.f, config.strategy_kind, s_select, config.margin_mode)
        student, kappa = train_max_margin(syn, method=config.solver)
        holdout = None
        if config.holdout_factor > 0:
            holdout = generate_set(expert, config.holdout_factor * config.d, s_holdout)
        R, eps, emp = measure_error(student, expert, holdout)
    except Exception as exc:
        raise TrialError(str(exc), trial, seed) from exc
    return TrialRecord(trial, seed, R, eps, kappa, emp, angle_between(probe, expert.weights))


def _run_trial_star(args):
    return run_trial(*args)


def _mean_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    mean = float(np.mean(arr))
    se = float(np.std(arr, ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else math.nan
    return mean, se


def run_experiment(config: SimConfig, jobs: int = 1) -> SimResult:
    """Run ``config.trials`` independent trials and aggregate in trial order."""
    args = [(config, t) for t in range(config.trials)]
    if jobs > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            records = list(ex.map(_run_trial_star, args, chunksize=max(1, config.trials // (4 * jobs))))
    else:
        records = [run_trial(*a) for a in args]
    mean, se = _mean_se([r.epsilon for r in records])
    flags = ["std_error undefined for a single trial"] if config.trials == 1 else []
    emp = [r.epsilon_empirical for r in records if r.epsilon_empirical is not None]
    emean, ese = _mean_se(emp) if emp else (math.nan, math.nan)
    return SimResult(mean, se, records, config, emean, ese, flags)


def config_dict(config: SimConfig) -> dict:
    return asdict(config)
