"""Replica saddle-point theory for a max-margin student trained on a
margin-selected subset of expert-labelled Gaussian data.

Two solvers share one set of conventions:

* ``solve_perfect`` (probe == expert) works with the teacher margin ``u >= 0``
  and integrates the data density in closed form, leaving one Gaussian
  integral over the student field ``t``.  For the keep-hardest interval
  ``[0, c]`` the residuals reduce exactly to the classical two-equation
  system in ``(R, kappa)``.
* ``solve_imperfect`` (probe at angle ``gamma`` to the expert) writes the
  student as ``rho * probe + beta * t_perp + sigma * e`` where ``t_perp`` is
  the unit vector completing the expert in the probe/expert plane.  The noise
  direction ``e`` is integrated analytically and the remaining average over
  (signed probe margin ``m``, in-plane coordinate ``n``) by tensor
  Gauss-Legendre quadrature.

In both cases the max margin ``kappa`` is the largest value for which the
leading coefficient ``F = 1 - Q - alpha <(kappa - v)_+^2>`` of the log
version-space volume can still vanish, so the fixed point is the
simultaneous solution of ``F = 0`` and stationarity of ``F`` in the overlaps.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy import optimize, special

from .mathcore import T_CUT, gl_nodes, h_function, inverse_gaussian_tail, normal_pdf

log = logging.getLogger(__name__)

StrategyKind = Literal["keep-hardest", "keep-easiest", "keep-random"]
MarginMode = Literal["signed", "absolute"]
STRATEGY_KINDS = ("keep-hardest", "keep-easiest", "keep-random")

_T_NODES = 64
_M_NODES = 64
_N_NODES = 40
_FD_STEP = 1e-6


class SolverError(RuntimeError):
    """Saddle-point iteration failed; ``diagnostics`` holds residuals and path."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# --------------------------------------------------------------------------
# margin distribution along the probe
# --------------------------------------------------------------------------


def margin_density(gamma_probe: float, m):
    """Density of the signed probe margin ``m = probe . (y x)`` (unit probe).

    ``2 phi(m) Phi(m cot gamma)``, a skew-normal; the half-normal at
    ``gamma = 0``.
    """
    m = np.asarray(m, dtype=float)
    if gamma_probe == 0.0:
        return np.where(m >= 0.0, 2.0 * normal_pdf(m), 0.0)
    cot = math.cos(gamma_probe) / math.sin(gamma_probe)
    return 2.0 * normal_pdf(m) * special.ndtr(m * cot)


def margin_cdf(gamma_probe: float, m):
    """Cumulative distribution of the signed probe margin."""
    m = np.asarray(m, dtype=float)
    if gamma_probe == 0.0:
        return np.where(m > 0.0, 1.0 - 2.0 * h_function(np.maximum(m, 0.0)), 0.0)
    cot = math.cos(gamma_probe) / math.sin(gamma_probe)
    return special.ndtr(m) - 2.0 * special.owens_t(m, cot)


@dataclass(frozen=True)
class SelectionStrategy:
    """Which part of the probe-margin distribution survives selection.

    ``cutoffs`` is the kept interval of the signed margin in ``signed`` mode.
    In ``absolute`` mode it is the kept interval of ``|m|``.  Keep-random
    keeps ``(-inf, inf)`` and thins uniformly to the fraction ``f``.
    """

    kind: StrategyKind
    cutoffs: tuple[float, float]
    f: float
    gamma_probe: float = 0.0
    margin_mode: MarginMode = "signed"

    @property
    def thinning(self) -> float:
        return self.f if self.kind == "keep-random" else 1.0

    def intervals(self) -> list[tuple[float, float]]:
        """Kept region as disjoint intervals of the signed margin."""
        lo, hi = self.cutoffs
        if self.kind == "keep-random" or self.margin_mode == "signed":
            return [(lo, hi)]
        # absolute mode: cutoffs bound |m|
        if math.isinf(hi) and lo <= 0.0:
            return [(-math.inf, math.inf)]
        if math.isinf(hi):
            return [(-math.inf, -lo), (lo, math.inf)]
        return [(-hi, hi)]

    def kept_mass(self) -> float:
        total = 0.0
        for lo, hi in self.intervals():
            total += float(margin_cdf(self.gamma_probe, hi) - margin_cdf(self.gamma_probe, lo))
        return self.thinning * total

    @property
    def label(self) -> str:
        return self.kind + ("-abs" if self.margin_mode == "absolute" else "")


def parse_strategy_label(label: str) -> tuple[str, str]:
    """``'keep-hardest-abs'`` -> ``('keep-hardest', 'absolute')``."""
    if label.endswith("-abs"):
        return label[: -len("-abs")], "absolute"
    return label, "signed"


def cutoffs_from_fraction(
    f: float,
    gamma_probe: float,
    kind: StrategyKind,
    margin_mode: MarginMode = "signed",
) -> SelectionStrategy:
    """Margin cutoff whose kept density mass equals ``f``."""
    if not 0.0 < f <= 1.0:
        raise ValueError(f"fraction f must lie in (0, 1], got {f}")
    if not 0.0 <= gamma_probe <= math.pi / 2 + 1e-15:
        raise ValueError(f"probe angle must lie in [0, pi/2], got {gamma_probe}")
    if kind not in STRATEGY_KINDS:
        raise ValueError(f"unknown strategy kind {kind!r}")
    if margin_mode not in ("signed", "absolute"):
        raise ValueError(f"unknown margin mode {margin_mode!r}")
    full = (-math.inf, math.inf)
    if f == 1.0 or kind == "keep-random":
        return SelectionStrategy(kind, full, f, gamma_probe, margin_mode)

    if margin_mode == "signed":
        below = lambda c: float(margin_cdf(gamma_probe, c))
    else:
        below = lambda c: float(margin_cdf(gamma_probe, c) - margin_cdf(gamma_probe, -c))
    target = f if kind == "keep-hardest" else 1.0 - f

    if gamma_probe == 0.0:
        # half-normal: closed form doubles as the bracket-free answer
        c = float(inverse_gaussian_tail((1.0 - target) / 2.0))
    else:
        lo = 0.0 if margin_mode == "absolute" else -T_CUT
        c = optimize.brentq(lambda x: below(x) - target, lo, T_CUT, xtol=1e-15, rtol=1e-15)
    cut = (-math.inf, c) if kind == "keep-hardest" else (c, math.inf)
    if margin_mode == "absolute" and kind == "keep-hardest":
        cut = (0.0, c)
    return SelectionStrategy(kind, cut, f, gamma_probe, margin_mode)


# --------------------------------------------------------------------------
# solved points
# --------------------------------------------------------------------------


@dataclass
class TheoryPoint:
    alpha_syn: float
    f: float
    gamma_probe: float
    strategy: SelectionStrategy
    R: float
    rho: float
    kappa: float
    epsilon: float
    residual: float
    converged: bool = True
    iterations: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def gamma_deg(self) -> float:
        return math.degrees(self.gamma_probe)

    def row(self) -> dict:
        return {
            "alpha_syn": self.alpha_syn,
            "f": self.f,
            "gamma_deg": self.gamma_deg,
            "strategy": self.strategy.label,
            "R": self.R,
            "rho": self.rho,
            "kappa": self.kappa,
            "epsilon": self.epsilon,
            "residual": self.residual,
            "converged": self.converged,
        }


THEORY_COLUMNS = ("alpha_syn", "f", "gamma_deg", "strategy", "R", "rho", "kappa",
                  "epsilon", "residual", "converged")


def test_error(R: float) -> float:
    return math.acos(max(-1.0, min(1.0, R))) / math.pi


# --------------------------------------------------------------------------
# perfect probe
# --------------------------------------------------------------------------


def _teacher_intervals(strategy: SelectionStrategy) -> list[tuple[float, float]]:
    out = []
    for lo, hi in strategy.intervals():
        lo = max(lo, 0.0)
        if hi > lo:
            out.append((lo, hi))
    return out


def _t_panels(kappa: float, breaks: Iterable[float]):
    pts = sorted({b for b in breaks if -T_CUT < b < kappa})
    edges = np.array([-T_CUT, *pts, kappa])
    t, w = gl_nodes(edges[:-1], edges[1:], _T_NODES)
    return t.ravel(), w.ravel()


def perfect_residuals(R: float, kappa: float, alpha_syn: float,
                      strategy: SelectionStrategy) -> np.ndarray:
    """``(norm equation, overlap equation)`` residuals for the perfect probe.

    With kept teacher-margin intervals ``[a, b]`` and ``s = sqrt(1 - R^2)``::

        1 - R^2 = P int Dt sum [H((a-Rt)/s) - H((b-Rt)/s)] (kappa-t)^2
        R       = P/s int Dt sum [phi((a-Rt)/s) - phi((b-Rt)/s)] (kappa-t)

    over ``t < kappa``, with ``P = 2 alpha thinning / f``.
    """
    if not -1.0 < R < 1.0:
        raise ValueError(f"overlap must lie in (-1, 1), got {R}")
    if kappa <= -T_CUT:
        return np.array([1.0 - R * R, R])
    s = math.sqrt(1.0 - R * R)
    ivs = _teacher_intervals(strategy)
    breaks = []
    if R != 0.0:
        for a, b in ivs:
            breaks += [a / R] + ([b / R] if math.isfinite(b) else [])
    t, w = _t_panels(kappa, breaks)
    w = w * normal_pdf(t)
    hsum = np.zeros_like(t)
    psum = np.zeros_like(t)
    for a, b in ivs:
        za = (a - R * t) / s
        hsum += h_function(za)
        psum += normal_pdf(za)
        if math.isfinite(b):
            zb = (b - R * t) / s
            hsum -= h_function(zb)
            psum -= normal_pdf(zb)
    pref = 2.0 * alpha_syn * strategy.thinning / strategy.f
    gap = kappa - t
    r1 = 1.0 - R * R - pref * float(np.sum(w * hsum * gap * gap))
    r2 = R - pref / s * float(np.sum(w * psum * gap))
    return np.array([r1, r2])


def hardest_cutoff_residuals(R: float, kappa: float, alpha_syn: float, f: float,
                             cutoff: float) -> np.ndarray:
    """The two-equation keep-hardest system written with its exponential
    bracket ``1 - exp(-c (c - 2Rt) / (2(1-R^2)))``; used as a cross-check of
    :func:`perfect_residuals`."""
    s2 = 1.0 - R * R
    s = math.sqrt(s2)
    t, w = _t_panels(kappa, [0.0, cutoff / R if R else T_CUT])
    w = w * normal_pdf(t)
    gap = kappa - t
    pref = 2.0 * alpha_syn / f
    bracket = 1.0 - np.exp(-cutoff * (cutoff - 2.0 * R * t) / (2.0 * s2))
    r1 = R - pref / (math.sqrt(2 * math.pi) * s) * float(
        np.sum(w * np.exp(-R * R * t * t / (2 * s2)) * bracket * gap))
    hdiff = h_function(-R * t / s) - h_function(-(R * t - cutoff) / s)
    r2 = s2 - pref * float(np.sum(w * hdiff * gap * gap))
    return np.array([r2, r1])


# --------------------------------------------------------------------------
# imperfect probe
# --------------------------------------------------------------------------


def _m_nodes(strategy: SelectionStrategy):
    gamma = strategy.gamma_probe
    # below -12 tan(gamma) the expert label almost surely disagrees with m > 0
    floor = max(-T_CUT, -T_CUT * math.tan(gamma)) if gamma < math.pi / 2 else -T_CUT
    los, his = [], []
    for lo, hi in strategy.intervals():
        for a, b in ((max(lo, floor), min(hi, 0.0)), (max(lo, 0.0), min(hi, T_CUT))):
            if b > a:
                los.append(a)
                his.append(b)
    if not los:
        return np.zeros(0), np.zeros(0)
    m, w = gl_nodes(np.array(los), np.array(his), _M_NODES)
    return m.ravel(), w.ravel()


def _imperfect_averages(rho: float, beta: float, kappa: float, alpha_syn: float,
                        strategy: SelectionStrategy):
    """Averages ``<g2>, <m g1>, <n g1>, <Phi>`` over the kept data."""
    gamma = strategy.gamma_probe
    sig2 = 1.0 - rho * rho - beta * beta
    sig = math.sqrt(sig2)
    m, wm = _m_nodes(strategy)
    cot = math.cos(gamma) / math.sin(gamma)
    n0 = np.clip(-m * cot, -T_CUT, T_CUT)
    x0 = kappa - rho * m
    if beta != 0.0:
        kink = np.clip(x0 / beta, n0, T_CUT)
    else:
        kink = n0
    n_a, w_a = gl_nodes(n0, kink, _N_NODES)
    n_b, w_b = gl_nodes(kink, np.full_like(n0, T_CUT), _N_NODES)
    n = np.concatenate([n_a, n_b], axis=1)
    wn = np.concatenate([w_a, w_b], axis=1) * normal_pdf(n)
    x = x0[:, None] - beta * n
    u = x / sig
    big_phi = special.ndtr(u)
    small_phi = normal_pdf(u)
    g1 = x * big_phi + sig * small_phi
    g2 = (x * x + sig2) * big_phi + x * sig * small_phi
    dens = 2.0 * normal_pdf(m) * wm * strategy.thinning / strategy.f
    avg = lambda arr: float(np.sum(dens * np.sum(wn * arr, axis=1)))
    return avg(g2), avg(m[:, None] * g1), avg(n * g1), avg(big_phi), sig2


def _inplane_residuals(p: np.ndarray, alpha_syn: float, strategy: SelectionStrategy) -> np.ndarray:
    rho, beta, kappa = p
    g2, mg, ng, bphi, sig2 = _imperfect_averages(rho, beta, kappa, alpha_syn, strategy)
    a = alpha_syn
    return np.array([sig2 - a * g2, rho * (1.0 - a * bphi) - a * mg, beta * (1.0 - a * bphi) - a * ng])


def _to_inplane(R: float, rho: float, gamma: float) -> float:
    return (R - rho * math.cos(gamma)) / math.sin(gamma)


def _overlap(rho: float, beta: float, gamma: float) -> float:
    return rho * math.cos(gamma) + beta * math.sin(gamma)


def imperfect_residuals(R: float, rho: float, kappa: float, alpha_syn: float,
                        strategy: SelectionStrategy) -> np.ndarray:
    """Residuals of the three-equation imperfect-probe system at ``(R, rho, kappa)``."""
    gamma = strategy.gamma_probe
    beta = _to_inplane(R, rho, gamma)
    lam2 = math.sin(gamma) ** 2 - R * R - rho * rho + 2 * rho * R * math.cos(gamma)
    if lam2 <= 0.0:
        raise ValueError(f"Lambda^2 = {lam2} <= 0: overlaps outside the physical region")
    return _inplane_residuals(np.array([rho, beta, kappa]), alpha_syn, strategy)


# --------------------------------------------------------------------------
# root finding
# --------------------------------------------------------------------------


def _jacobian(fun, x: np.ndarray, r0: np.ndarray) -> np.ndarray:
    J = np.empty((r0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = _FD_STEP
        J[:, j] = (fun(x + e) - fun(x - e)) / (2 * _FD_STEP)
    return J


def damped_newton(fun, x0, feasible, tol: float = 1e-9, max_iter: int = 200):
    """Newton iteration with central-difference Jacobian and backtracking.

    Steps leaving ``feasible`` or failing to reduce ``max|r|`` are halved.
    Returns ``(x, r, iterations, diagnostics)``; raises :class:`SolverError`.
    """
    x = np.asarray(x0, dtype=float)
    if not feasible(x):
        raise SolverError("initial point is infeasible", {"x0": x.tolist()})
    r = fun(x)
    path = [x.tolist()]
    rejected = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(r)) <= tol:
            return x, r, it - 1, {"path": path, "rejected_steps": rejected}
        try:
            J = _jacobian(fun, x, r)
            step = np.linalg.solve(J, -r)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"singular Newton system: {exc}",
                              {"residuals": r.tolist(), "path": path}) from exc
        scale = 1.0
        norm0 = np.max(np.abs(r))
        for _ in range(40):
            cand = x + scale * step
            if feasible(cand):
                try:
                    rc = fun(cand)
                except ValueError:
                    rc = None
                if rc is not None and np.all(np.isfinite(rc)) and np.max(np.abs(rc)) < norm0:
                    break
            rejected += 1
            scale *= 0.5
        else:
            raise SolverError("line search failed", {"residuals": r.tolist(), "path": path,
                                                      "rejected_steps": rejected})
        x, r = cand, rc
        path.append(x.tolist())
    if np.max(np.abs(r)) <= tol:
        return x, r, max_iter, {"path": path, "rejected_steps": rejected}
    raise SolverError(f"no convergence in {max_iter} iterations",
                      {"residuals": r.tolist(), "path": path, "rejected_steps": rejected})


def _kappa_root(norm_eq, hi: float = 8.0) -> float:
    """Root in kappa of the (decreasing) norm equation."""
    lo = -6.0
    while norm_eq(hi) > 0.0:
        hi *= 2.0
        if hi > 1e4:
            raise SolverError("kappa bracket exhausted")
    return optimize.brentq(norm_eq, lo, hi, xtol=1e-14, rtol=1e-15)


def _check_strategy(f: float, strategy: SelectionStrategy) -> None:
    if not math.isclose(f, strategy.f, rel_tol=0, abs_tol=1e-14):
        raise ValueError(f"f={f} disagrees with strategy fraction {strategy.f}")


def solve_perfect(alpha_syn: float, f: float, strategy: SelectionStrategy,
                  tol: float = 1e-9, init: Sequence[float] | None = None,
                  max_iter: int = 200) -> TheoryPoint:
    """Solve the perfect-probe system for ``(R, kappa)``."""
    if alpha_syn <= 0:
        raise ValueError("alpha_syn must be positive")
    _check_strategy(f, strategy)
    if strategy.gamma_probe != 0.0:
        raise ValueError("solve_perfect needs a strategy built for gamma_probe = 0")
    fun = lambda x: perfect_residuals(x[0], x[1], alpha_syn, strategy)
    feasible = lambda x: 0.0 < x[0] < 1.0
    x0 = np.array(init[:2] if init is not None else (0.5, 0.5), dtype=float)
    x0[0] = min(max(x0[0], 1e-6), 1 - 1e-9)
    diag: dict = {}
    try:
        x, r, its, diag = damped_newton(fun, x0, feasible, tol, max_iter)
    except SolverError as exc:
        diag["newton_failure"] = str(exc)
        # fallback: kappa is the maximum over R of the norm-equation root
        kstar = lambda R: _kappa_root(lambda k: perfect_residuals(R, k, alpha_syn, strategy)[0])
        res = optimize.minimize_scalar(lambda R: -kstar(R), bounds=(1e-9, 1 - 1e-12),
                                       method="bounded", options={"xatol": 1e-11})
        x1 = np.array([res.x, kstar(res.x)])
        x, r, its, d2 = damped_newton(fun, x1, feasible, tol, max_iter)
        diag.update(d2, fallback="maximin")
    R, kappa = float(x[0]), float(x[1])
    if R < 0:
        raise SolverError("unphysical solution R < 0", {"R": R, "kappa": kappa})
    return TheoryPoint(alpha_syn, f, 0.0, strategy, R, R, kappa, test_error(R),
                       float(np.max(np.abs(r))), True, its, diag)


def solve_imperfect(alpha_syn: float, f: float, gamma_probe: float,
                    strategy: SelectionStrategy, tol: float = 1e-9,
                    init: Sequence[float] | None = None, max_iter: int = 200) -> TheoryPoint:
    """Solve the three-equation imperfect-probe system for ``(R, rho, kappa)``.

    ``init`` is ``(R, rho, kappa)``.
    """
    if alpha_syn <= 0:
        raise ValueError("alpha_syn must be positive")
    if not 0.0 < gamma_probe <= math.pi / 2 + 1e-15:
        raise ValueError("solve_imperfect needs 0 < gamma_probe <= pi/2")
    _check_strategy(f, strategy)
    if not math.isclose(strategy.gamma_probe, gamma_probe, abs_tol=1e-15):
        raise ValueError("strategy was built for a different probe angle")
    if init is None:
        init = (0.5, 0.5 * math.cos(gamma_probe), 0.5)
    R0, rho0, k0 = init
    x0 = np.array([rho0, _to_inplane(R0, rho0, gamma_probe), k0])
    if x0[0] ** 2 + x0[1] ** 2 >= 1.0:
        x0 = np.array([0.5 * math.cos(gamma_probe), 0.5 * math.sin(gamma_probe), 0.5])
    fun = lambda x: _inplane_residuals(x, alpha_syn, strategy)
    feasible = lambda x: x[0] ** 2 + x[1] ** 2 < 1.0 - 1e-14
    diag: dict = {}
    try:
        x, r, its, diag = damped_newton(fun, x0, feasible, tol, max_iter)
    except SolverError as exc:
        diag["newton_failure"] = str(exc)

        def neg_kstar(p):
            if p[0] ** 2 + p[1] ** 2 >= 1.0 - 1e-12:
                return 1e3
            return -_kappa_root(lambda k: fun(np.array([p[0], p[1], k]))[0])

        res = optimize.minimize(neg_kstar, x0[:2], method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 4000})
        x1 = np.array([res.x[0], res.x[1], -res.fun])
        x, r, its, d2 = damped_newton(fun, x1, feasible, tol, max_iter)
        diag.update(d2, fallback="maximin")
    rho, beta, kappa = (float(v) for v in x)
    R = _overlap(rho, beta, gamma_probe)
    if R < 0:
        raise SolverError("unphysical solution R < 0", {"R": R, "rho": rho, "kappa": kappa})
    diag["lambda_sq"] = math.sin(gamma_probe) ** 2 * (1 - rho * rho - beta * beta)
    return TheoryPoint(alpha_syn, f, gamma_probe, strategy, R, rho, kappa, test_error(R),
                       float(np.max(np.abs(r))), True, its, diag)


def solve_point(alpha_syn: float, f: float, gamma_probe: float, kind: StrategyKind,
                margin_mode: MarginMode = "signed", tol: float = 1e-9,
                init: Sequence[float] | None = None) -> TheoryPoint:
    """Build the strategy and dispatch to the perfect or imperfect solver."""
    strategy = cutoffs_from_fraction(f, gamma_probe, kind, margin_mode)
    if gamma_probe == 0.0:
        init2 = None if init is None else (init[0], init[2])
        return solve_perfect(alpha_syn, f, strategy, tol, init2)
    return solve_imperfect(alpha_syn, f, gamma_probe, strategy, tol, init)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

GridCell = tuple  # (alpha_syn, f, gamma_probe_radians, kind[, margin_mode])


def _normalize_cell(cell: GridCell) -> tuple:
    alpha, f, gamma, kind, *rest = cell
    mode = rest[0] if rest else "signed"
    return (float(alpha), float(f), float(gamma), str(kind), str(mode))


def _failed_point(cell: tuple, exc: Exception) -> TheoryPoint:
    alpha, f, gamma, kind, mode = cell
    try:
        strategy = cutoffs_from_fraction(f, gamma, kind, mode)
    except ValueError:
        strategy = SelectionStrategy(kind, (math.nan, math.nan), f, gamma, mode)
    diag = dict(getattr(exc, "diagnostics", {}) or {})
    diag["error"] = str(exc)
    return TheoryPoint(alpha, f, gamma, strategy, math.nan, math.nan, math.nan, math.nan,
                       math.inf, False, 0, diag)


def _solve_line(cells: list[tuple], tol: float) -> list[TheoryPoint]:
    out = []
    prev = None
    for cell in cells:
        alpha, f, gamma, kind, mode = cell
        try:
            point = solve_point(alpha, f, gamma, kind, mode, tol, init=prev)
        except (SolverError, ValueError) as exc:
            if prev is None:
                out.append(_failed_point(cell, exc))
                continue
            try:
                point = solve_point(alpha, f, gamma, kind, mode, tol, init=None)
            except (SolverError, ValueError) as exc2:
                log.warning("theory cell %s failed: %s", cell, exc2)
                out.append(_failed_point(cell, exc2))
                continue
        prev = (point.R, point.rho, point.kappa)
        out.append(point)
    return out


def sweep(grid: Sequence[GridCell], tol: float = 1e-9, jobs: int = 1) -> list[TheoryPoint]:
    """Solve every grid cell, warm-starting along lines of increasing alpha.

    A line is the set of cells sharing ``(f, gamma, kind, mode)``; lines are
    independent and may run in parallel, cells within a line run serially in
    ascending alpha.  Rows come back in grid order, failures flagged.
    """
    if not grid:
        raise ValueError("empty grid")
    cells = [_normalize_cell(c) for c in grid]
    unique = sorted(set(cells))
    lines: dict[tuple, list[tuple]] = {}
    for cell in unique:
        lines.setdefault(cell[1:], []).append(cell)
    keys = sorted(lines)
    payload = [sorted(lines[k]) for k in keys]
    if jobs > 1 and len(payload) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            solved = list(ex.map(_solve_line, payload, [tol] * len(payload)))
    else:
        solved = [_solve_line(p, tol) for p in payload]
    table = {}
    for line, points in zip(payload, solved):
        table.update(zip(line, points))
    return [replace(table[c]) for c in cells]
