"""``dslab`` command line: theory sweeps, simulations, comparisons, distillation, difficulty.

Every command reads an optional YAML config, merges it over the defaults
shown by ``--print-defaults``, writes its tables into ``--out`` and finishes
with ``manifest.json`` listing each file with its size and sha256.

Exit status: 0 when all requested work converged or passed, 1 otherwise,
2 for usage and config errors.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, difficulty, distill, sim, theory
from .report import OutputDir, RunManifest, format_table, read_table

log = logging.getLogger("dslab")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "theory": {
        "grid": {
            "alpha_syn": [0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            "f": [0.3, 0.6, 1.0],
            "gamma_deg": [0.0],
            "strategy": ["keep-hardest", "keep-easiest"],
        },
        "margin_mode": "signed",
        "tol": 1e-9,
    },
    "simulate": {
        "grid": {
            "alpha_syn": [1.0],
            "f": [0.6],
            "gamma_deg": [0.0],
            "strategy": ["keep-hardest"],
        },
        "d": 200,
        "trials": 100,
        "margin_mode": "signed",
        "probe_mode": "conditioned-gaussian",
        "probe_epochs": 1,
        "holdout_factor": 20,
        "solver": "ipm",
        "seed": 0,
    },
    "distill": {
        "mode": "gm",
        "dataset": "blobs",
        "d": 16,
        "n_per_class": 200,
        "n_test_per_class": 500,
        "seeds": [0, 1, 2],
        "seed": 0,
        "tune_eta_syn": False,
        "bank": {"epochs_per_checkpoint": 1, "checkpoints": 20, "lr": 0.1, "batch": 64},
        "match": {f.name: f.default for f in fields(distill.MatchConfig)},
    },
    "difficulty": {
        "dataset": "blobs",
        "d": 16,
        "n_per_class": 200,
        "members": 20,
        "epochs": 3,
        "subset": 0.5,
        "lr": 0.1,
        "batch": 32,
        "seed": 0,
        "data": None,
        "ensemble": None,
    },
}
DEFAULTS["distill"]["match"]["iterations"] = 50


# ----------------------------------------------------------------- config

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown field '{path}'")
        if isinstance(base[key], dict) and base[key] and isinstance(val, dict):
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def load_config(command: str, path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if path is None:
        return cfg
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        user = yaml.safe_load(text) or {}
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: {where}: {exc.problem}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return _merge(cfg, user)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _grid(cfg: dict) -> list[tuple]:
    g = cfg["grid"]
    try:
        cells = list(itertools.product(
            [float(a) for a in _as_list(g["alpha_syn"])],
            [float(f) for f in _as_list(g["f"])],
            [float(x) for x in _as_list(g["gamma_deg"])],
            [str(s) for s in _as_list(g["strategy"])],
        ))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"grid: {exc}") from None
    for a, f, gdeg, s in cells:
        if a <= 0:
            raise ConfigError(f"grid.alpha_syn: {a} is not positive")
        if not 0 < f <= 1:
            raise ConfigError(f"grid.f: {f} outside (0, 1]")
        if not 0 <= gdeg <= 90:
            raise ConfigError(f"grid.gamma_deg: {gdeg} outside [0, 90]")
        if s not in ("keep-hardest", "keep-easiest", "keep-random"):
            raise ConfigError(f"grid.strategy: unknown strategy {s!r}")
    return cells


def _strategy_label(kind: str, mode: str) -> str:
    return kind + ("-abs" if mode == "absolute" else "")


# ---------------------------------------------------------------- commands

def cmd_theory(cfg: dict, args, out: OutputDir, manifest: RunManifest) -> int:
    mode = cfg["margin_mode"]
    if mode not in ("signed", "absolute"):
        raise ConfigError(f"margin_mode: unknown value {mode!r}")
    cells = _grid(cfg)
    grid = [(a, f, math.radians(g), s, mode) for a, f, g, s in cells]
    points = theory.sweep(grid, tol=float(cfg["tol"]), jobs=args.jobs)
    out.table("theory", theory.THEORY_COLUMNS, [p.row() for p in points])
    bad = [p for p in points if not p.converged]
    for p in bad:
        log.error("cell alpha_syn=%g f=%g gamma=%g %s did not converge: %s", p.alpha_syn, p.f,
                  p.gamma_deg, p.strategy.label, p.diagnostics.get("error", "residual too large"))
    manifest.notes.append(f"{len(points) - len(bad)}/{len(points)} cells converged")
    return 1 if bad and not args.allow_partial else 0


SIM_TRIAL_COLUMNS = ("trial", "d", "alpha_tot", "f", "gamma_deg", "strategy", "R", "kappa",
                     "epsilon_analytic", "epsilon_empirical", "seed")
SIM_SUMMARY_COLUMNS = ("alpha_syn", "f", "gamma_deg", "strategy", "alpha_tot", "d", "trials",
                       "mean_epsilon", "std_error", "mean_epsilon_empirical", "std_error_empirical")


def cmd_simulate(cfg: dict, args, out: OutputDir, manifest: RunManifest) -> int:
    cells = _grid(cfg)
    trial_rows, summary = [], []
    failed = 0
    for k, (a, f, gdeg, kind) in enumerate(cells):
        try:
            sc = sim.SimConfig(d=int(cfg["d"]), alpha_tot=a / f, f=f, gamma_probe=math.radians(gdeg),
                               probe_mode=cfg["probe_mode"], probe_epochs=int(cfg["probe_epochs"]),
                               strategy_kind=kind, margin_mode=cfg["margin_mode"],
                               trials=int(cfg["trials"]), holdout_factor=int(cfg["holdout_factor"]),
                               solver=cfg["solver"],
                               master_seed=sim.trial_seed(int(cfg["seed"]), k))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        label = _strategy_label(kind, cfg["margin_mode"])
        try:
            res = sim.run_experiment(sc, jobs=args.jobs)
        except sim.TrialError as exc:
            log.error("grid point %d: %s", k, exc)
            failed += 1
            continue
        for r in res.per_trial:
            trial_rows.append((r.trial, sc.d, sc.alpha_tot, f, gdeg, label, r.R, r.kappa, r.epsilon,
                               r.epsilon_empirical, r.seed))
        summary.append((a, f, gdeg, label, sc.alpha_tot, sc.d, sc.trials, res.mean_epsilon,
                        res.std_error, res.mean_epsilon_empirical, res.std_error_empirical))
        manifest.notes.extend(res.flags)
    out.table("trials", SIM_TRIAL_COLUMNS, trial_rows)
    out.table("summary", SIM_SUMMARY_COLUMNS, summary)
    return 1 if failed else 0


COMPARE_COLUMNS = ("alpha_syn", "f", "gamma_deg", "strategy", "epsilon_theory", "epsilon_sim",
                   "std_error", "delta", "z", "status")


def _key(row: dict) -> tuple:
    return (float(f"{float(row['alpha_syn']):.9g}"), float(f"{float(row['f']):.9g}"),
            float(f"{float(row['gamma_deg']):.9g}"), row["strategy"])


def _num(v, default=math.nan) -> float:
    if v is None or v == "":
        return default
    return float(v)


def compare_tables(theory_rows: list[dict], sim_rows: list[dict], column: str = "mean_epsilon",
                   n_se: float = 2.0) -> tuple[list[tuple], list[tuple]]:
    """Join on ``(alpha_syn, f, gamma_deg, strategy)``; returns ``(rows, unmatched_keys)``."""
    th = {_key(r): r for r in theory_rows}
    sm = {_key(r): r for r in sim_rows}
    unmatched = sorted(set(th) ^ set(sm), key=str)
    rows = []
    for key in sorted(set(th) & set(sm), key=str):
        e_th = _num(th[key]["epsilon"])
        s = sm[key]
        e_sim = _num(s.get(column, s.get("epsilon")))
        se_col = "std_error_empirical" if column == "mean_epsilon_empirical" else "std_error"
        se = _num(s.get(se_col), 0.0)
        if math.isnan(se):
            se = 0.0
        delta = e_th - e_sim
        z = delta / se if se > 0 else (0.0 if delta == 0 else math.copysign(math.inf, delta))
        ok = math.isfinite(delta) and abs(delta) <= n_se * se
        rows.append((*key, e_th, e_sim, se, delta, z, "PASS" if ok else "FAIL"))
    return rows, unmatched


def cmd_compare(cfg: dict, args, out: OutputDir, manifest: RunManifest) -> int:
    theory_rows = read_table(args.theory_csv)
    sim_rows = read_table(args.sim_csv)
    col = "mean_epsilon_empirical" if args.epsilon == "empirical" else "mean_epsilon"
    rows, unmatched = compare_tables(theory_rows, sim_rows, col)
    for key in unmatched:
        log.warning("unmatched grid key %s excluded", key)
    if not rows:
        raise ConfigError("no grid keys shared between the two tables")
    out.table("compare", COMPARE_COLUMNS, rows)
    n_pass = sum(r[-1] == "PASS" for r in rows)
    frac = n_pass / len(rows)
    max_delta = max(abs(r[7]) for r in rows)
    manifest.notes.append(f"{n_pass}/{len(rows)} points within 2 standard errors; max |delta| {max_delta:.4g}")
    manifest.config_echo.update({"theory_csv": str(args.theory_csv), "sim_csv": str(args.sim_csv),
                                 "epsilon": args.epsilon, "min_pass_fraction": args.min_pass_fraction})
    print(f"{n_pass}/{len(rows)} PASS ({frac:.1%}), max |delta eps| = {max_delta:.4g}")
    return 0 if frac >= args.min_pass_fraction else 1


DISTILL_SUMMARY_COLUMNS = ("seed", "grad_norm_baseline", "grad_norm_sdc", "delta_grad_norm",
                           "accuracy_baseline", "accuracy_sdc", "delta_accuracy")


def _distill_seed(payload):
    cfg, match, seed, run_seed = payload
    real = distill.make_dataset(cfg["dataset"], int(cfg["n_per_class"]), int(cfg["d"]), seed=run_seed)
    test = distill.make_dataset(cfg["dataset"], int(cfg["n_test_per_class"]), int(cfg["d"]),
                                seed=run_seed + 1)
    bank = None
    if cfg["mode"] == "tm":
        b = cfg["bank"]
        bank = distill.build_expert_bank(real, int(b["epochs_per_checkpoint"]), int(b["checkpoints"]),
                                         seed=run_seed, lr=float(b["lr"]), batch=int(b["batch"]))
    if cfg["tune_eta_syn"]:
        match = replace(match, eta_syn=distill.tune_eta_syn(real, test, match, cfg["mode"], run_seed,
                                                            bank=bank))
    results = {}
    for arm, mc in (("baseline", distill.baseline(match)), ("sdc", match)):
        if cfg["mode"] == "gm":
            syn, trace = distill.distill_gm(real, mc, run_seed, test)
        else:
            syn, trace = distill.distill_tm(bank, real, mc, run_seed, test)
        results[arm] = (syn, trace, distill.evaluate_synthetic(syn, test, mc))
    return seed, match.eta_syn, results


def cmd_distill(cfg: dict, args, out: OutputDir, manifest: RunManifest) -> int:
    if cfg["mode"] not in ("gm", "tm"):
        raise ConfigError(f"mode: expected gm or tm, got {cfg['mode']!r}")
    if cfg["dataset"] not in distill.DATASETS:
        raise ConfigError(f"dataset: unknown dataset {cfg['dataset']!r}")
    try:
        match = distill.MatchConfig(**cfg["match"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"match: {exc}") from None
    master = int(cfg["seed"])
    payload = [(cfg, match, int(s), sim.trial_seed(master, int(s)) % (2**32)) for s in _as_list(cfg["seeds"])]
    results, failures = [], 0
    if args.jobs > 1 and len(payload) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            futures = [ex.submit(_distill_seed, p) for p in payload]
            outcomes = []
            for p, fut in zip(payload, futures):
                try:
                    outcomes.append(fut.result())
                except Exception as exc:  # keep the other seeds
                    log.error("seed %d failed: %s", p[2], exc)
                    failures += 1
    else:
        outcomes = []
        for p in payload:
            try:
                outcomes.append(_distill_seed(p))
            except Exception as exc:
                log.error("seed %d failed: %s", p[2], exc)
                failures += 1
    mode = cfg["mode"]
    for seed, eta, res in outcomes:
        for arm, (syn, trace, _) in res.items():
            out.table(f"trace_{mode}_seed{seed}_{arm}", distill.DistillTrace.COLUMNS, trace.rows())
            out.text(f"synthetic_{mode}_seed{seed}_{arm}.json",
                     syn.to_json({"mode": mode, "seed": seed, "arm": arm, "eta_syn": eta,
                                  "tool_version": __version__}) + "\n")
        gb = res["baseline"][1].final_half_grad_norm()
        gs = res["sdc"][1].final_half_grad_norm()
        ab, as_ = res["baseline"][2], res["sdc"][2]
        results.append((seed, gb, gs, gs - gb, ab, as_, as_ - ab))
    if results:
        out.table(f"summary_{mode}", DISTILL_SUMMARY_COLUMNS, results)
        arr = np.array([r[1:] for r in results])
        mean = dict(zip(DISTILL_SUMMARY_COLUMNS[1:], arr.mean(axis=0).tolist()))
        mean["grad_norm_reduced"] = bool(mean["delta_grad_norm"] < 0)
        out.json(f"summary_{mode}.json", {"seeds": [r[0] for r in results], "mean": mean})
    return 1 if failures else 0


def cmd_difficulty(cfg: dict, args, out: OutputDir, manifest: RunManifest) -> int:
    seed = int(cfg["seed"])
    if cfg["data"] is not None:
        d = cfg["data"]
        X = np.asarray(d["features"], dtype=float)
        y = np.asarray(d["labels"], dtype=int)
        data = difficulty.ClassSet(X, y, int(d.get("classes", y.max() + 1)))
    else:
        if cfg["dataset"] not in distill.DATASETS:
            raise ConfigError(f"dataset: unknown dataset {cfg['dataset']!r}")
        data = distill.make_dataset(cfg["dataset"], int(cfg["n_per_class"]), int(cfg["d"]), seed=seed)
    if cfg["ensemble"] is not None:
        ens = difficulty.Ensemble([np.asarray(W, dtype=float) for W in cfg["ensemble"]],
                                  [{"member": k, "source": "config"} for k in range(len(cfg["ensemble"]))])
    else:
        ens = difficulty.build_ensemble(data, int(cfg["members"]), int(cfg["epochs"]), float(cfg["subset"]),
                                        float(cfg["lr"]), int(cfg["batch"]), seed=seed)
    report = difficulty.correlation_report(data, ens)
    out.table("difficulty", difficulty.DifficultyReport.COLUMNS, report.rows())
    summary = report.summary()
    summary["ensemble"] = ens.provenance
    out.json("difficulty_summary.json", summary)
    ok = report.chi_vs_gradn.defined and report.chi_vs_loss.defined
    if not ok:
        log.warning("correlation undefined: %s", report.chi_vs_gradn.reason or report.chi_vs_loss.reason)
    return 0 if ok or args.allow_partial else 1


COMMANDS = {
    "theory": cmd_theory,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "distill": cmd_distill,
    "difficulty": cmd_difficulty,
}


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config merged over the defaults")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed, overrides the config")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="table format")
    common.add_argument("--allow-partial", action="store_true",
                        help="exit 0 even if some cells did not converge")
    common.add_argument("--print-defaults", action="store_true",
                        help="print the default config for this command and exit")

    parser = argparse.ArgumentParser(prog="dslab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dslab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("theory", parents=[common], help="solve the saddle-point theory on a grid")
    sub.add_parser("simulate", parents=[common], help="Monte Carlo perceptron experiments")
    cp = sub.add_parser("compare", parents=[common], help="join theory and simulation tables")
    cp.add_argument("theory_csv", type=Path)
    cp.add_argument("sim_csv", type=Path)
    cp.add_argument("--epsilon", choices=("analytic", "empirical"), default="analytic",
                    help="which simulated error to compare")
    cp.add_argument("--min-pass-fraction", type=float, default=1.0,
                    help="fraction of points that must pass for exit status 0")
    sub.add_parser("distill", parents=[common], help="baseline vs difficulty-corrected distillation")
    sub.add_parser("difficulty", parents=[common], help="ensemble difficulty and gradient-norm report")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("DSL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    if args.print_defaults:
        sys.stdout.write(yaml.safe_dump(DEFAULTS.get(args.command, {}), sort_keys=False))
        return 0
    try:
        cfg = load_config(args.command, args.config) if args.command != "compare" else {}
    except ConfigError as exc:
        parser.error(str(exc))
    if args.seed is not None and "seed" in cfg:
        cfg["seed"] = args.seed
    if args.seed is not None and args.command == "theory":
        log.info("theory is deterministic; --seed ignored")

    out = OutputDir(Path(args.out), args.format)
    manifest = RunManifest(__version__, " ".join(["dslab", *(argv if argv is not None else sys.argv[1:])]),
                           cfg.get("seed"), cfg)
    t0 = time.perf_counter()
    try:
        status = COMMANDS[args.command](cfg, args, out, manifest)
    except ConfigError as exc:
        parser.error(str(exc))
    manifest.wall_time_seconds = time.perf_counter() - t0
    manifest.status = "ok" if status == 0 else "failed"
    out.manifest(manifest)
    return status


if __name__ == "__main__":
    sys.exit(main())
