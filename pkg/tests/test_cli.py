import csv
import json
from pathlib import Path

import pytest
import yaml

from dslab.cli import compare_tables, main
from dslab.report import OutputFile, RunManifest, read_table


def write_yaml(path: Path, obj) -> Path:
    path.write_text(yaml.safe_dump(obj))
    return path


def load_manifest(root: Path) -> RunManifest:
    raw = json.loads((root / "manifest.json").read_text())
    raw["outputs"] = [OutputFile(**o) for o in raw["outputs"]]
    return RunManifest(**raw)


def files(root: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.name != "manifest.json"}


THEORY_CELL = {"grid": {"alpha_syn": [2.0], "f": [0.6], "gamma_deg": [0.0], "strategy": ["keep-hardest"]}}
SIM_SMALL = {"grid": {"alpha_syn": [1.0], "f": [0.6], "gamma_deg": [0.0], "strategy": ["keep-hardest"]},
             "d": 20, "trials": 1}


def test_theory_single_cell(tmp_path):
    cfg = write_yaml(tmp_path / "t.yaml", THEORY_CELL)
    assert main(["theory", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    rows = read_table(tmp_path / "a" / "theory.csv")
    assert len(rows) == 1
    assert float(rows[0]["epsilon"]) == pytest.approx(0.14655, abs=5e-6)
    assert rows[0]["converged"] == "true"
    assert load_manifest(tmp_path / "a").verify(tmp_path / "a") == []
    assert main(["theory", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_manifest_detects_tampering(tmp_path):
    cfg = write_yaml(tmp_path / "t.yaml", THEORY_CELL)
    main(["theory", "--config", str(cfg), "--out", str(tmp_path)])
    with open(tmp_path / "theory.csv", "a") as fh:
        fh.write("x\n")
    assert load_manifest(tmp_path).verify(tmp_path) == ["theory.csv"]


def test_theory_json_format(tmp_path):
    cfg = write_yaml(tmp_path / "t.yaml", THEORY_CELL)
    assert main(["theory", "--config", str(cfg), "--out", str(tmp_path), "--format", "json"]) == 0
    rows = json.loads((tmp_path / "theory.json").read_text())
    assert len(rows) == 1 and rows[0]["strategy"] == "keep-hardest"


def test_compare_theory_against_itself(tmp_path):
    cfg = write_yaml(tmp_path / "t.yaml", THEORY_CELL)
    main(["theory", "--config", str(cfg), "--out", str(tmp_path / "t")])
    theory = tmp_path / "t" / "theory.csv"
    rows = read_table(theory)
    sim = tmp_path / "sim.csv"
    with open(sim, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha_syn", "f", "gamma_deg", "strategy", "mean_epsilon", "std_error"])
        w.writerow([rows[0]["alpha_syn"], rows[0]["f"], rows[0]["gamma_deg"], rows[0]["strategy"],
                    rows[0]["epsilon"], 0.0])
    assert main(["compare", str(theory), str(sim), "--out", str(tmp_path / "c")]) == 0
    out = read_table(tmp_path / "c" / "compare.csv")
    assert out[0]["status"] == "PASS" and float(out[0]["delta"]) == 0.0

    # an injected outlier fails and the exit code says so
    with open(sim, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha_syn", "f", "gamma_deg", "strategy", "mean_epsilon", "std_error"])
        w.writerow([rows[0]["alpha_syn"], rows[0]["f"], rows[0]["gamma_deg"], rows[0]["strategy"],
                    float(rows[0]["epsilon"]) + 0.2, 0.01])
    assert main(["compare", str(theory), str(sim), "--out", str(tmp_path / "d")]) == 1
    assert read_table(tmp_path / "d" / "compare.csv")[0]["status"] == "FAIL"
    assert main(["compare", str(theory), str(sim), "--out", str(tmp_path / "e"),
                 "--min-pass-fraction", "0"]) == 0


def test_compare_join_rules():
    th = [{"alpha_syn": "1", "f": "0.6", "gamma_deg": "0", "strategy": "keep-hardest", "epsilon": "0.3"},
          {"alpha_syn": "2", "f": "0.6", "gamma_deg": "0", "strategy": "keep-hardest", "epsilon": "0.15"}]
    sm = [{"alpha_syn": "1.0", "f": "0.6", "gamma_deg": "0.0", "strategy": "keep-hardest",
           "mean_epsilon": "0.31", "std_error": "0.01"},
          {"alpha_syn": "4", "f": "0.6", "gamma_deg": "0", "strategy": "keep-hardest",
           "mean_epsilon": "0.1", "std_error": "0.01"}]
    rows, unmatched = compare_tables(th, sm)
    assert len(rows) == 1 and rows[0][-1] == "PASS" and rows[0][-2] == pytest.approx(-1.0)
    assert len(unmatched) == 2


def test_compare_empty_join_exits_2(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text("alpha_syn,f,gamma_deg,strategy,epsilon\n1,0.6,0,keep-hardest,0.3\n")
    b.write_text("alpha_syn,f,gamma_deg,strategy,mean_epsilon,std_error\n2,0.6,0,keep-hardest,0.2,0.01\n")
    with pytest.raises(SystemExit) as exc:
        main(["compare", str(a), str(b), "--out", str(tmp_path / "o")])
    assert exc.value.code == 2


def test_simulate_single_trial_and_determinism(tmp_path):
    cfg = write_yaml(tmp_path / "s.yaml", SIM_SMALL)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    summary = read_table(tmp_path / "a" / "summary.csv")
    assert len(summary) == 1 and summary[0]["trials"] == "1"
    assert summary[0]["std_error"] == "nan"  # undefined for one trial
    assert len(read_table(tmp_path / "a" / "trials.csv")) == 1
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "3"]) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


DISTILL_SMALL = {"n_per_class": 60, "n_test_per_class": 100, "seeds": [7],
                 "match": {"iterations": 3, "T": 4, "eval_every": 4, "batch_real": 32}}


def test_distill_zero_lambda_gives_zero_deltas(tmp_path):
    cfg = write_yaml(tmp_path / "d.yaml", {**DISTILL_SMALL, "match": {**DISTILL_SMALL["match"], "lambda_0": 0.0}})
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    row = read_table(tmp_path / "a" / "summary_gm.csv")[0]
    assert float(row["delta_grad_norm"]) == 0.0 and float(row["delta_accuracy"]) == 0.0
    a = tmp_path / "a"
    assert (a / "trace_gm_seed7_baseline.csv").read_bytes() == (a / "trace_gm_seed7_sdc.csv").read_bytes()


def test_distill_repeated_seed_is_identical(tmp_path):
    cfg = write_yaml(tmp_path / "d.yaml", {**DISTILL_SMALL, "mode": "tm", "seeds": [7, 7],
                                           "bank": {"checkpoints": 6}})
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    rows = read_table(tmp_path / "a" / "summary_tm.csv")
    assert len(rows) == 2 and rows[0] == rows[1]
    syn = json.loads((tmp_path / "a" / "synthetic_tm_seed7_sdc.json").read_text())
    assert syn["manifest"]["seed"] == 7 and syn["ipc"] == 1


def test_difficulty_hand_built_ensemble(tmp_path):
    cfg = write_yaml(tmp_path / "d.yaml", {
        "data": {"features": [[1.0, 0.0], [-1.0, 0.0], [0.5, 0.5]], "labels": [0, 1, 0]},
        "ensemble": [[[1.0, 0.0], [-1.0, 0.0]], [[-1.0, 0.0], [1.0, 0.0]]],
    })
    # every chi is 0.5, so the rank correlation is undefined
    assert main(["difficulty", "--config", str(cfg), "--out", str(tmp_path), "--allow-partial"]) == 0
    rows = read_table(tmp_path / "difficulty.csv")
    assert [float(r["chi"]) for r in rows] == [0.5, 0.5, 0.5]
    summary = json.loads((tmp_path / "difficulty_summary.json").read_text())
    assert len(summary["ensemble"]) == 2


def test_difficulty_undefined_correlation_exit_code(tmp_path):
    cfg = write_yaml(tmp_path / "d.yaml", {
        "data": {"features": [[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], "labels": [0, 0, 0]},
        "ensemble": [[[1.0, 0.0], [-1.0, 0.0]]],
    })
    assert main(["difficulty", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 1
    assert main(["difficulty", "--config", str(cfg), "--out", str(tmp_path / "b"), "--allow-partial"]) == 0


def test_print_defaults(capsys):
    assert main(["distill", "--print-defaults"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    assert cfg["match"]["lambda_0"] == 0.002 and cfg["mode"] == "gm"


@pytest.mark.parametrize("text,needle", [
    ("grid:\n  alpha: [1]\n", "unknown field 'grid.alpha'"),
    ("grid: [1, 2\n", "line"),
    ("- 1\n- 2\n", "mapping"),
])
def test_bad_config_exits_2(tmp_path, capsys, text, needle):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(text)
    with pytest.raises(SystemExit) as exc:
        main(["theory", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert exc.value.code == 2
    assert needle in capsys.readouterr().err


def test_bad_distill_field_exits_2(tmp_path):
    cfg = write_yaml(tmp_path / "d.yaml", {"match": {"reg_exponent": 3}})
    with pytest.raises(SystemExit) as exc:
        main(["distill", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert exc.value.code == 2
