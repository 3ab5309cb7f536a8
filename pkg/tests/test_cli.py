import json
import os

import numpy as np
import pytest

from milestone_kit.cli import main

OU_COMMITTOR = {
    "model": {"name": "ou_1d", "beta": 1.0},
    "grid": {"box": [[-3.0, 3.0]], "nodes": [513]},
    "ab": {"A": {"type": "halfspace", "axis": 0, "threshold": -2.0, "side": -1},
           "B": {"type": "halfspace", "axis": 0, "threshold": 2.0, "side": 1}},
    "milestones": {"source": "committor", "levels": [0.8, 0.65, 0.5, 0.35, 0.2]},
    "sampling": {"dt": 1e-3, "seed": 7, "mode": "long", "total_time": 400.0},
}

OU_LINEAR = {
    "model": {"name": "ou_1d", "beta": 1.0},
    "milestones": {"source": "linear", "points": [-0.5, 0.0, 0.5]},
    "sampling": {"dt": 1e-3, "seed": 11, "mode": "long", "total_time": 300.0},
}


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_missing_config_exits_1(tmp_path, capsys):
    code = main(["sample", "-c", str(tmp_path / "nope.json")])
    assert code == 1
    assert "nope.json" in capsys.readouterr().err


def test_config_without_seed_exits_1(tmp_path, capsys):
    cfg = json.loads(json.dumps(OU_LINEAR))
    del cfg["sampling"]["seed"]
    code = main(["sample", "-c", _write(tmp_path, cfg)])
    assert code == 1
    assert "seed" in capsys.readouterr().err


def test_committor_command_writes_artifacts(tmp_path):
    out = tmp_path / "out"
    code = main(["committor", "-c", _write(tmp_path, OU_COMMITTOR),
                 "--out", str(out)])
    assert code == 0
    assert (out / "q_minus.bin").exists()
    assert (out / "q_minus.csv").exists()
    z = np.loadtxt(out / "Z.csv", delimiter=",", skiprows=1)
    assert z.shape == (5, 2)
    report = json.loads((out / "committor_report.json").read_text())
    assert "config_hash" in report and "version" in report
    assert (out / "run_meta.json").exists()


def test_committor_unattainable_level_exits_2(tmp_path, capsys):
    cfg = json.loads(json.dumps(OU_COMMITTOR))
    cfg["milestones"]["levels"] = [0.999999, 0.5]
    code = main(["committor", "-c", _write(tmp_path, cfg),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    assert "0.999999" in capsys.readouterr().err


def test_sample_deterministic_reports(tmp_path):
    cfg_path = _write(tmp_path, OU_LINEAR)
    outs = []
    for name in ("o1", "o2"):
        out = tmp_path / name
        assert main(["sample", "-c", cfg_path, "--out", str(out)]) == 0
        outs.append((out / "stats.json").read_bytes())
    assert outs[0] == outs[1]
    # overriding the seed changes the report
    out3 = tmp_path / "o3"
    assert main(["sample", "-c", cfg_path, "--out", str(out3),
                 "--seed", "1234"]) == 0
    assert (out3 / "stats.json").read_bytes() != outs[0]


def test_sample_undersampled_exit_code(tmp_path, capsys):
    cfg = json.loads(json.dumps(OU_LINEAR))
    cfg["sampling"]["total_time"] = 5.0
    cfg_path = _write(tmp_path, cfg)
    assert main(["sample", "-c", cfg_path, "--out", str(tmp_path / "u1")]) == 2
    assert main(["sample", "-c", cfg_path, "--out", str(tmp_path / "u2"),
                 "--force"]) == 0


def test_mfpt_methods_and_zscores(tmp_path):
    cfg = json.loads(json.dumps(OU_LINEAR))
    cfg["milestones"]["points"] = [-1.0, 0.0, 1.0]
    cfg["sampling"]["total_time"] = 2000.0
    cfg["target"] = {"i": 0, "j": 2}
    cfg["mfpt"] = {"methods": ["optimal", "empirical", "oracle"],
                   "n_transitions": 600}
    out = tmp_path / "m"
    assert main(["mfpt", "-c", _write(tmp_path, cfg), "--out", str(out)]) == 0
    report = json.loads((out / "mfpt_report.json").read_text())
    methods = report["methods"]
    assert set(methods) == {"optimal", "empirical", "oracle"}
    oracle = methods["oracle"]["value"]
    for name in ("optimal", "empirical"):
        assert abs(methods[name]["value"] - oracle) / oracle < 0.25
    assert "optimal_vs_empirical" in report["z_scores"]


def test_mfpt_oracle_rejected_for_2d(tmp_path, capsys):
    cfg = {
        "model": {"name": "double_well_2d", "beta": 1.0},
        "grid": {"box": [[-2.2, 2.2], [-1.6, 1.6]], "nodes": [65, 65]},
        "ab": {"A": {"type": "ball", "center": [-1.0, 0.0], "radius": 0.2},
               "B": {"type": "ball", "center": [1.0, 0.0], "radius": 0.2}},
        "milestones": {"source": "committor", "levels": [0.7, 0.3]},
        "sampling": {"dt": 5e-4, "seed": 3},
        "mfpt": {"methods": ["oracle"]},
    }
    code = main(["mfpt", "-c", _write(tmp_path, cfg), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "oracle" in capsys.readouterr().err


def test_exact_command(tmp_path):
    cfg = json.loads(json.dumps(OU_COMMITTOR))
    cfg["milestones"]["levels"] = [0.7, 0.5, 0.3]
    cfg["kernel"] = {"samples_per_bin": 60}
    cfg["target"] = {"j": 2}
    out = tmp_path / "e"
    assert main(["exact", "-c", _write(tmp_path, cfg), "--out", str(out)]) == 0
    report = json.loads((out / "exact_report.json").read_text())
    assert report["target"] == 2
    assert report["values"][2] == 0.0
    assert report["values"][0] > 0
    assert (out / "kernel_0.csv").exists()


def test_validate_subset(tmp_path):
    cfg = json.loads(json.dumps(OU_LINEAR))
    cfg["validate"] = {"criteria": ["A2"]}
    out = tmp_path / "v"
    assert main(["validate", "-c", _write(tmp_path, cfg), "--out", str(out)]) == 0
    report = json.loads((out / "validate_report.json").read_text())
    assert report["results"]["A2"]["passed"] is True
