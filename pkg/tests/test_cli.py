import csv
import json

import pytest
import yaml

from conftest import linear_dataset
from softctl.cli import main
from softctl.model import save_dataset

FISH = {
    "name": "fish_tiny",
    "dt": 0.05,
    "duration": 0.5,
    "trials": 2,
    "seed": 5,
    "plant": {"kind": "fish"},
    "model": {
        "hidden": [8],
        "collect": {"trajectories": 4, "steps": 10, "seed": 0},
        "train": {"epochs": 3, "batch_size": 16, "horizon": 2, "seed": 0},
    },
    "planner": {"samples": 8, "horizon": 3, "stddev": [0.1, 0.1]},
    "task": {
        "reference": {"kind": "circle", "size": 0.5, "speed": 0.1},
        "track_weight": [1.0, 1.0],
        "input_weight": [0.01],
    },
    "barriers": [{"name": "rock", "kind": "obstacle", "center": [2.0, 2.0], "radius": 0.1}],
    "filter": {"alpha": 10.0},
    "metrics": {"asf": ["rock"]},
}


@pytest.fixture
def scenario(tmp_path):
    p = tmp_path / "fish_tiny.yaml"
    p.write_text(yaml.safe_dump(FISH))
    return p


def test_run_null_scenario(tmp_path, capsys):
    assert main(["run", "--scenario", "null", "--out", str(tmp_path / "o")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "o" / "summary.csv")))
    assert len(rows) == 2
    assert all(r["interventions"] == "0" for r in rows)
    assert "eps_bar" in capsys.readouterr().out


def test_unknown_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**FISH, "bogus": 1}))
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_scenario_exit_2(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "nope.yaml")]) == 2


def test_bad_flag_exit_2():
    assert main(["run", "--scenario", "null", "--controller", "lqr"]) == 2
    assert main(["run", "--scenario", "null", "--seed", "-1"]) == 2


def test_collect_zero_trajectories(tmp_path, scenario, caplog):
    out = tmp_path / "d.jsonl"
    assert main(["collect", "--scenario", str(scenario), "--trajectories", "0", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["trajectories"] == 0
    assert "no trajectories" in caplog.text


def test_collect_record_count_and_bytes(tmp_path, scenario):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for out in (a, b):
        assert main(["collect", "--scenario", str(scenario), "--trajectories", "3", "--steps", "7", "--out", str(out)]) == 0
    records = [json.loads(line) for line in a.read_text().splitlines()[1:]]
    assert len(records) == 3 * (7 + 1)
    assert a.read_bytes() == b.read_bytes()


def test_train_deterministic_and_calibrated(tmp_path, scenario, capsys):
    data = tmp_path / "lin.jsonl"
    save_dataset(data, linear_dataset(n_traj=6, steps=30))
    outs = [tmp_path / "m1.json", tmp_path / "m2.json"]
    for out in outs:
        assert main(["train", "--scenario", str(scenario), "--dataset", str(data), "--out", str(out)]) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    text = capsys.readouterr().out.splitlines()
    res_max = float(next(l for l in text if l.startswith("validation residual")).split()[3])
    eps = float(next(l for l in text if l.startswith("eps_bar")).split()[1])
    assert res_max <= eps / 1.25 * (1 + 1e-5)


def test_train_missing_dataset_exit_2(tmp_path, scenario):
    assert main(["train", "--scenario", str(scenario), "--dataset", str(tmp_path / "none.jsonl")]) == 2


def test_calibrate_rewrites_bound(tmp_path, scenario, capsys):
    data = tmp_path / "lin.jsonl"
    save_dataset(data, linear_dataset(n_traj=4, steps=20))
    ckpt = tmp_path / "m.json"
    assert main(["train", "--scenario", str(scenario), "--dataset", str(data), "--out", str(ckpt)]) == 0
    before = json.loads(ckpt.read_text())["error_bound"]
    assert main(["calibrate", "--checkpoint", str(ckpt), "--dataset", str(data), "--factor", "2.5"]) == 0
    after = json.loads(ckpt.read_text())["error_bound"]
    assert after["value"] == pytest.approx(2 * before["value"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_3(tmp_path, scenario):
    data = tmp_path / "d.jsonl"
    ckpt = tmp_path / "m.json"
    assert main(["collect", "--scenario", str(scenario), "--out", str(data)]) == 0
    assert main(["train", "--scenario", str(scenario), "--dataset", str(data), "--out", str(ckpt)]) == 0
    doc = json.loads(ckpt.read_text())
    doc["weights"] = [[[1e200] * len(row) for row in w] for w in doc["weights"]]
    doc["out_scale"] = [1e200] * len(doc["out_scale"])
    ckpt.write_text(json.dumps(doc))
    assert main(["run", "--scenario", str(scenario), "--checkpoint", str(ckpt), "--out", str(tmp_path / "r")]) == 3


def test_snapshot_reproduces_outputs(tmp_path, scenario):
    cache = str(tmp_path / "cache")
    first, second = tmp_path / "r1", tmp_path / "r2"
    assert main(["run", "--scenario", str(scenario), "--cache-dir", cache, "--out", str(first)]) == 0
    snap = first / "resolved_config.yaml"
    assert main(["run", "--scenario", str(snap), "--cache-dir", cache, "--out", str(second)]) == 0
    assert (first / "summary.csv").read_bytes() == (second / "summary.csv").read_bytes()


def test_overrides_land_in_snapshot(tmp_path, scenario):
    out = tmp_path / "r"
    args = ["run", "--scenario", str(scenario), "--seed", "99", "--trials", "1", "--cache-dir", str(tmp_path / "c")]
    assert main(args + ["--out", str(out)]) == 0
    snap = yaml.safe_load((out / "resolved_config.yaml").read_text())
    assert snap["seed"] == 99 and snap["trials"] == 1
    assert len((out / "summary.csv").read_text().splitlines()) == 2


def test_compare_paired_deltas(tmp_path, scenario):
    out = tmp_path / "cmp"
    args = ["compare", "--scenario", str(scenario), "--compare", "framework,no-acbf", "--cache-dir", str(tmp_path / "c")]
    assert main(args + ["--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "compare.csv")))
    assert [r["seed"] for r in rows] == [
        r["seed"] for r in csv.DictReader(open(out / "framework" / "summary.csv"))
    ]
    for r in rows:
        a, b = float(r["min_asf_a"]), float(r["min_asf_b"])
        assert float(r["min_asf_delta"]) == pytest.approx(b - a)
    assert (out / "no-acbf" / "summary.csv").exists()


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SOFTCTL_OUT", str(tmp_path / "env"))
    assert main(["run", "--scenario", "null"]) == 0
    assert (tmp_path / "env" / "summary.csv").exists()
