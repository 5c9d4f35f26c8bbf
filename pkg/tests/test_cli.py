from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from datadrop import persist
from datadrop.cli import main, parse_schedule

LOGISTIC = '{"kind": "logistic", "input_dim": 3, "output_dim": 2, "l2_reg": 0.01}'
SOFTMAX = '{"kind": "softmax", "input_dim": 2, "output_dim": 3, "l2_reg": 0.01}'
TRAIN = "synth:n=80,dim=3,classes=2,sep=2.0,flip=0.1,seed=1"
VAL = "synth:n=10,dim=3,classes=2,sep=2.0,flip=0,seed=9,center_seed=1,id_offset=1000"
PLANTED = "synth:n=300,dim=2,classes=3,sep=3.0,flip=0.1,seed=0"
PLANTED_VAL = "synth:n=60,dim=2,classes=3,sep=3.0,flip=0,seed=1000,center_seed=0,id_offset=10000"
SCHEDULE = "0:0.1,15:0.01,25:0.001"


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def run_train(out, *extra):
    return main(["train", "--data", TRAIN, "--spec", LOGISTIC, "--epochs", "10",
                 "--standardize", "--out", str(out), *extra])


def test_parse_schedule():
    assert parse_schedule("0.1") == ((0, 0.1),)
    assert parse_schedule("0:0.1,15:0.01") == ((0, 0.1), (15, 0.01))
    assert parse_schedule([[0, 0.5]]) == ((0, 0.5),)


def test_train_writes_checkpoint_and_manifest(tmp_path):
    assert run_train(tmp_path / "a") == 0
    m = manifest(tmp_path / "a")
    assert m["exit_status"] == 0 and m["command"] == "train"
    assert (tmp_path / "a" / "model.ckpt").exists()
    for key in ("config_snapshot", "input_checksums", "output_paths", "wall_time_seconds"):
        assert key in m


def test_rerun_gives_byte_identical_checkpoint(tmp_path):
    run_train(tmp_path / "a")
    run_train(tmp_path / "b")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    run_train(tmp_path / "c", "--seed", "5")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() != (tmp_path / "c" / "model.ckpt").read_bytes()


def test_missing_data_exits_1_with_usage(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "datadrop", "train", "--spec", LOGISTIC,
                           "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert proc.returncode == 1
    assert "usage:" in proc.stderr and "--data" in proc.stderr


def test_config_errors_exit_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.csv"), "--spec", LOGISTIC,
                 "--out", str(tmp_path / "a")]) == 1
    assert manifest(tmp_path / "a")["exit_status"] == 1
    assert main(["train", "--data", TRAIN, "--spec", "{not json", "--out", str(tmp_path / "b")]) == 1
    assert main(["train", "--data", TRAIN, "--spec", SOFTMAX, "--out", str(tmp_path / "c")]) == 1


def test_output_directory_not_overwritten(tmp_path):
    run_train(tmp_path / "a")
    before = (tmp_path / "a" / "manifest.json").read_bytes()
    assert run_train(tmp_path / "a") == 1
    assert (tmp_path / "a" / "manifest.json").read_bytes() == before
    assert run_train(tmp_path / "a", "--overwrite") == 0


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 2, "batch_size": 7}))
    main(["train", "--data", TRAIN, "--spec", LOGISTIC, "--config", str(cfg), "--batch-size", "9",
          "--out", str(tmp_path / "a")])
    snap = manifest(tmp_path / "a")["config_snapshot"]
    assert snap["epochs"] == 2 and snap["batch_size"] == 9
    cfg.write_text(json.dumps({"epoch": 2}))
    assert main(["train", "--data", TRAIN, "--spec", LOGISTIC, "--config", str(cfg),
                 "--out", str(tmp_path / "b")]) == 1


def test_numeric_failure_exits_2(tmp_path):
    spec = '{"kind": "linear-mse", "input_dim": 3, "output_dim": 1}'
    data = tmp_path / "big.csv"
    data.write_text("a,b,c,label\n1e200,1e200,1e200,1\n-1e200,1e200,1,2\n")
    assert main(["train", "--data", str(data), "--spec", spec, "--lr", "10",
                 "--out", str(tmp_path / "a")]) == 2
    assert manifest(tmp_path / "a")["exit_status"] == 2


def test_score_single_validation_sample(tmp_path):
    run_train(tmp_path / "t")
    csv_path = tmp_path / "one.csv"
    csv_path.write_text("a,b,c,label\n0.1,0.2,-0.3,1\n")
    assert main(["score", "--checkpoint", str(tmp_path / "t" / "model.ckpt"), "--train-data", TRAIN,
                 "--val-data", str(csv_path), "--out", str(tmp_path / "s")]) == 0
    header = json.loads((tmp_path / "s" / "influence.jsonl").read_text().splitlines()[0])
    assert header["type"] == "header" and header["ihvp_solve_count"] == 1 and header["k"] == 1


def test_score_corrupt_checkpoint_exits_1(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"DDROPCKP" + b"\x00" * 5)
    assert main(["score", "--checkpoint", str(bad), "--train-data", TRAIN, "--val-data", VAL,
                 "--out", str(tmp_path / "s")]) == 1
    assert main(["score", "--checkpoint", str(tmp_path / "missing.ckpt"), "--train-data", TRAIN,
                 "--val-data", VAL, "--out", str(tmp_path / "s2")]) == 1


def test_cg_and_lissa_rank_correlate(tmp_path):
    run_train(tmp_path / "t")
    ckpt = str(tmp_path / "t" / "model.ckpt")
    totals = {}
    for method in ("cg", "lissa"):
        out = tmp_path / method
        assert main(["score", "--checkpoint", ckpt, "--train-data", TRAIN, "--val-data", VAL,
                     "--standardize", "--ihvp", method, "--out", str(out)]) == 0
        totals[method] = persist.load_report(out / "influence.jsonl").totals
    rho = stats.spearmanr(totals["cg"], totals["lissa"]).statistic
    assert rho >= 0.95


def test_two_round_run_directory(tmp_path):
    out = tmp_path / "r"
    assert main(["two-round", "--data", PLANTED, "--val-data", PLANTED_VAL, "--spec", SOFTMAX,
                 "--lr", SCHEDULE, "--standardize", "--rounds", "4", "--out", str(out)]) == 0
    for name in ("round1.ckpt", "round2.ckpt", "influence.jsonl", "dropped_ids.txt",
                 "metrics.json", "round_counts.csv", "manifest.json"):
        assert (out / name).exists(), name
    res = manifest(out)["results"]
    dropped = persist.load_ids(out / "dropped_ids.txt")
    assert res["reduced_train_size"] == res["train_size"] - len(dropped)
    rows = list(csv.DictReader(open(out / "round_counts.csv")))
    assert 1 <= len(rows) <= 4
    assert int(rows[0]["unfavorable"]) == len(dropped)


def test_two_round_noop_gives_identical_checkpoints(tmp_path):
    data = tmp_path / "dup.csv"
    data.write_text("a,b,label\n" + "0.4,-1.2,1\n" * 10)
    val = tmp_path / "val.csv"
    val.write_text("a,b,label\n0.4,-1.2,1\n")
    out = tmp_path / "r"
    assert main(["two-round", "--data", str(data), "--val-data", str(val), "--spec", SOFTMAX,
                 "--epochs", "5", "--out", str(out)]) == 0
    assert (out / "round1.ckpt").read_bytes() == (out / "round2.ckpt").read_bytes()
    assert (out / "dropped_ids.txt").read_text() == ""


def test_two_round_empty_reduced_set_exits_2_with_report(tmp_path):
    spec = '{"kind": "logistic", "input_dim": 1, "output_dim": 2, "l2_reg": 0.1}'
    (tmp_path / "tr.csv").write_text("a,label\n1.0,0\n")
    (tmp_path / "va.csv").write_text("a,label\n1.0,1\n")
    out = tmp_path / "r"
    assert main(["two-round", "--data", str(tmp_path / "tr.csv"), "--val-data",
                 str(tmp_path / "va.csv"), "--spec", spec, "--epochs", "3", "--out", str(out)]) == 2
    assert (out / "influence.jsonl").exists()
    assert manifest(out)["exit_status"] == 2


def test_two_round_carves_validation(tmp_path):
    out = tmp_path / "r"
    assert main(["two-round", "--data", PLANTED, "--spec", SOFTMAX, "--lr", SCHEDULE,
                 "--standardize", "--out", str(out)]) == 0
    res = manifest(out)["results"]
    assert res["train_size"] == 270 and json.loads((out / "metrics.json").read_text())["val_size"] == 30


def test_failed_later_round_keeps_partial_counts(tmp_path):
    # unconverged training on noisy validation: round 4 flags every remaining sample
    out = tmp_path / "r"
    assert main(["two-round", "--data", PLANTED, "--spec", SOFTMAX, "--epochs", "10",
                 "--standardize", "--rounds", "4", "--out", str(out)]) == 2
    rows = list(csv.DictReader(open(out / "round_counts.csv")))
    assert [int(r["unfavorable"]) for r in rows] == manifest(out)["results"]["round_counts"]
    assert len(rows) == 3 and (out / "round2.ckpt").exists()


def test_loo_oracle_command(tmp_path):
    train = "synth:n=12,dim=3,classes=2,sep=2.0,flip=0.1,seed=0"
    val = "synth:n=5,dim=3,classes=2,sep=2.0,flip=0,seed=100,center_seed=0,id_offset=1000"
    out = tmp_path / "l"
    assert main(["loo-oracle", "--data", train, "--val-data", val, "--spec", LOGISTIC,
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "loo.csv")))
    assert len(rows) == 12
    assert json.loads((out / "summary.json").read_text())["n"] == 12
    assert main(["loo-oracle", "--data", train, "--val-data", val, "--spec", LOGISTIC,
                 "--max-samples", "5", "--out", str(tmp_path / "cap")]) == 1
    assert main(["loo-oracle", "--data", train, "--val-data", val, "--spec", LOGISTIC,
                 "--max-samples", "5", "--force", "--out", str(tmp_path / "forced")]) == 0


def test_check_passes_and_fault_exits_3(tmp_path, capsys):
    assert main(["check"]) == 0
    assert "FAIL" not in capsys.readouterr().out
    assert main(["check", "--inject-fault", "--out", str(tmp_path / "c")]) == 3
    assert "FAIL" in capsys.readouterr().out
    assert manifest(tmp_path / "c")["exit_status"] == 3


def test_check_pass_set_stable_across_seeds(capsys):
    sets = []
    for seed in range(10):
        assert main(["check", "--seed", str(seed), "--draws", "4"]) == 0
        lines = capsys.readouterr().out.splitlines()
        sets.append({line.split()[1] for line in lines if line.startswith("PASS")})
    assert all(s == sets[0] for s in sets)


def test_workers_flag_does_not_change_report(tmp_path):
    run_train(tmp_path / "t")
    ckpt = str(tmp_path / "t" / "model.ckpt")
    for w in ("1", "3"):
        main(["score", "--checkpoint", ckpt, "--train-data", TRAIN, "--val-data", VAL,
              "--workers", w, "--out", str(tmp_path / f"w{w}")])
    a = (tmp_path / "w1" / "influence.jsonl").read_bytes()
    assert a == (tmp_path / "w3" / "influence.jsonl").read_bytes()


@pytest.mark.parametrize("arg", ["idx:only_one_path", "synth:n=10,bogus=1"])
def test_bad_data_specs(tmp_path, arg):
    assert main(["train", "--data", arg, "--spec", LOGISTIC, "--out", str(tmp_path / "x")]) == 1


def test_idx_input(tmp_path):
    from datadrop.data import save_idx
    rng = np.random.default_rng(0)
    save_idx(rng.integers(0, 256, (20, 2, 2)), np.arange(20) % 2, tmp_path / "i", tmp_path / "l")
    spec = '{"kind": "logistic", "input_dim": 4, "output_dim": 2}'
    assert main(["train", "--data", f"idx:{tmp_path / 'i'},{tmp_path / 'l'}", "--spec", spec,
                 "--epochs", "1", "--out", str(tmp_path / "o")]) == 0
