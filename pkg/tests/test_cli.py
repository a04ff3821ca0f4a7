import csv
import io
import json

import numpy as np
import pytest

from hierinfer.cli import COMMANDS, ENV_CONFIG, main

MODEL_70B = {"model_size_bytes": 140 * 10**9, "layers": 32, "s_max": 1024, "d_emb": 4096}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_help_exits_zero(capsys, command):
    code, out, _ = run(capsys, command, "--help")
    assert code == 0 and "usage:" in out


def test_tile_happy_path(capsys):
    code, out, _ = run(capsys, "tile", "--m", "4096", "--k", "2048", "--n", "4096", "--precision", "fp32")
    assert code == 0
    doc = json.loads(out)
    assert doc["manifest"]["subcommand"] == "tile"
    assert {"m_2", "k_2", "n_2", "dataflow"} <= set(doc["result"]["plan"])


def test_plan_infeasible_exit_one(capsys, tmp_path):
    model = tmp_path / "m.json"
    model.write_text(json.dumps(MODEL_70B))
    code, out, err = run(capsys, "plan", "--model", str(model), "--clu-total", "1")
    assert code == 1 and out == "" and "cluster budget" in err


def test_plan_success(capsys, tmp_path):
    model = tmp_path / "m.json"
    model.write_text(json.dumps(MODEL_70B))
    code, out, _ = run(capsys, "plan", "--model", str(model), "--clu-total", "64", "--enumerate")
    assert code == 0
    res = json.loads(out)["result"]
    assert res["feasibility"]["feasible"] and res["enumeration"]["staged_gap"] >= 0


def test_unknown_subcommand_and_flag(capsys):
    code, _, err = run(capsys, "tiel")
    assert code == 2 and "'tile'" in err
    code, _, err = run(capsys, "tile", "--mm", "4")
    assert code == 2 and "--m" in err


def test_unknown_config_section(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("hardwar:\n  ddr_bytes: 1\n")
    code, _, err = run(capsys, "tile", "--config", str(cfg), "--m", "8", "--k", "8", "--n", "8")
    assert code == 2 and "hardware" in err


def test_unknown_pool_key(capsys, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("pool:\n  buffer_slot: 2\n")
    code, _, err = run(capsys, "simulate-pipeline", "--config", str(cfg), "--requests", "3")
    assert code == 2 and "buffer_slot" in err


ROUND_TRIPS = [
    ["tile", "--m", "300", "--k", "512", "--n", "1000", "--precision", "fp16"],
    ["simulate-pipeline", "--requests", "12", "--seed", "5", "--mean-interarrival", "0.01"],
    ["exec", "--op", "linear-rope", "--m", "12", "--k", "32", "--n", "64", "--seed", "3"],
    ["attn-io", "--s", "512", "1024", "--format", "json"],
    ["kernel-check", "--format", "json"],
]


@pytest.mark.parametrize("argv", ROUND_TRIPS, ids=lambda a: a[0])
def test_round_trip_byte_identical(capsys, tmp_path, monkeypatch, argv):
    first = tmp_path / "first.json"
    assert main(argv + (["--format", "json"] if "--format" not in argv else []) + ["--out", str(first)]) == 0
    again = tmp_path / "again.json"
    assert main([argv[0], "--config", str(first), "--format", "json", "--out", str(again)]) == 0
    assert again.read_bytes() == first.read_bytes()
    monkeypatch.setenv(ENV_CONFIG, str(first))
    third = tmp_path / "third.json"
    assert main([argv[0], "--format", "json", "--out", str(third)]) == 0
    assert third.read_bytes() == first.read_bytes()
    capsys.readouterr()


def test_report_single_run(capsys, tmp_path):
    out = tmp_path / "sim.json"
    assert main(["simulate-pipeline", "--requests", "5", "--out", str(out)]) == 0
    code, text, _ = run(capsys, "report", str(out))
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 1 and rows[0]["subcommand"] == "simulate-pipeline"
    assert len(rows[0]["manifest_digest"]) == 64


def test_ablation_batching_never_hurts(capsys):
    code, text, _ = run(capsys, "report", "--ablation", "--requests", "40", "--seed", "2")
    assert code == 0
    rows = {r["stage"]: float(r["throughput_tokens_per_s"]) for r in csv.DictReader(io.StringIO(text))}
    assert list(rows) == ["A0 baseline", "A1 +fusion", "A2 +batching", "A3 +P-B-D"]
    assert rows["A2 +batching"] >= rows["A1 +fusion"] >= rows["A0 baseline"]


def test_kernel_check_hazard_exit_one(capsys):
    code, out, _ = run(capsys, "kernel-check")
    assert code == 0 and "0 hazard(s)" in out
    code, out, _ = run(capsys, "kernel-check", "--latency", "sldh=12")
    assert code == 1


def test_timeline_csv(capsys, tmp_path):
    tl = tmp_path / "tl.csv"
    code, _, _ = run(capsys, "simulate-pipeline", "--requests", "4", "--timeline", str(tl))
    assert code == 0
    rows = list(csv.DictReader(tl.open()))
    assert rows and set(rows[0]) == {"time", "stage", "kind", "ref", "buffer_occupancy"}


def test_exec_with_npy_inputs(capsys, tmp_path):
    rng = np.random.default_rng(0)
    np.save(tmp_path / "x.npy", rng.standard_normal((10, 24)).astype(np.float32))
    np.save(tmp_path / "w.npy", rng.standard_normal((24, 40)).astype(np.float32))
    code, out, _ = run(capsys, "exec", "--op", "gemm", "--x", str(tmp_path / "x.npy"),
                       "--w", str(tmp_path / "w.npy"))
    res = json.loads(out)["result"]
    assert code == 0 and res["within_tolerance"] and res["trace_matches_analytic"]


def test_text_and_csv_formats(capsys):
    code, out, _ = run(capsys, "tile", "--m", "64", "--k", "64", "--n", "64", "--format", "text")
    assert code == 0 and "manifest sha256:" in out
    code, out, _ = run(capsys, "attn-io", "--s", "1024")
    assert code == 0 and "manifest_digest" in out.splitlines()[0]
