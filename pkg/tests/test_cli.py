import csv
import json
import struct
from pathlib import Path

import numpy as np
import pytest
import yaml

from fedtype import cli
from fedtype.federation import RoundMetrics
from fedtype.nn import load_params, param_count

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = {
    "seed": 0,
    "rounds": 2,
    "clients": 2,
    "sample_ratio": 1.0,
    "alpha": 1.0,
    "data": {"classes": 3, "dim": 4, "n_per_class": 60, "spread": 4.0},
    "model": {"proxy_hidden": [6], "private_pool": [[16], [8, 8]]},
    "uarl": {"local_epochs": 2, "lr": 0.01},
}


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def merged(**changes):
    cfg = yaml.safe_load(yaml.safe_dump(MINIMAL))
    for dotted, value in changes.items():
        node = cfg
        *parents, leaf = dotted.split("__")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return cfg


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_minimal_run_writes_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", str(write_cfg(tmp_path, MINIMAL)), "--out", str(out)]) == 0
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == ("round,global_acc,proxy_acc,private_acc,mean_eta,"
                      "mean_set_size_proxy,mean_set_size_private,bytes_up,bytes_down")
    rows = read_rows(out / "metrics.csv")
    assert len(rows) == 2
    parsed = [RoundMetrics.from_row(r) for r in rows]
    assert [m.round for m in parsed] == [1, 2]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["seed"] == 0
    assert summary["final"] == {k: getattr(parsed[-1], k) for k in RoundMetrics.columns()}
    assert summary["config"]["data"]["n_per_class"] == 60
    ckpt = load_params(out / "checkpoints" / "round_2.params")
    assert ckpt.shape == (param_count([4, 6, 3]),)
    assert "private=" in capsys.readouterr().out


def test_rows_roundtrip_losslessly(tmp_path):
    out = tmp_path / "o"
    cli.main(["run", str(write_cfg(tmp_path, MINIMAL)), "--out", str(out)])
    for row in read_rows(out / "metrics.csv"):
        m = RoundMetrics.from_row(row)
        assert m.to_row() == list(row.values())


def test_identical_runs_are_byte_identical(tmp_path):
    path = write_cfg(tmp_path, MINIMAL)
    cli.main(["run", str(path), "--out", str(tmp_path / "a")])
    cli.main(["run", str(path), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_seed_override_changes_run(tmp_path):
    path = write_cfg(tmp_path, MINIMAL)
    cli.main(["run", str(path), "--out", str(tmp_path / "a")])
    cli.main(["run", str(path), "--out", str(tmp_path / "b"), "--seed", "7"])
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["seed"] == 7
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()


def test_parallel_clients_flag_keeps_results(tmp_path):
    path = write_cfg(tmp_path, MINIMAL)
    cli.main(["run", str(path), "--out", str(tmp_path / "a")])
    cli.main(["run", str(path), "--out", str(tmp_path / "b"), "--parallel-clients", "2"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_ablation_sweep_writes_one_file_per_mode(tmp_path):
    cfg = merged(sweep__modes=["full", "sym", "topk", "eta1", "g05"], rounds=1)
    out = tmp_path / "sweep"
    assert cli.main(["run", str(write_cfg(tmp_path, cfg)), "--out", str(out)]) == 0
    for mode in ("full", "sym", "topk", "eta1", "g05"):
        assert len(read_rows(out / mode / "metrics.csv")) == 1
        assert json.loads((out / mode / "summary.json").read_text())["mode"] == mode


def test_validate_reference_configs():
    for name in ("minimal.yaml", "desk.yaml", "ablation.yaml"):
        assert cli.main(["validate", str(CONFIGS / name)]) == 0


def test_validate_clean_config_prints_nothing(tmp_path, capsys):
    assert cli.main(["validate", str(write_cfg(tmp_path, MINIMAL))]) == 0
    assert capsys.readouterr().out == ""


def test_validate_names_bad_sample_ratio(tmp_path, capsys):
    assert cli.main(["validate", str(write_cfg(tmp_path, merged(sample_ratio=0)))]) != 0
    assert "sample_ratio" in capsys.readouterr().out


def test_validate_names_bad_theta(tmp_path, capsys):
    assert cli.main(["validate", str(write_cfg(tmp_path, merged(conformal__theta=1.5)))]) != 0
    assert "conformal.theta" in capsys.readouterr().out


def test_validate_lists_every_problem(tmp_path, capsys):
    cfg = merged(sample_ratio=0, conformal__theta=1.5, rounds=0, uarl__mode="bogus", colour="blue")
    assert cli.main(["validate", str(write_cfg(tmp_path, cfg))]) == 2
    lines = capsys.readouterr().out.splitlines()
    for field in ("sample_ratio", "conformal.theta", "rounds", "uarl.mode", "colour"):
        assert any(line.startswith(field + ":") for line in lines), field


def test_validate_unreadable_file(tmp_path, capsys):
    assert cli.main(["validate", str(tmp_path / "missing.yaml")]) != 0
    assert "cannot read" in capsys.readouterr().out


def test_validate_bad_yaml(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("rounds: [1, 2\n")
    assert cli.main(["validate", str(path)]) != 0


def test_exponent_without_dot_is_a_number(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(MINIMAL).replace("lr: 0.01", "lr: 1e-2"))
    cfg, problems = cli.load_config(path)
    assert problems == [] and cfg["uarl"]["lr"] == 0.01
    assert cli.validate_config(cfg) == []


def test_run_rejects_invalid_config(tmp_path, capsys):
    out = tmp_path / "never"
    assert cli.main(["run", str(write_cfg(tmp_path, merged(sample_ratio=2.0))), "--out", str(out)]) == 2
    assert "sample_ratio" in capsys.readouterr().err
    assert not out.exists()


def test_numerical_failure_keeps_partial_metrics(tmp_path, monkeypatch):
    from fedtype import federation

    real = federation.run_round

    def flaky(server, clients, cfg, rng=None):
        if server.round == 1:
            raise FloatingPointError("client 0: non-finite training loss")
        return real(server, clients, cfg, rng)

    monkeypatch.setattr(federation, "run_round", flaky)
    out = tmp_path / "o"
    assert cli.main(["run", str(write_cfg(tmp_path, MINIMAL)), "--out", str(out)]) == 1
    assert len(read_rows(out / "metrics.csv")) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "failed" and summary["rounds_completed"] == 1


def test_idx_config_runs(tmp_path):
    rng = np.random.default_rng(0)
    n = 60
    labels = np.repeat([0, 1], n // 2).astype(np.uint8)
    images = np.zeros((n, 2, 2), dtype=np.uint8)
    images[labels == 0, 0, 0] = 255
    images[labels == 1, 1, 1] = 255
    images = np.clip(images.astype(int) + rng.integers(0, 40, images.shape), 0, 255).astype(np.uint8)
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x803, n, 2, 2) + images.tobytes())
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, n) + labels.tobytes())
    cfg = merged(clients=2, rounds=1)
    cfg["data"] = {"kind": "idx", "images": "img", "labels": "lab"}
    path = write_cfg(tmp_path, cfg)
    assert cli.main(["validate", str(path)]) == 0
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == 0
    assert len(read_rows(tmp_path / "o" / "metrics.csv")) == 1


def test_infeasible_partition_is_reported(tmp_path, capsys):
    cfg = merged(clients=30)
    assert cli.main(["run", str(write_cfg(tmp_path, cfg)), "--out", str(tmp_path / "o")]) != 0


def test_log_level_from_environment(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("FEDTYPE_LOG", "info")
    with caplog.at_level("INFO"):
        cli.main(["run", str(write_cfg(tmp_path, merged(rounds=1))), "--out", str(tmp_path / "o")])
    assert any("round 1" in r.getMessage() for r in caplog.records)


def test_missing_subcommand_exits():
    with pytest.raises(SystemExit):
        cli.main([])
