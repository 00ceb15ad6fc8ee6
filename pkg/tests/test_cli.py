import json
import os
import time

import pytest

from fedaug.cli import main

TINY = """
[dataset]
kind = synthetic
classes = 3
n_per_class = 30
input_dim = 8
spread = 1.0

[partition]
clients = 2
alpha = 1.0

[schedule]
rounds = 6
local_steps = 4
batch_size = 16
lr = 0.05
eval_every = 3
seed = 3
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return str(path)


def run_cli(*args):
    return main(list(args))


def test_run_writes_artifacts_and_exits_zero(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "run1")
    start = time.perf_counter()
    assert run_cli("run", "--config", tiny_config, "--out", out) == 0
    assert time.perf_counter() - start < 10.0
    for name in ("metrics.csv", "report.json", "summary.txt", "mean_acc.tsv", "worst_acc.tsv"):
        assert os.path.exists(os.path.join(out, name))
    assert "final_mean_acc=" in capsys.readouterr().out


def test_run_is_byte_deterministic(tiny_config, tmp_path):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    assert run_cli("run", "--config", tiny_config, "--seed", "7", "--out", out1) == 0
    assert run_cli("run", "--config", tiny_config, "--seed", "7", "--out", out2) == 0
    csv1 = open(os.path.join(out1, "metrics.csv"), "rb").read()
    csv2 = open(os.path.join(out2, "metrics.csv"), "rb").read()
    assert csv1 == csv2


def test_run_seed_changes_metrics(tiny_config, tmp_path):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    run_cli("run", "--config", tiny_config, "--seed", "7", "--out", out1)
    run_cli("run", "--config", tiny_config, "--seed", "8", "--out", out2)
    assert open(f"{out1}/metrics.csv").read() != open(f"{out2}/metrics.csv").read()


def test_config_error_exit_code(tiny_config, tmp_path, capsys):
    code = run_cli(
        "run", "--config", tiny_config, "--set", "partition.alpha=-1",
        "--out", str(tmp_path / "x"),
    )
    assert code == 2
    assert "partition.alpha" in capsys.readouterr().err


def test_missing_dataset_exit_code_distinct(tiny_config, tmp_path, capsys):
    code = run_cli(
        "run", "--config", tiny_config,
        "--set", "dataset.kind=mnist",
        "--set", "dataset.images=/missing.idx",
        "--set", "dataset.labels=/missing2.idx",
        "--out", str(tmp_path / "x"),
    )
    assert code == 3
    assert "not found" in capsys.readouterr().err


def test_overwrite_requires_force(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert run_cli("run", "--config", tiny_config, "--out", out) == 0
    assert run_cli("run", "--config", tiny_config, "--out", out) == 2
    assert "--force" in capsys.readouterr().err
    assert run_cli("run", "--config", tiny_config, "--out", out, "--force") == 0


def test_out_root_env_var(tiny_config, tmp_path, monkeypatch, capsys):
    root = str(tmp_path / "root")
    monkeypatch.setenv("FEDAUG_OUT", root)
    assert run_cli("run", "--config", tiny_config) == 0
    out_line = capsys.readouterr().out
    assert root in out_line
    assert os.path.exists(os.path.join(root, "synthetic-fedavg-s3", "metrics.csv"))


def test_compare_two_runs_table(tiny_config, tmp_path, capsys):
    out1, out2 = str(tmp_path / "fa"), str(tmp_path / "fg")
    run_cli("run", "--config", tiny_config, "--out", out1)
    capsys.readouterr()
    run_cli("run", "--config", tiny_config, "--set", "algorithm.kind=fedaug", "--out", out2)
    capsys.readouterr()
    assert run_cli("compare", out1, out2, "--threshold", "0.5") == 0
    table = capsys.readouterr().out
    assert "speedup" in table and "fedavg" in table and "fedaug" in table
    assert "1.0x" in table


def test_compare_never_reached_renders_dash(tiny_config, tmp_path, capsys):
    out1, out2 = str(tmp_path / "fa"), str(tmp_path / "fg")
    run_cli("run", "--config", tiny_config, "--out", out1)
    run_cli("run", "--config", tiny_config, "--seed", "9", "--out", out2)
    capsys.readouterr()
    assert run_cli("compare", out1, out2, "--threshold", "1.0") == 0
    table = capsys.readouterr().out
    assert "-" in table.splitlines()[1]


def test_compare_single_dir_usage_error(tiny_config, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run_cli("compare", str(tmp_path))
    assert exc.value.code == 2


def test_compare_incompatible_cadence(tiny_config, tmp_path, capsys):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    run_cli("run", "--config", tiny_config, "--out", out1)
    run_cli("run", "--config", tiny_config, "--set", "schedule.eval_every=2", "--out", out2)
    capsys.readouterr()
    assert run_cli("compare", out1, out2) == 2
    assert "cadence" in capsys.readouterr().err


def test_probe_writes_report_and_features(tiny_config, tmp_path, capsys):
    out = str(tmp_path / "probe")
    code = run_cli(
        "probe", "--config", tiny_config,
        "--set", "probe.classes=0,1",
        "--set", "probe.epochs=2",
        "--set", "probe.pairs=200",
        "--out", out,
    )
    assert code == 0
    report = json.load(open(os.path.join(out, "probe_report.json")))
    assert set(report) >= {"classifier_bias", "s_cross", "s_local", "histogram", "notes"}
    for name in (
        "features_local_seen.csv",
        "features_local_unseen.csv",
        "features_global_seen.csv",
        "features_global_unseen.csv",
    ):
        assert os.path.exists(os.path.join(out, name))
    assert "classifier_bias=" in capsys.readouterr().out


def test_probe_refuses_overwrite_without_force(tiny_config, tmp_path):
    out = str(tmp_path / "probe")
    args = (
        "probe", "--config", tiny_config, "--set", "probe.classes=0,1",
        "--set", "probe.epochs=1", "--set", "probe.pairs=100", "--out", out,
    )
    assert run_cli(*args) == 0
    assert run_cli(*args) == 2
    assert run_cli(*args, "--force") == 0


def test_run_without_config_uses_defaults(tmp_path):
    # empty config = valid defaults; shrink the schedule so the test is fast
    out = str(tmp_path / "d")
    code = run_cli(
        "run", "--set", "schedule.rounds=2", "--set", "schedule.local_steps=2",
        "--set", "dataset.n_per_class=20", "--set", "dataset.input_dim=6",
        "--set", "partition.clients=3", "--out", out,
    )
    assert code == 0
    cfg = json.load(open(os.path.join(out, "report.json")))["config"]
    assert cfg["partition"]["alpha"] == 0.1
    assert cfg["algorithm"]["kind"] == "fedavg"
