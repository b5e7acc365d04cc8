import json

import pytest

from ndp4nd import cli, experiment


def write_config(tmp_path, **overrides):
    base = dict(
        preset="mutualistic_desk", seed=1, n_train=3, n_test=2, epochs=1,
        batch_size=2,
        scenario_overrides={"topology_kinds": ["grid"],
                            "topology_params": {"rows": 3, "cols": 3},
                            "t_observe": 10.0, "t_max": 20.0},
        observations={"target_ratio": 12.0, "noise_sigma": 0.0,
                      "noisy_initial": False, "count": None},
        eval_mc_samples=2,
    )
    base.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(base))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    config = write_config(tmp)
    assert cli.main(["generate", "--config", str(config),
                     "--out", str(tmp / "data")]) == 0
    assert cli.main(["train", "--config", str(config),
                     "--dataset", str(tmp / "data" / "train.jsonl"),
                     "--out", str(tmp / "train")]) == 0
    return tmp, config


def test_generate_and_train_outputs(workspace, capsys):
    tmp, config = workspace
    assert (tmp / "data" / "train.jsonl").exists()
    assert (tmp / "train" / "checkpoint.ndpk").exists()
    assert (tmp / "train" / "loss.csv").exists()


def test_evaluate_command(workspace, capsys):
    tmp, config = workspace
    code = cli.main(["evaluate", "--config", str(config),
                     "--checkpoint", str(tmp / "train" / "checkpoint.ndpk"),
                     "--dataset", str(tmp / "data" / "test.jsonl"),
                     "--out", str(tmp / "eval")])
    assert code == 0
    out = capsys.readouterr().out
    assert "mae_interp" in out
    assert (tmp / "eval" / "report.csv").exists()


def test_adapt_command(workspace):
    tmp, config = workspace
    code = cli.main(["adapt", "--config", str(config),
                     "--checkpoint", str(tmp / "train" / "checkpoint.ndpk"),
                     "--dataset", str(tmp / "data" / "test.jsonl"),
                     "--out", str(tmp / "adapt"),
                     "--ratios", "2", "10", "25"])
    assert code == 0
    for k in range(3):
        assert (tmp / "adapt" / f"stage_{k}_predictions.csv").exists()


def test_sweep_command(workspace):
    tmp, config = workspace
    code = cli.main(["sweep", "--config", str(config),
                     "--checkpoint", str(tmp / "train" / "checkpoint.ndpk"),
                     "--dataset", str(tmp / "data" / "test.jsonl"),
                     "--out", str(tmp / "sweep"),
                     "--axis", "noise_sigma", "--grid", "0", "1"])
    assert code == 0
    assert len((tmp / "sweep" / "sweep.csv").read_text().splitlines()) == 3


def test_seed_override_changes_output(tmp_path, workspace):
    _, config = workspace
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["generate", "--config", str(config), "--seed", "77",
                     "--out", str(out_a)]) == 0
    assert cli.main(["generate", "--config", str(config), "--seed", "78",
                     "--out", str(out_b)]) == 0
    assert (out_a / "train.jsonl").read_bytes() != (out_b / "train.jsonl").read_bytes()
    resolved = json.loads((out_a / "config.resolved.json").read_text())
    assert resolved["seed"] == 77


def test_missing_config_exits_2(tmp_path, capsys):
    code = cli.main(["generate", "--config", str(tmp_path / "absent.json"),
                     "--out", str(tmp_path / "out")])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_invalid_config_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"preset": "unknown_scenario"}')
    code = cli.main(["generate", "--config", str(path),
                     "--out", str(tmp_path / "out")])
    assert code == 2


def test_missing_dataset_exits_3(tmp_path, workspace, capsys):
    _, config = workspace
    code = cli.main(["train", "--config", str(config),
                     "--dataset", str(tmp_path / "absent.jsonl"),
                     "--out", str(tmp_path / "out")])
    assert code == 3
    assert "data error" in capsys.readouterr().err


def test_corrupt_dataset_exits_3(tmp_path, workspace):
    _, config = workspace
    bad = tmp_path / "bad.jsonl"
    bad.write_text("this is not json\n")
    code = cli.main(["train", "--config", str(config),
                     "--dataset", str(bad), "--out", str(tmp_path / "out")])
    assert code == 3


def test_rerun_byte_identical(tmp_path, workspace):
    # Determinism contract: identical (config, seed) -> byte-identical numeric
    # outputs for every command.
    tmp, config = workspace
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert cli.main(["evaluate", "--config", str(config),
                         "--checkpoint", str(tmp / "train" / "checkpoint.ndpk"),
                         "--dataset", str(tmp / "data" / "test.jsonl"),
                         "--out", str(out)]) == 0
        outs.append(out)
    for fname in ("report.csv", "report.json"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
