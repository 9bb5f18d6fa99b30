from __future__ import annotations

from pathlib import Path

import pytest

from nscmerge.bench.cli import main

SMALL_CFG = """\
classification_tasks = 2
regression_tasks = 1
train_size = 64
val_size = 32
test_size = 32
model_dim = 16
mlp_dim = 32
seq_len = 4
vocab = 8
lora_rank = 2
epochs = 1
steps = 3
batch_size = 8
pretrain_steps = 8
pretrain_tasks = 2
"""


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _pipeline(root: Path, cfg: Path) -> None:
    c = ["--config", str(cfg), "--seed", "1"]
    assert main(["gen-tasks", *c, "--out", str(root / "data")]) == 0
    for t in ("cls0", "cls1", "reg0"):
        base = ["--base", str(root / "ad_cls0" / "base")] if t != "cls0" else []
        assert main(["train-adapter", *c, "--data", str(root / "data"), "--task", t, *base,
                     "--out", str(root / f"ad_{t}")]) == 0
    adapters = [str(root / f"ad_{t}" / "adapter") for t in ("cls0", "cls1", "reg0")]
    base = ["--base", str(root / "ad_cls0" / "base")]
    for method in ("ta", "ties", "dare-ties", "svd", "linear", "knots-ties", "nsc"):
        assert main(["merge", *c, "--method", method, *base, "--adapters", *adapters,
                     "--data", str(root / "data"), "--out", str(root / f"m_{method}")]) == 0
    assert main(["merge", *c, "--method", "adamerging", *base, "--adapters", *adapters[:2],
                 "--data", str(root / "data"), "--out", str(root / "m_ada")]) == 0
    assert main(["evaluate", *c, *base, "--adapters", *adapters, "--data", str(root / "data"),
                 "--merged", str(root / "m_nsc" / "merged"), "--out", str(root / "eval")]) == 0
    assert main(["analyze-nullspace", *c, *base, "--adapter", adapters[2], "--data", str(root / "data"),
                 "--out", str(root / "ns")]) == 0


def test_every_command_is_byte_deterministic(tmp_path, capsys):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CFG)
    _pipeline(tmp_path / "one", cfg)
    _pipeline(tmp_path / "two", cfg)
    one, two = _tree(tmp_path / "one"), _tree(tmp_path / "two")
    assert one.keys() == two.keys()
    for k in one:
        assert one[k] == two[k], k
    for expected in ("m_nsc/trajectory.csv", "m_ta/grid.csv", "m_ta/merged/tensors.bin",
                     "eval/scores.csv", "ns/ratios.csv", "ad_reg0/history.csv", "data/tasks.csv"):
        assert expected in one


def test_run_experiment_is_byte_deterministic(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CFG + "methods = ta, nsc\n")
    for name in ("a", "b"):
        assert main(["run-experiment", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_fixed_scale_and_nsc_flags(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text(SMALL_CFG)
    c = ["--config", str(cfg)]
    main(["gen-tasks", *c, "--out", str(tmp_path / "d")])
    main(["train-adapter", *c, "--data", str(tmp_path / "d"), "--task", "cls0", "--out", str(tmp_path / "a")])
    base = ["--base", str(tmp_path / "a" / "base"), "--adapters", str(tmp_path / "a" / "adapter")]
    assert main(["merge", *c, "--method", "ta", *base, "--scale", "0.25", "--out", str(tmp_path / "ta")]) == 0
    assert (tmp_path / "ta" / "coefficients.txt").read_text().splitlines()[0] == "merged/b0.q = 0.25"
    assert main(["merge", *c, "--method", "nsc", *base, "--data", str(tmp_path / "d"), "--steps", "2",
                 "--lr", "0.01", "--lambda-init", "0.5", "--target-blocks", "all", "--target-proj", "ov",
                 "--out", str(tmp_path / "nsc")]) == 0
    assert len((tmp_path / "nsc" / "trajectory.csv").read_text().splitlines()) == 3


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["gen-tasks", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert main(["gen-tasks", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["evaluate", "--base", str(tmp_path / "nope"), "--adapters", "x", "--data", "y",
                 "--out", str(tmp_path / "e")]) == 2
    with pytest.raises(SystemExit):
        main(["merge", "--method", "unknown", "--base", "b", "--adapters", "a", "--out", "o"])
