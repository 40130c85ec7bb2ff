import json

import pytest
import torch

from gendistill.cli import main

TINY = {
    "teacher": {"unet": {"base_channels": 32, "num_res_blocks": 1, "tap_blocks": [2, 4, 6, 8]}, "epochs": 1, "batch_size": 8},
    "dataset": {"resolution": 32, "n_unlabeled": 8, "n_labeled": 8, "n_test": 4, "t_encode": 50},
    "backbone": {"stem_channels": 8, "stage_channels": [8, 16, 16, 16]},
    "regressor": {"fpn_channels": 16, "pool_scales": [1]},
    "interpreter": {"fuse_channels": 32, "n_labeled": 4, "epochs": 1,
                    "run": {"epochs": 1, "warmup_epochs": 0, "batch_size": 4}},
    "run": {"pretrain": {"epochs": 2, "warmup_epochs": 1, "batch_size": 4},
            "finetune": {"epochs": 1, "warmup_epochs": 0, "batch_size": 4}},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["train-teacher", "--config", str(cfg), "--output", str(root / "runs"), "--run-id", "teacher"]) == 0
    return root, cfg, root / "runs" / "teacher" / "teacher.pt"


def _args(cfg, root, *extra):
    return ["--config", str(cfg), "--output", str(root / "runs"), *extra]


def test_train_teacher_outputs(workspace):
    root, _, ckpt = workspace
    assert ckpt.exists()
    m = json.loads((root / "runs/teacher/metrics.json").read_text())
    assert m["config"]["command"] == "train-teacher"
    assert len(m["losses"]) == 2


def test_pretrain_writes_artifacts_and_is_reproducible(workspace):
    root, cfg, ckpt = workspace
    for out in ("a", "b"):
        assert main(["pretrain", "--config", str(cfg), "--output", str(root / out), "--seed", "7", "--run-id", "p",
                     "--set", f"teacher.checkpoint={ckpt}"]) == 0
    d = root / "a" / "p"
    assert {"checkpoint.pt", "metrics.json", "losses.csv", "timing.json"} <= {p.name for p in d.iterdir()}
    assert (d / "metrics.json").read_bytes() == (root / "b/p/metrics.json").read_bytes()
    a, b = torch.load(d / "checkpoint.pt"), torch.load(root / "b/p/checkpoint.pt")
    assert all(torch.equal(v, b["state_dict"][k]) for k, v in a["state_dict"].items())
    m = json.loads((d / "metrics.json").read_text())
    assert m["seeds"]["run"] == 7
    assert m["config"]["experiment"]["teacher"]["checkpoint"] == str(ckpt)


def test_default_run_id(workspace):
    root, cfg, ckpt = workspace
    assert main(["pretrain", *_args(cfg, root, "--seed", "3", "--set", f"teacher.checkpoint={ckpt}",
                                    "--set", "distill.variant=mse")]) == 0
    assert (root / "runs" / "pretrain-mse-seed3" / "metrics.json").exists()


def test_interpreter_then_mix_pretrain(workspace):
    root, cfg, ckpt = workspace
    assert main(["train-interpreter", *_args(cfg, root, "--run-id", "interp", "--set", f"teacher.checkpoint={ckpt}")]) == 0
    interp = root / "runs/interp/interpreter.pt"
    assert interp.exists()
    assert main(["pretrain", *_args(cfg, root, "--run-id", "mix", "--set", f"teacher.checkpoint={ckpt}",
                                    "--set", f"interpreter.checkpoint={interp}", "--set", "distill.variant=mix")]) == 0
    rows = (root / "runs/mix/losses.csv").read_text().splitlines()
    assert float(rows[-1].split(",")[4]) > 0  # ld column populated


def test_finetune_from_checkpoint_and_random(workspace):
    root, cfg, ckpt = workspace
    main(["pretrain", *_args(cfg, root, "--run-id", "pre", "--set", f"teacher.checkpoint={ckpt}")])
    assert main(["finetune", *_args(cfg, root, "--run-id", "ft", "--set", f"backbone.checkpoint={root / 'runs/pre/checkpoint.pt'}")]) == 0
    assert main(["finetune", *_args(cfg, root, "--run-id", "ft-rand")]) == 0
    for rid in ("ft", "ft-rand"):
        m = json.loads((root / "runs" / rid / "metrics.json").read_text())
        assert 0 <= m["final"]["miou"] <= 100


def test_sweep_encode_mode(workspace):
    root, cfg, ckpt = workspace
    assert main(["sweep", *_args(cfg, root, "--run-id", "sw", "--set", f"teacher.checkpoint={ckpt}",
                                 "--axis", "encode_mode", "--values", "deterministic,stochastic")]) == 0
    table = (root / "runs/sw/table.md").read_text().splitlines()
    assert len(table) == 4
    assert (root / "runs/sw/deterministic/pretrain/metrics.json").exists()


def test_export_cache(workspace):
    root, cfg, ckpt = workspace
    assert main(["export-cache", *_args(cfg, root, "--run-id", "cache", "--set", f"teacher.checkpoint={ckpt}")]) == 0
    path = root / "runs/cache/features.bin"
    assert path.exists()
    assert main(["pretrain", *_args(cfg, root, "--run-id", "offline", "--set", f"teacher.checkpoint={ckpt}",
                                    "--set", "dataset.cache=offline", "--set", f"dataset.cache_path={path}")]) == 0


def test_report(workspace):
    root, cfg, ckpt = workspace
    main(["pretrain", *_args(cfg, root, "--run-id", "rep", "--set", f"teacher.checkpoint={ckpt}")])
    out = root / "report"
    assert main(["report", "--runs", str(root / "runs"), "--output", str(out)]) == 0
    summary = (out / "summary.md").read_text()
    assert "| rep | pretrain |" in summary
    assert any(p.suffix == ".png" for p in (out / "plots").iterdir())


def test_unknown_key_exit_one(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"distill": {"lamda_at": 1.0}}))
    assert main(["pretrain", "--config", str(cfg)]) == 1
    assert "lamda_at" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["fly"], [], ["pretrain", "--bogus"], ["sweep", "--axis", "depth", "--values", "1"],
                                  ["pretrain", "--seed", "x"]])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_help_exit_zero():
    assert main(["--help"]) == 0


def test_missing_checkpoint_is_validation_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["finetune", "--config", str(cfg), "--output", str(tmp_path), "--set", "dataset.source=/nope.pt"]) == 1


def test_runtime_failure_exit_two(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    bad = tmp_path / "broken.pt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["finetune", "--config", str(cfg), "--output", str(tmp_path), "--set", f"backbone.checkpoint={bad}"]) == 2
