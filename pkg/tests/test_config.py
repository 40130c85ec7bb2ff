import json
from pathlib import Path

import pytest

from gendistill.config import ExperimentConfig, apply_overrides, from_dict, load_config
from gendistill.errors import ConfigError

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.json"


def test_defaults_validate_and_mirror_library_defaults():
    cfg = load_config()
    assert cfg.distill.lambda_at == 10.0 and cfg.distill.tau == 4.0
    assert cfg.regressor.pool_scales == [1, 2, 3, 6] and cfg.regressor.fpn_channels == 256
    assert cfg.interpreter.fuse_channels == 256 and cfg.interpreter.groups == 32
    assert cfg.dataset.t_encode == 150 and cfg.interpreter.t_encode == 50


def test_desk_config_loads():
    cfg = load_config(DESK)
    assert cfg.dataset.resolution == 64
    assert cfg.regressor.pool_scales == [1, 2]
    assert cfg.teacher.unet.base_channels == 32


def test_unknown_key_named(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"distill": {"lamda_at": 3}}))
    with pytest.raises(ConfigError, match="lamda_at"):
        load_config(p)


def test_unknown_section():
    with pytest.raises(ConfigError, match="optimiser"):
        from_dict(ExperimentConfig, {"optimiser": {}})


def test_overrides():
    cfg = load_config(DESK, ["distill.lambda_at=0", "run.pretrain.epochs=3", "dataset.encode_variant=deterministic",
                             "regressor.pool_scales=[1]"])
    assert cfg.distill.lambda_at == 0.0
    assert cfg.run.pretrain.epochs == 3
    assert cfg.dataset.encode_variant == "deterministic"
    assert cfg.regressor.pool_scales == [1]


def test_override_syntax_errors():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["distill.lambda_at"])
    with pytest.raises(ConfigError):
        apply_overrides({"output_dir": "x"}, ["output_dir.sub=1"])


@pytest.mark.parametrize("override", [
    "distill.tau=0", "distill.p=two", "dataset.resolution=48", "regressor.pool_scales=[1,2,3,6]",
    "dataset.t_encode=0", "run.pretrain.batch_size=0", "distill.variant=fancy", "interpreter.fuse_channels=50",
    "run.freeze=1",
])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        load_config(DESK, [override])


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_json_round_trip():
    cfg = load_config(DESK)
    again = from_dict(ExperimentConfig, json.loads(cfg.to_json()))
    assert again == cfg
