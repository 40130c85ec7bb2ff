import pytest
import torch

from gendistill.data import generate_shapes_dataset
from gendistill.errors import ConfigError, ShapeError
from gendistill.interpreter import (
    FeatureInterpreter,
    InterpreterConfig,
    build_interpreter,
    emit_soft_labels,
    state_hash,
    train_interpreter,
)
from gendistill.pyramid import FeaturePyramid
from gendistill.teacher import DiffusionTeacher, UNetConfig

TC = {2: 32, 3: 32, 4: 64, 5: 64}


@pytest.fixture(scope="module")
def teacher():
    return DiffusionTeacher(UNetConfig(base_channels=32)).eval()


def _pyramid(batch=2, res=64):
    g = torch.Generator().manual_seed(0)
    return FeaturePyramid({l: torch.randn(batch, TC[l], res >> l, res >> l, generator=g) for l in (2, 3, 4, 5)}, (res, res))


def test_defaults():
    c = InterpreterConfig()
    assert (c.fuse_channels, c.groups, c.dropout_rate) == (256, 32, 0.1)


def test_output_at_stride_four():
    interp = build_interpreter(InterpreterConfig(num_classes=5, fuse_channels=64, teacher_channels=TC)).eval()
    assert interp(_pyramid()).shape == (2, 5, 16, 16)


def test_missing_level():
    interp = build_interpreter(InterpreterConfig(fuse_channels=64, teacher_channels=TC))
    pyr = _pyramid()
    with pytest.raises(ShapeError):
        interp(FeaturePyramid({l: pyr[l] for l in (3, 4, 5)}, pyr.input_resolution))


@pytest.mark.parametrize("kw", [dict(fuse_channels=50), dict(dropout_rate=1.0), dict(num_classes=1)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        FeatureInterpreter(InterpreterConfig(teacher_channels=TC, **kw))


def test_soft_labels_deterministic_and_mode_restoring():
    interp = build_interpreter(InterpreterConfig(fuse_channels=64, teacher_channels=TC)).train()
    pyr = _pyramid()
    a, b = emit_soft_labels(interp, pyr), emit_soft_labels(interp, pyr)
    assert torch.equal(a, b) and not a.requires_grad
    assert interp.training


def test_seeded_build_hash():
    cfg = InterpreterConfig(fuse_channels=64, teacher_channels=TC)
    assert state_hash(build_interpreter(cfg, 1)) == state_hash(build_interpreter(cfg, 1))
    assert state_hash(build_interpreter(cfg, 1)) != state_hash(build_interpreter(cfg, 2))


def test_training_leaves_teacher_untouched_and_fits(teacher):
    images, masks = generate_shapes_dataset(8, resolution=64, seed=0)
    before = state_hash(teacher)
    cfg = InterpreterConfig(fuse_channels=32, teacher_channels=teacher.feature_channels)
    interp = train_interpreter(teacher, images, masks, cfg, epochs=3, seed=0)
    assert state_hash(teacher) == before
    assert len(interp.history) == 4
    assert all(p.grad is None for p in teacher.parameters())
    again = train_interpreter(teacher, images, masks, cfg, epochs=3, seed=0)
    assert state_hash(interp) == state_hash(again)


def test_zero_labels_rejected(teacher):
    with pytest.raises(ConfigError):
        train_interpreter(teacher, torch.zeros(0, 3, 64, 64), torch.zeros(0, 64, 64, dtype=torch.long),
                          InterpreterConfig(teacher_channels=teacher.feature_channels, fuse_channels=32), epochs=1)
