import pytest
import torch

from gendistill.backbone import (
    BackboneConfig,
    Segmenter,
    build_backbone,
    forward_features,
    load_backbone,
    save_backbone,
)
from gendistill.errors import ConfigError, ShapeError


def test_same_seed_builds_identical_parameters():
    a = build_backbone(BackboneConfig(seed=7))
    b = build_backbone(BackboneConfig(seed=7))
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb
        assert (pa - pb).abs().max().item() == 0 if pa.is_floating_point() else torch.equal(pa, pb)


def test_different_seed_differs():
    a = build_backbone(BackboneConfig(seed=1))
    b = build_backbone(BackboneConfig(seed=2))
    assert not torch.equal(a.stem[0][0].weight, b.stem[0][0].weight)


def test_build_does_not_consume_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    build_backbone(BackboneConfig())
    assert torch.equal(torch.rand(1), expected)


def test_stage_channels_at_levels():
    bb = build_backbone(BackboneConfig(stage_channels=[32, 64, 128, 256])).eval()
    pyr = forward_features(bb, torch.randn(2, 3, 64, 64))
    assert {l: t.shape[1] for l, t in pyr.items()} == {2: 32, 3: 64, 4: 128, 5: 256}
    assert [t.shape[-1] for t in pyr.levels.values()] == [16, 8, 4, 2]
    assert all(t.shape[0] == 2 for t in pyr.levels.values())


def test_rectangular_input():
    bb = build_backbone(BackboneConfig()).eval()
    pyr = bb(torch.randn(1, 3, 96, 64))
    assert tuple(pyr[2].shape[-2:]) == (24, 16)


def test_non_divisible_input_raises():
    bb = build_backbone(BackboneConfig())
    with pytest.raises(ShapeError):
        bb(torch.randn(1, 3, 50, 64))


@pytest.mark.parametrize("bad", [
    dict(blocks_per_stage=[1, 0, 1, 1]),
    dict(stage_channels=[32, -1, 64, 64]),
    dict(stem_channels=0),
    dict(stage_channels=[32, 64, 128]),
])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        build_backbone(BackboneConfig(**bad))


def test_eval_forward_is_pure():
    bb = build_backbone(BackboneConfig()).eval()
    x = torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        a, b = bb(x), bb(x)
    assert all(torch.equal(a[l], b[l]) for l in a)


def test_shapes_independent_of_values():
    bb = build_backbone(BackboneConfig(stage_channels=[8, 8, 16, 16], stem_channels=8)).eval()
    gen = torch.Generator().manual_seed(0)
    ref = None
    with torch.no_grad():
        for i in range(100):
            x = torch.randn(1, 3, 32, 32, generator=gen) * (i + 1)
            shapes = bb(x).shapes()
            ref = ref or shapes
            assert shapes == ref


def test_checkpoint_round_trip(tmp_path):
    bb = build_backbone(BackboneConfig(seed=3))
    save_backbone(bb, tmp_path / "b.pt")
    loaded, payload = load_backbone(tmp_path / "b.pt")
    assert payload["format_version"] == 1
    assert payload["config"]["seed"] == 3
    for k, v in bb.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])


def test_segmenter_full_resolution_logits():
    model = Segmenter(build_backbone(BackboneConfig()), num_classes=5).eval()
    assert model(torch.randn(2, 3, 64, 64)).shape == (2, 5, 64, 64)
