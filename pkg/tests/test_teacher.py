import copy
import math

import numpy as np
import pytest
import torch

from gendistill.errors import ConfigError, ShapeError
from gendistill.teacher import (
    GENERIC_T_ENCODE,
    LABEL_EFFICIENT_T_ENCODE,
    DiffusionSampler,
    DiffusionTeacher,
    EncodeMode,
    ToyGANSampler,
    UNetConfig,
    denoise_step_features,
    draw_latents,
    encode_features,
    encode_noise,
    load_teacher,
    make_linear_schedule,
    q_sample,
    sample_with_features,
    save_teacher,
    train_teacher,
)

SMALL = UNetConfig(base_channels=32, seed=0)


@pytest.fixture(scope="module")
def teacher():
    return DiffusionTeacher(SMALL).eval()


def test_linear_schedule_endpoints_and_monotonicity():
    s = make_linear_schedule()
    assert s.T == 1000
    assert s.beta[0] == 1e-4 and abs(s.beta[-1] - 2e-2) < 1e-15
    assert np.all(np.diff(s.beta) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert 0 < s.alpha_bar[-1] < s.alpha_bar[0] < 1


def test_alpha_bar_matches_running_product():
    s = make_linear_schedule(T=50)
    acc = 1.0
    for t in range(50):
        acc *= 1.0 - (1e-4 + (2e-2 - 1e-4) * t / 49)
        assert abs(s.alpha_bar[t] - acc) < 1e-14


@pytest.mark.parametrize("args", [(0,), (10, 0.0, 0.01), (10, 0.02, 0.01), (10, 0.1, 1.0)])
def test_bad_schedule(args):
    with pytest.raises(ConfigError):
        make_linear_schedule(*args)


def test_q_sample_monte_carlo_moments():
    s = make_linear_schedule()
    t = 499
    x0 = torch.full((200_000,), 0.7, dtype=torch.float64)
    noise = torch.randn(x0.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    xt = q_sample(s, x0, t, noise)
    ab = s.alpha_bar[t]
    assert abs(xt.mean().item() - math.sqrt(ab) * 0.7) < 5 * math.sqrt((1 - ab) / x0.numel())
    assert abs(xt.var().item() - (1 - ab)) < 0.01


def test_q_sample_is_linear_in_inputs():
    s = make_linear_schedule()
    g = torch.Generator().manual_seed(1)
    x0, e = torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64), torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64)
    a = q_sample(s, x0, 10, torch.zeros_like(e)) + q_sample(s, torch.zeros_like(x0), 10, e)
    assert torch.allclose(a, q_sample(s, x0, 10, e), atol=1e-14)


def test_q_sample_per_sample_timesteps():
    s = make_linear_schedule()
    x0, e = torch.ones(2, 1, 2, 2, dtype=torch.float64), torch.zeros(2, 1, 2, 2, dtype=torch.float64)
    out = q_sample(s, x0, torch.tensor([0, 999]), e)
    assert torch.allclose(out[0], torch.full((1, 2, 2), math.sqrt(s.alpha_bar[0]), dtype=torch.float64))
    assert torch.allclose(out[1], torch.full((1, 2, 2), math.sqrt(s.alpha_bar[999]), dtype=torch.float64))


def test_q_sample_errors():
    s = make_linear_schedule()
    x = torch.zeros(1, 3, 4, 4)
    with pytest.raises(IndexError):
        q_sample(s, x, 1000, x)
    with pytest.raises(IndexError):
        q_sample(s, x, -1, x)
    with pytest.raises(ShapeError):
        q_sample(s, x, 3, torch.zeros(1, 3, 4, 5))


def test_shipped_encode_constants():
    assert GENERIC_T_ENCODE == 150
    assert LABEL_EFFICIENT_T_ENCODE == 50
    assert EncodeMode().t_encode == 150


def test_tap_configuration(teacher):
    assert teacher.tap_points == [3, 6, 9, 12]
    assert teacher.tap_levels == {3: 5, 6: 4, 9: 3, 12: 2}
    with pytest.raises(ConfigError):
        DiffusionTeacher(UNetConfig(base_channels=32, tap_blocks=[1, 2, 9, 12]))


def test_feature_pyramid_shapes(teacher):
    x = torch.randn(2, 3, 64, 64)
    eps, pyr = denoise_step_features(teacher, x, 10)
    assert eps.shape == x.shape
    assert pyr.level_ids == [2, 3, 4, 5]
    assert {l: pyr[l].shape[1] for l in pyr} == teacher.feature_channels
    assert [pyr[l].shape[-1] for l in pyr] == [16, 8, 4, 2]


def test_denoise_step_is_deterministic_and_restores_mode(teacher):
    teacher.train()
    x = torch.randn(1, 3, 32, 32)
    _, a = denoise_step_features(teacher, x, 5)
    _, b = denoise_step_features(teacher, x, 5)
    assert teacher.training
    teacher.eval()
    assert a.allclose(b, atol=0)


def test_t_out_of_range(teacher):
    with pytest.raises(IndexError):
        denoise_step_features(teacher, torch.zeros(1, 3, 32, 32), 1000)
    with pytest.raises(ConfigError):
        encode_features(teacher, torch.zeros(1, 3, 32, 32), EncodeMode(t_encode=0))
    with pytest.raises(ConfigError):
        encode_features(teacher, torch.zeros(1, 3, 32, 32), EncodeMode(t_encode=1001))
    with pytest.raises(ConfigError):
        EncodeMode(variant="ddim").validate(1000)


def test_encode_noise_keying():
    det = EncodeMode("deterministic", 50, seed=0)
    sto = EncodeMode("stochastic", 50, seed=0)
    shape = (3, 4, 4)
    assert torch.equal(encode_noise(det, 3, 0, shape), encode_noise(det, 3, 7, shape))
    assert torch.equal(encode_noise(det, 3, 0, shape), encode_noise(EncodeMode("deterministic", 50, seed=9), 3, 0, shape))
    assert not torch.equal(encode_noise(sto, 3, 0, shape), encode_noise(sto, 3, 1, shape))
    assert not torch.equal(encode_noise(sto, 3, 0, shape), encode_noise(sto, 4, 0, shape))
    assert torch.equal(encode_noise(sto, 3, 5, shape), encode_noise(sto, 3, 5, shape))


def test_encoding_independent_of_batch_composition(teacher):
    # float64 so batch-size dependent conv rounding stays far below the tolerance
    t64 = copy.deepcopy(teacher).double()
    x = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64) * 2 - 1
    mode = EncodeMode("stochastic", 50)
    full = encode_features(t64, x, mode, sample_ids=[10, 11, 12, 13], epoch=2)
    part = encode_features(t64, x[2:3], mode, sample_ids=[12], epoch=2)
    for level in full.level_ids:
        assert torch.allclose(full[level][2:3], part[level], atol=1e-10)
    with pytest.raises(ShapeError):
        encode_features(teacher, x, mode, sample_ids=[1, 2])


def test_teacher_build_is_seeded():
    a, b = DiffusionTeacher(SMALL), DiffusionTeacher(SMALL)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_train_teacher_reduces_held_out_mse_and_round_trips(tmp_path):
    g = torch.Generator().manual_seed(0)
    # smooth blobs are easy to denoise
    base = torch.nn.functional.interpolate(torch.rand(40, 3, 4, 4, generator=g), size=32, mode="bilinear")
    images = base * 2 - 1
    cfg = UNetConfig(base_channels=32, num_res_blocks=1, tap_blocks=[2, 4, 6, 8])
    teacher = train_teacher(images, epochs=3, unet_config=cfg, batch_size=8, lr=2e-3)
    assert len(teacher.history) == 4
    assert teacher.history[-1] < teacher.history[0]
    save_teacher(teacher, tmp_path / "t.pt")
    loaded, payload = load_teacher(tmp_path / "t.pt")
    assert payload["history"] == teacher.history
    x = images[:2]
    _, a = denoise_step_features(teacher, x, 20)
    _, b = denoise_step_features(loaded, x, 20)
    assert a.allclose(b, atol=0)


def test_train_teacher_rejects_bad_data():
    with pytest.raises(ConfigError):
        train_teacher(torch.zeros(0, 3, 32, 32), epochs=1)
    with pytest.raises(ConfigError):
        train_teacher(torch.full((4, 3, 32, 32), 2.0), epochs=1)


def test_zero_epochs_returns_untrained():
    t = train_teacher(torch.zeros(10, 3, 32, 32), epochs=0, unet_config=SMALL)
    ref = DiffusionTeacher(SMALL)
    assert all(torch.equal(p, q) for p, q in zip(t.parameters(), ref.parameters()))
    assert len(t.history) == 1


def test_diffusion_sampler_is_reproducible(teacher):
    sampler = DiffusionSampler(teacher, resolution=32, sampling_steps=4)
    z = draw_latents(sampler, 2, seed=0)
    img_a, pa = sample_with_features(sampler, z)
    img_b, pb = sample_with_features(sampler, z)
    assert torch.equal(img_a, img_b)
    assert img_a.shape == (2, 3, 32, 32)
    assert img_a.min() >= -1 and img_a.max() <= 1
    assert pa.level_ids == [2, 3, 4, 5]
    with pytest.raises(ShapeError):
        sample_with_features(sampler, torch.zeros(2, 3, 16, 16))


def test_draw_latents_resumable():
    gan = ToyGANSampler(latent_dim=8, resolution=32)
    full = draw_latents(gan, 5, seed=1)
    tail = draw_latents(gan, 2, seed=1, offset=3)
    assert torch.equal(full[3:], tail)


def test_gan_sampler_pyramid():
    gan = ToyGANSampler(latent_dim=8, resolution=64, channels=16)
    img, pyr = sample_with_features(gan, draw_latents(gan, 3, seed=0))
    assert img.shape == (3, 3, 64, 64)
    assert pyr.shapes() == {2: (3, 16, 16, 16), 3: (3, 16, 8, 8), 4: (3, 16, 4, 4), 5: (3, 16, 2, 2)}
    with pytest.raises(ShapeError):
        ToyGANSampler(resolution=48)
