"""Desk-scale diffusion teacher: noise schedule, forward noising, a UNet with
decoder feature taps, and samplers that record features while generating."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from gendistill.errors import ConfigError, ShapeError
from gendistill.pyramid import LEVELS, FeaturePyramid
from gendistill.rng import keyed_generator

CHECKPOINT_VERSION = 1

# Encoding steps for generic-domain pretraining vs label-efficient runs.
GENERIC_T_ENCODE = 150
LABEL_EFFICIENT_T_ENCODE = 50


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta


def make_linear_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T, beta, alpha_bar)


def _check_t(schedule: NoiseSchedule, t) -> None:
    ts = torch.as_tensor(t)
    if ts.numel() and (int(ts.min()) < 0 or int(ts.max()) >= schedule.T):
        raise IndexError(f"timestep {t} outside schedule [0, {schedule.T - 1}]")


def q_sample(schedule: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """Forward-noise ``x0`` to step index ``t`` (int, or one int per batch item)."""
    if noise.shape != x0.shape:
        raise ShapeError(f"noise {tuple(noise.shape)} does not match x0 {tuple(x0.shape)}")
    _check_t(schedule, t)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=torch.float64)[torch.as_tensor(t)]
    ab = ab.to(x0.dtype)
    if ab.dim() == 1:
        ab = ab.view(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


# --------------------------------------------------------------------------- UNet


def _groups(ch: int) -> int:
    return math.gcd(32, ch)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, ch: int, head_channels: int = 64):
        super().__init__()
        self.heads = max(1, ch // head_channels)
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv1d(ch, 3 * ch, 1)
        self.proj = nn.Conv1d(ch, ch, 1)

    def forward(self, x, emb=None):
        B, C, H, W = x.shape
        qkv = self.qkv(self.norm(x).reshape(B, C, H * W))
        q, k, v = qkv.reshape(B * self.heads, 3 * C // self.heads, H * W).chunk(3, dim=1)
        scale = (C // self.heads) ** -0.25
        w = torch.softmax(torch.einsum("bct,bcs->bts", q * scale, k * scale), dim=-1)
        h = torch.einsum("bts,bcs->bct", w, v).reshape(B, C, H * W)
        return x + self.proj(h).reshape(B, C, H, W)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x, emb=None):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb=None):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class PassThrough(nn.Module):
    def forward(self, x, emb=None):
        return x


class Sequential(nn.ModuleList):
    def forward(self, x, emb):
        for m in self:
            x = m(x, emb)
        return x


@dataclass
class UNetConfig:
    base_channels: int = 64
    channel_mult: list[int] = field(default_factory=lambda: [1, 1, 2, 2])
    num_res_blocks: int = 2
    attention_strides: list[int] = field(default_factory=lambda: [16, 32])
    dropout: float = 0.0
    patch: int = 4  # stem stride; the first resolution sits at stride 4
    tap_blocks: list[int] = field(default_factory=lambda: [3, 6, 9, 12])
    seed: int = 0


class UNet(nn.Module):
    """Patchified epsilon-prediction UNet.

    Resolutions run at strides patch * 2**i. Decoder ("output") blocks are
    numbered from 1 starting at the deepest resolution; features are tapped
    after the block's residual/attention layers and before any upsampling.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        emb_dim = 4 * ch
        self.time_mlp = nn.Sequential(nn.Linear(ch, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.stem = nn.Conv2d(3, ch, cfg.patch, stride=cfg.patch)
        strides = [cfg.patch * 2**i for i in range(len(cfg.channel_mult))]
        self.strides = strides

        self.input_blocks = nn.ModuleList()
        skip_ch = [ch]
        cur = ch
        for i, mult in enumerate(cfg.channel_mult):
            for _ in range(cfg.num_res_blocks):
                layers = [ResBlock(cur, ch * mult, emb_dim, cfg.dropout)]
                cur = ch * mult
                if strides[i] in cfg.attention_strides:
                    layers.append(SelfAttention(cur))
                self.input_blocks.append(Sequential(layers))
                skip_ch.append(cur)
            if i != len(cfg.channel_mult) - 1:
                self.input_blocks.append(Sequential([Downsample(cur)]))
                skip_ch.append(cur)

        self.middle = Sequential(
            [ResBlock(cur, cur, emb_dim, cfg.dropout), SelfAttention(cur), ResBlock(cur, cur, emb_dim, cfg.dropout)]
        )

        self.output_blocks = nn.ModuleList()
        self.output_upsample = nn.ModuleList()
        self.block_stride: list[int] = []
        self.block_channels: list[int] = []
        for i, mult in reversed(list(enumerate(cfg.channel_mult))):
            for j in range(cfg.num_res_blocks + 1):
                layers = [ResBlock(cur + skip_ch.pop(), ch * mult, emb_dim, cfg.dropout)]
                cur = ch * mult
                if strides[i] in cfg.attention_strides:
                    layers.append(SelfAttention(cur))
                self.output_blocks.append(Sequential(layers))
                last = j == cfg.num_res_blocks and i != 0
                self.output_upsample.append(Upsample(cur) if last else PassThrough())
                self.block_stride.append(strides[i])
                self.block_channels.append(cur)

        self.out_norm = nn.GroupNorm(_groups(cur), cur)
        self.out_conv = nn.Conv2d(cur, 3 * cfg.patch**2, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        self.tap_levels = {}
        for b in cfg.tap_blocks:
            if not 1 <= b <= len(self.output_blocks):
                raise ConfigError(f"tap block {b} outside 1..{len(self.output_blocks)}")
            self.tap_levels[b] = int(math.log2(self.block_stride[b - 1]))
        if sorted(self.tap_levels.values()) != list(LEVELS):
            raise ConfigError(f"taps {cfg.tap_blocks} map to levels {self.tap_levels}, need {LEVELS} once each")

    @property
    def tap_channels(self) -> dict[int, int]:
        return {self.tap_levels[b]: self.block_channels[b - 1] for b in self.cfg.tap_blocks}

    def forward(self, x: torch.Tensor, t: torch.Tensor, return_features: bool = False):
        H, W = x.shape[-2:]
        if H % 32 or W % 32:
            raise ShapeError(f"input {H}x{W} is not divisible by 32")
        emb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(x.dtype))
        h = self.stem(x)
        hs = [h]
        for block in self.input_blocks:
            h = block(h, emb)
            hs.append(h)
        h = self.middle(h, emb)
        feats = {}
        for idx, (block, up) in enumerate(zip(self.output_blocks, self.output_upsample), start=1):
            h = block(torch.cat([h, hs.pop()], dim=1), emb)
            if idx in self.tap_levels:
                feats[self.tap_levels[idx]] = h
            h = up(h, emb)
        out = F.pixel_shuffle(self.out_conv(F.silu(self.out_norm(h))), self.cfg.patch)
        if return_features:
            pyramid = FeaturePyramid({l: feats[l] for l in sorted(feats)}, (H, W))
            return out, pyramid
        return out


# ------------------------------------------------------------------- teacher


class DiffusionTeacher(nn.Module):
    def __init__(self, unet_config: UNetConfig | None = None, schedule: NoiseSchedule | None = None):
        super().__init__()
        self.unet_config = unet_config or UNetConfig()
        self.schedule = schedule or make_linear_schedule()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.unet_config.seed)
            self.unet = UNet(self.unet_config)
        self.history: list[float] = []

    @property
    def tap_points(self) -> list[int]:
        return list(self.unet_config.tap_blocks)

    @property
    def tap_levels(self) -> dict[int, int]:
        return dict(self.unet.tap_levels)

    @property
    def feature_channels(self) -> dict[int, int]:
        return dict(sorted(self.unet.tap_channels.items()))

    def forward(self, x_t, t):
        return self.unet(x_t, t)


def _as_t(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    return t.expand(batch) if t.dim() == 0 else t


@torch.no_grad()
def denoise_step_features(teacher: DiffusionTeacher, x_t: torch.Tensor, t) -> tuple[torch.Tensor, FeaturePyramid]:
    """One eval-mode UNet pass at step index ``t``; returns (eps_hat, tapped pyramid)."""
    _check_t(teacher.schedule, t)
    was_training = teacher.training
    teacher.eval()
    try:
        eps, feats = teacher.unet(x_t, _as_t(t, x_t.shape[0]), return_features=True)
    finally:
        teacher.train(was_training)
    return eps, feats


@dataclass(frozen=True)
class EncodeMode:
    variant: str = "stochastic"
    t_encode: int = GENERIC_T_ENCODE
    seed: int = 0

    def validate(self, T: int) -> None:
        if self.variant not in ("stochastic", "deterministic"):
            raise ConfigError(f"unknown encode variant {self.variant!r}")
        if not 1 <= self.t_encode <= T:
            raise ConfigError(f"t_encode={self.t_encode} outside [1, {T}]")


_STOCHASTIC_TAG = 0x5EED
_DETERMINISTIC_TAG = 0xF1C5


def encode_noise(mode: EncodeMode, sample_id: int, epoch: int, shape, dtype=torch.float32) -> torch.Tensor:
    if mode.variant == "stochastic":
        g = keyed_generator(_STOCHASTIC_TAG, mode.seed, sample_id, epoch)
    else:
        g = keyed_generator(_DETERMINISTIC_TAG, sample_id)
    return torch.randn(tuple(shape), generator=g, dtype=dtype)


def encode_features(
    teacher: DiffusionTeacher,
    x: torch.Tensor,
    mode: EncodeMode,
    sample_ids: Sequence[int] | None = None,
    epoch: int = 0,
) -> FeaturePyramid:
    """Noise real images to ``t_encode`` steps, then tap one denoising pass.

    ``t_encode`` counts forward steps (1..T); it maps to schedule index t_encode-1.
    """
    mode.validate(teacher.schedule.T)
    if x.dim() == 3:
        x = x[None]
    if sample_ids is None:
        sample_ids = range(x.shape[0])
    sample_ids = list(sample_ids)
    if len(sample_ids) != x.shape[0]:
        raise ShapeError(f"{len(sample_ids)} sample ids for batch of {x.shape[0]}")
    noise = torch.stack([encode_noise(mode, int(i), epoch, x.shape[1:], x.dtype) for i in sample_ids])
    t = mode.t_encode - 1
    _, feats = denoise_step_features(teacher, q_sample(teacher.schedule, x, t, noise), t)
    return feats


# ------------------------------------------------------------------ training


@torch.no_grad()
def denoising_mse(teacher: DiffusionTeacher, images: torch.Tensor, seed: int = 0, batch_size: int = 64) -> float:
    """Held-out epsilon-prediction MSE with fixed timesteps and noise."""
    g = keyed_generator(0xE7A1, seed)
    t = torch.randint(0, teacher.schedule.T, (images.shape[0],), generator=g)
    noise = torch.randn(images.shape, generator=g)
    was_training = teacher.training
    teacher.eval()
    total = 0.0
    for s in range(0, images.shape[0], batch_size):
        sl = slice(s, s + batch_size)
        x_t = q_sample(teacher.schedule, images[sl], t[sl], noise[sl])
        total += F.mse_loss(teacher(x_t, t[sl]), noise[sl], reduction="sum").item()
    teacher.train(was_training)
    return total / images.numel()


def train_teacher(
    images: torch.Tensor,
    epochs: int,
    seed: int = 0,
    unet_config: UNetConfig | None = None,
    schedule: NoiseSchedule | None = None,
    batch_size: int = 32,
    lr: float = 1e-3,
    held_out: torch.Tensor | None = None,
    log=None,
) -> DiffusionTeacher:
    """Train an epsilon-prediction teacher on images in [-1, 1].

    ``teacher.history`` holds the held-out denoising MSE before training and
    after every epoch. Without an explicit ``held_out`` set the last tenth of
    ``images`` is held out.
    """
    if images.shape[0] == 0:
        raise ConfigError("cannot train a teacher on an empty dataset")
    if images.min() < -1 or images.max() > 1:
        raise ConfigError("teacher images must be normalized to [-1, 1]")
    if held_out is None:
        n_hold = max(1, images.shape[0] // 10) if images.shape[0] > 1 else 0
        held_out = images[images.shape[0] - n_hold:]
        images = images[: images.shape[0] - n_hold]
    unet_config = unet_config or UNetConfig(seed=seed)
    teacher = DiffusionTeacher(unet_config, schedule)
    T = teacher.schedule.T
    if len(held_out):
        teacher.history.append(denoising_mse(teacher, held_out, seed))
    if epochs <= 0:
        return teacher

    g = keyed_generator(0x7EAC, seed)
    opt = torch.optim.AdamW(teacher.parameters(), lr=lr, weight_decay=0.0)
    steps_per_epoch = math.ceil(images.shape[0] / batch_size)
    total = epochs * steps_per_epoch
    warmup = min(100, max(1, total // 10))
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warmup) * 0.5 * (1 + math.cos(math.pi * min(s, total) / total))
    )
    teacher.train()
    for epoch in range(epochs):
        perm = torch.randperm(images.shape[0], generator=g)
        for s in range(steps_per_epoch):
            x0 = images[perm[s * batch_size:(s + 1) * batch_size]]
            t = torch.randint(0, T, (x0.shape[0],), generator=g)
            noise = torch.randn(x0.shape, generator=g)
            loss = F.mse_loss(teacher(q_sample(teacher.schedule, x0, t, noise), t), noise)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(teacher.parameters(), 1.0)
            opt.step()
            sched.step()
        if len(held_out):
            teacher.history.append(denoising_mse(teacher, held_out, seed))
        if log:
            log(f"teacher epoch {epoch + 1}/{epochs} held-out mse {teacher.history[-1]:.4f}")
    teacher.eval()
    return teacher


def save_teacher(teacher: DiffusionTeacher, path, interpreter_state: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "unet_config": asdict(teacher.unet_config),
        "schedule": {"T": teacher.schedule.T, "beta": teacher.schedule.beta},
        "tap_levels": teacher.tap_levels,
        "state_dict": teacher.unet.state_dict(),
        "history": list(teacher.history),
    }
    if interpreter_state is not None:
        payload["interpreter"] = interpreter_state
    torch.save(payload, Path(path))


def load_teacher(path) -> tuple[DiffusionTeacher, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported teacher checkpoint version {payload.get('format_version')}")
    beta = np.asarray(payload["schedule"]["beta"], dtype=np.float64)
    schedule = NoiseSchedule(int(payload["schedule"]["T"]), beta, np.cumprod(1.0 - beta))
    teacher = DiffusionTeacher(UNetConfig(**payload["unet_config"]), schedule)
    teacher.unet.load_state_dict(payload["state_dict"])
    teacher.history = list(payload.get("history", []))
    teacher.eval()
    return teacher, payload


# ------------------------------------------------------------------ sampling


class GenerativeSampler(Protocol):
    latent_shape: tuple[int, ...]

    def sample(self, z: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
        ...


class DiffusionSampler:
    """Ancestral DDPM sampling; the latent is the initial noise x_T.

    ``sampling_steps`` < T respaces the chain over evenly spaced timesteps.
    Per-step noise comes from a generator keyed by ``seed`` so a fixed ``z``
    always yields the same sample.
    """

    def __init__(self, teacher: DiffusionTeacher, resolution: int = 64, sampling_steps: int | None = None, seed: int = 0):
        self.teacher = teacher
        self.latent_shape = (3, resolution, resolution)
        self.seed = seed
        T = teacher.schedule.T
        n = sampling_steps or T
        if not 1 <= n <= T:
            raise ConfigError(f"sampling_steps must be in [1, {T}]")
        self.timesteps = np.unique(np.round(np.linspace(0, T - 1, n)).astype(np.int64))
        ab = teacher.schedule.alpha_bar[self.timesteps]
        prev = np.concatenate([[1.0], ab[:-1]])
        self.alpha_bar = ab
        self.alpha_bar_prev = prev
        self.beta = 1.0 - ab / prev

    @torch.no_grad()
    def sample(self, z: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
        g = keyed_generator(0x5A3B, self.seed)
        x = z
        feats = None
        for i in reversed(range(len(self.timesteps))):
            t = int(self.timesteps[i])
            eps, feats = denoise_step_features(self.teacher, x, t)
            ab, ab_prev, beta = self.alpha_bar[i], self.alpha_bar_prev[i], self.beta[i]
            x0 = ((x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)).clamp(-1, 1)
            mean = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * x
            if i > 0:
                var = beta * (1 - ab_prev) / (1 - ab)
                x = mean + math.sqrt(var) * torch.randn(x.shape, generator=g)
            else:
                x = mean
        return x.clamp(-1, 1), feats


class ToyGANSampler(nn.Module):
    """Randomly initialised convolutional generator with taps at strides 32..4.

    Stands in for a GAN teacher to exercise the synthesized-dataset path.
    """

    def __init__(self, latent_dim: int = 64, resolution: int = 64, channels: int = 64, seed: int = 0):
        super().__init__()
        if resolution % 32:
            raise ShapeError("resolution must be divisible by 32")
        self.latent_shape = (latent_dim,)
        self.resolution = resolution
        self.base = resolution // 32
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.fc = nn.Linear(latent_dim, channels * self.base**2)
            self.blocks = nn.ModuleList([nn.Conv2d(channels, channels, 3, padding=1) for _ in range(5)])
            self.to_rgb = nn.Conv2d(channels, 3, 1)
        self.channels = channels
        self.eval()

    @torch.no_grad()
    def sample(self, z: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
        h = self.fc(z).view(z.shape[0], self.channels, self.base, self.base)
        feats = {}
        for i, conv in enumerate(self.blocks):
            h = F.leaky_relu(conv(h), 0.2)
            level = 5 - i
            if level >= 2:
                feats[level] = h
            h = F.interpolate(h, scale_factor=2 if i < 4 else 1, mode="nearest")
        h = F.interpolate(h, size=(self.resolution, self.resolution), mode="nearest")
        img = torch.tanh(self.to_rgb(h))
        return img, FeaturePyramid({l: feats[l] for l in sorted(feats)}, (self.resolution, self.resolution))


def sample_with_features(sampler: GenerativeSampler, z: torch.Tensor) -> tuple[torch.Tensor, FeaturePyramid]:
    if tuple(z.shape[1:]) != tuple(sampler.latent_shape):
        raise ShapeError(f"latent shape {tuple(z.shape[1:])} != sampler prior {tuple(sampler.latent_shape)}")
    return sampler.sample(z)


def draw_latents(sampler: GenerativeSampler, n: int, seed: int, offset: int = 0) -> torch.Tensor:
    """One latent per sample id, keyed so streams can be resumed at any id."""
    return torch.stack(
        [torch.randn(tuple(sampler.latent_shape), generator=keyed_generator(0x1A7E, seed, offset + i)) for i in range(n)]
    )
