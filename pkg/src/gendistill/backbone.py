"""Small residual CNN students exposing features at strides 4..32, plus the
segmentation head used for finetuning."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from gendistill.errors import ConfigError, ShapeError
from gendistill.pyramid import LEVELS, FeaturePyramid

CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    stem_channels: int = 32
    stage_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    blocks_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    seed: int = 0

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("stage_channels and blocks_per_stage need 4 entries (levels 2..5)")
        if self.stem_channels <= 0 or any(c <= 0 for c in self.stage_channels):
            raise ConfigError(f"channel counts must be positive: {self.stem_channels}, {self.stage_channels}")
        if any(b <= 0 for b in self.blocks_per_stage):
            raise ConfigError(f"blocks_per_stage must be positive: {self.blocks_per_stage}")


def conv_bn_relu(cin: int, cout: int, kernel: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride, kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x), inplace=True)


class Backbone(nn.Module):
    """Stride-4 stem followed by four residual stages, one per level 2..5."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c0 = config.stem_channels
        self.stem = nn.Sequential(
            conv_bn_relu(3, c0, 3, stride=2),
            conv_bn_relu(c0, c0, 3, stride=2),
        )
        stages = []
        cin = c0
        for i, (cout, n) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(cin, cout, stride)] + [BasicBlock(cout, cout) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)

    @property
    def out_channels(self) -> dict[int, int]:
        return dict(zip(LEVELS, self.config.stage_channels))

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected [B,3,H,W] images, got {tuple(images.shape)}")
        H, W = images.shape[-2:]
        if H % 32 or W % 32:
            raise ShapeError(f"input {H}x{W} is not divisible by 32")
        x = self.stem(images)
        feats = {}
        for level, stage in zip(LEVELS, self.stages):
            x = stage(x)
            feats[level] = x
        return FeaturePyramid(feats, (H, W))


def build_backbone(config: BackboneConfig) -> Backbone:
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = Backbone(config)
    return model


def forward_features(backbone: Backbone, images: torch.Tensor) -> FeaturePyramid:
    return backbone(images)


class SegmentationHead(nn.Module):
    """Light FPN decoder: lateral 1x1, top-down sum, 3x3 smoothing, stride-4 logits."""

    def __init__(self, in_channels: dict[int, int], num_classes: int, channels: int = 64):
        super().__init__()
        self.levels = sorted(in_channels)
        self.lateral = nn.ModuleDict(
            {str(l): nn.Conv2d(c, channels, 1) for l, c in in_channels.items()}
        )
        self.smooth = conv_bn_relu(channels, channels, 3)
        self.classifier = nn.Conv2d(channels, num_classes, 1)
        self.num_classes = num_classes

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        x = None
        for l in reversed(self.levels):
            lat = self.lateral[str(l)](pyramid[l])
            x = lat if x is None else lat + F.interpolate(x, size=lat.shape[-2:], mode="nearest")
        return self.classifier(self.smooth(x))


class Segmenter(nn.Module):
    def __init__(self, backbone: Backbone, num_classes: int, head_channels: int = 64):
        super().__init__()
        self.backbone = backbone
        self.head = SegmentationHead(backbone.out_channels, num_classes, head_channels)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        logits = self.head(self.backbone(images))
        return F.interpolate(logits, size=images.shape[-2:], mode="bilinear", align_corners=False)


def save_backbone(backbone: Backbone, path, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(backbone.config),
        "state_dict": backbone.state_dict(),
    }
    if extra:
        payload.update(extra)
    torch.save(payload, Path(path))


def load_backbone(path) -> tuple[Backbone, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('format_version')}")
    backbone = build_backbone(BackboneConfig(**payload["config"]))
    backbone.load_state_dict(payload["state_dict"])
    return backbone, payload
