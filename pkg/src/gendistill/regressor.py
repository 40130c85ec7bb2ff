"""Feature regressor: PPM on the deepest student level, an FPN top-down path
with lateral connections, and per-level 1x1 projections to teacher channels."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from gendistill.backbone import BackboneConfig, build_backbone
from gendistill.errors import ConfigError, ShapeError
from gendistill.pyramid import LEVELS, FeaturePyramid


@dataclass
class RegressorConfig:
    fpn_channels: int = 256
    pool_scales: list[int] = field(default_factory=lambda: [1, 2, 3, 6])
    teacher_channels: dict[int, int] = field(default_factory=lambda: {2: 64, 3: 64, 4: 128, 5: 128})

    def validate(self, deepest_size: int | None = None) -> None:
        if self.fpn_channels <= 0:
            raise ConfigError("fpn_channels must be positive")
        scales = list(self.pool_scales)
        if not scales or any(b <= a for a, b in zip(scales, scales[1:])) or scales[0] < 1:
            raise ConfigError(f"pool_scales must be strictly increasing positive integers: {scales}")
        missing = set(LEVELS) - set(int(k) for k in self.teacher_channels)
        if missing:
            raise ConfigError(f"teacher_channels missing levels {sorted(missing)}")
        if deepest_size is not None:
            bad = [s for s in scales if s > deepest_size]
            if bad:
                raise ConfigError(f"pool scales {bad} exceed level-5 spatial size {deepest_size}")


def conv_bn_relu(cin: int, cout: int, kernel: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class PyramidPooling(nn.Module):
    def __init__(self, cin: int, cout: int, scales: list[int]):
        super().__init__()
        self.scales = list(scales)
        branch = max(1, cout // len(scales))
        self.branches = nn.ModuleList(
            [nn.Sequential(nn.AdaptiveAvgPool2d(s), conv_bn_relu(cin, branch, 1)) for s in scales]
        )
        self.fuse = conv_bn_relu(cin + branch * len(scales), cout, 3)

    def forward(self, x):
        size = x.shape[-2:]
        if max(self.scales) > min(size):
            bad = [s for s in self.scales if s > min(size)]
            raise ConfigError(f"pool scales {bad} exceed level-5 spatial size {tuple(size)}")
        outs = [x] + [
            F.interpolate(b(x), size=size, mode="bilinear", align_corners=False) for b in self.branches
        ]
        return self.fuse(torch.cat(outs, dim=1))


class FeatureRegressor(nn.Module):
    def __init__(self, config: RegressorConfig, student_channels: dict[int, int]):
        super().__init__()
        config.validate()
        self.config = config
        c = config.fpn_channels
        teacher = {int(k): v for k, v in config.teacher_channels.items()}
        self.ppm = PyramidPooling(student_channels[5], c, config.pool_scales)
        self.lateral = nn.ModuleDict({str(l): conv_bn_relu(student_channels[l], c, 1) for l in LEVELS[:-1]})
        self.fuse = nn.ModuleDict({str(l): conv_bn_relu(c, c, 3) for l in LEVELS})
        # no norm/activation: outputs must reach arbitrary teacher statistics
        self.project = nn.ModuleDict({str(l): nn.Conv2d(c, teacher[l], 1) for l in LEVELS})

    def forward(self, student: FeaturePyramid, return_fused: bool = False):
        missing = set(LEVELS) - set(student.level_ids)
        if missing:
            raise ShapeError(f"student pyramid missing levels {sorted(missing)}")
        top = self.ppm(student[5])
        inner = {5: top}
        for l in reversed(LEVELS[:-1]):
            lat = self.lateral[str(l)](student[l])
            inner[l] = lat + F.interpolate(inner[l + 1], size=lat.shape[-2:], mode="nearest")
        fused = {l: self.fuse[str(l)](inner[l]) for l in LEVELS}
        out = FeaturePyramid({l: self.project[str(l)](fused[l]) for l in LEVELS}, student.input_resolution)
        if return_fused:
            return out, fused
        return out


def regressor_forward(regressor: FeatureRegressor, student_pyramid: FeaturePyramid) -> FeaturePyramid:
    return regressor(student_pyramid)


class StudentLogitHead(nn.Module):
    """1x1 conv on the regressor's level-2 output: student logits at stride 4."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, num_classes, 1)

    def forward(self, regressed: FeaturePyramid) -> torch.Tensor:
        return self.conv(regressed[2])


def count_parameters(config: RegressorConfig, student_config: BackboneConfig) -> int:
    student = build_backbone(student_config)
    reg = FeatureRegressor(config, student.out_channels)
    return sum(p.numel() for p in reg.parameters())
