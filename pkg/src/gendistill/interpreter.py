"""Feature interpreter: a fusion head over frozen teacher features that emits
stride-4 segmentation logits and supplies soft labels for distillation."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F
from torch import nn

from gendistill.errors import ConfigError, ShapeError
from gendistill.losses import DistillConfig, interpreter_loss
from gendistill.metrics import SegMetric
from gendistill.optim import RunConfig, make_optimizer
from gendistill.pyramid import LEVELS, FeaturePyramid
from gendistill.rng import keyed_generator
from gendistill.teacher import LABEL_EFFICIENT_T_ENCODE, DiffusionTeacher, EncodeMode


@dataclass
class InterpreterConfig:
    num_classes: int = 5
    fuse_channels: int = 256
    groups: int = 32
    dropout_rate: float = 0.1
    teacher_channels: dict[int, int] = field(default_factory=lambda: {2: 64, 3: 64, 4: 128, 5: 128})

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.fuse_channels % self.groups:
            raise ConfigError(f"fuse_channels {self.fuse_channels} not divisible by groups {self.groups}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


class SeparableBlock(nn.Module):
    """Depthwise 3x3 + pointwise 1x1, then GroupNorm and swish."""

    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, padding=1, groups=cin, bias=False)
        self.pointwise = nn.Conv2d(cin, cout, 1, bias=False)
        self.norm = nn.GroupNorm(groups, cout)

    def forward(self, x):
        return F.silu(self.norm(self.pointwise(self.depthwise(x))))


class FeatureFusion(nn.Module):
    """1x1 conv on the coarser map, bilinear x2, concat the next level, separable block."""

    def __init__(self, cin: int, skip: int, cout: int, groups: int):
        super().__init__()
        self.reduce = nn.Conv2d(cin, cout, 1)
        self.block = SeparableBlock(cout + skip, cout, groups)

    def forward(self, x, skip):
        x = F.interpolate(self.reduce(x), size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.block(torch.cat([x, skip], dim=1))


class FeatureInterpreter(nn.Module):
    def __init__(self, config: InterpreterConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.fuse_channels
        tc = {int(k): v for k, v in config.teacher_channels.items()}
        self.entry = SeparableBlock(tc[5], c, config.groups)
        self.fusions = nn.ModuleList([FeatureFusion(c, tc[l], c, config.groups) for l in (4, 3, 2)])
        self.dropout = nn.Dropout(config.dropout_rate)
        self.classifier = nn.Conv2d(c, config.num_classes, 1)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        missing = set(LEVELS) - set(pyramid.level_ids)
        if missing:
            raise ShapeError(f"interpreter needs levels {LEVELS}; missing {sorted(missing)}")
        x = self.entry(pyramid[5])
        for fusion, l in zip(self.fusions, (4, 3, 2)):
            x = fusion(x, pyramid[l])
        return self.classifier(self.dropout(x))


def build_interpreter(config: InterpreterConfig, seed: int = 0) -> FeatureInterpreter:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FeatureInterpreter(config)


def interpreter_forward(interpreter: FeatureInterpreter, teacher_pyramid: FeaturePyramid) -> torch.Tensor:
    return interpreter(teacher_pyramid)


@torch.no_grad()
def emit_soft_labels(interpreter: FeatureInterpreter, teacher_pyramid: FeaturePyramid) -> torch.Tensor:
    was_training = interpreter.training
    interpreter.eval()
    try:
        return interpreter(teacher_pyramid)
    finally:
        interpreter.train(was_training)


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def _upsampled(logits, size):
    return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


@torch.no_grad()
def evaluate_interpreter(interpreter, teacher, images, masks, t_encode: int, batch_size: int = 64) -> SegMetric:
    from gendistill.teacher import encode_features

    metric = SegMetric(interpreter.config.num_classes)
    mode = EncodeMode("deterministic", t_encode)
    interpreter.eval()
    for s in range(0, images.shape[0], batch_size):
        ids = list(range(s, min(s + batch_size, images.shape[0])))
        pyr = encode_features(teacher, images[ids], mode, sample_ids=ids)
        pred = _upsampled(interpreter(pyr), images.shape[-2:]).argmax(1)
        metric.add_batch(pred, masks[ids])
    return metric


def train_interpreter(
    teacher: DiffusionTeacher,
    labeled_images: torch.Tensor,
    masks: torch.Tensor,
    config: InterpreterConfig,
    epochs: int,
    seed: int = 0,
    run: RunConfig | None = None,
    distill: DistillConfig | None = None,
    t_encode: int = LABEL_EFFICIENT_T_ENCODE,
    augmentation: str = "horizontal_flip",
    log=None,
) -> FeatureInterpreter:
    """Fit an interpreter on online-encoded teacher features of labeled images.

    The teacher is only run under ``no_grad`` in eval mode. ``interpreter.history``
    records training-set mIoU before training and after each epoch.
    """
    from gendistill.data import DatasetSpec, iterate_encoded

    if labeled_images.shape[0] == 0:
        raise ConfigError("train_interpreter needs at least one labeled sample")
    if masks.shape[0] != labeled_images.shape[0]:
        raise ShapeError("images and masks differ in length")
    distill = distill or DistillConfig()
    run = run or RunConfig(batch_size=8, seed=seed)
    run = replace(run, epochs=max(epochs, 1), warmup_epochs=min(run.warmup_epochs, max(epochs, 1) // 5))
    run.validate()
    teacher.eval()

    interp = build_interpreter(config, seed)
    interp.history = [evaluate_interpreter(interp, teacher, labeled_images, masks, t_encode).miou()]
    if epochs <= 0:
        return interp
    n = labeled_images.shape[0]
    steps = math.ceil(n / run.batch_size)
    opt, sched = make_optimizer(interp.parameters(), run, steps)
    spec = DatasetSpec("encoded", "online", EncodeMode("stochastic", t_encode, seed), augmentation)
    g = keyed_generator(0x1E7E, seed)
    # dropout draws from the global generator; pin it for this run only
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for epoch in range(epochs):
            interp.train()
            order = torch.randperm(n, generator=g).tolist()
            batch = []
            for rec in iterate_encoded(teacher, labeled_images, spec, epoch, order=order, labels=masks, workers=1):
                batch.append(rec)
                if len(batch) == run.batch_size:
                    _interp_step(interp, batch, opt, sched, distill)
                    batch = []
            if batch:
                _interp_step(interp, batch, opt, sched, distill)
            interp.history.append(evaluate_interpreter(interp, teacher, labeled_images, masks, t_encode).miou())
            if log:
                log(f"interpreter epoch {epoch + 1}/{epochs} train mIoU {interp.history[-1]:.2f}")
    interp.eval()
    return interp


def _interp_step(interp, batch, opt, sched, distill):
    pyr = FeaturePyramid.cat([r.teacher_features for r in batch])
    y = torch.stack([r.label for r in batch])
    logits = _upsampled(interp(pyr), y.shape[-2:])
    loss = interpreter_loss(logits, y, distill)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    sched.step()
    return loss.item()
