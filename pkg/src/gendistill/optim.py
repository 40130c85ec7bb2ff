"""AdamW with linear warmup and cosine decay, stepped per optimizer step."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from gendistill.errors import ConfigError


@dataclass
class RunConfig:
    optimizer: str = "adamw"
    base_lr: float = 4e-3
    weight_decay: float = 0.05
    betas: list[float] = field(default_factory=lambda: [0.9, 0.95])
    schedule: str = "cosine"
    warmup_epochs: int = 20
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    lr_scaling: bool = True  # effective lr = base_lr * batch_size / 256

    def validate(self) -> None:
        if self.optimizer != "adamw":
            raise ConfigError(f"only adamw is supported, got {self.optimizer!r}")
        if self.schedule != "cosine":
            raise ConfigError(f"only cosine decay is supported, got {self.schedule!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}")
        if len(self.betas) != 2:
            raise ConfigError("betas needs two values")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256 if self.lr_scaling else self.base_lr


def lr_factor(step: int, warmup_steps: int, total_steps: int) -> float:
    """Multiplier on the peak lr at a 0-based optimizer step.

    Warmup ramps (step+1)/warmup_steps so the last warmup step hits the peak;
    cosine then decays to exactly 0 at the final step.
    """
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    decay_steps = total_steps - warmup_steps
    progress = min(1.0, (step - warmup_steps + 1) / decay_steps)
    return 0.5 * (1 + math.cos(math.pi * progress))


def make_optimizer(params, run: RunConfig, steps_per_epoch: int):
    run.validate()
    opt = torch.optim.AdamW(params, lr=run.peak_lr, betas=tuple(run.betas), weight_decay=run.weight_decay)
    warmup = run.warmup_epochs * steps_per_epoch
    total = run.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(s, warmup, total))
    return opt, sched
