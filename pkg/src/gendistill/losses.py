"""Distillation and interpreter objectives.

Teacher-side inputs (teacher pyramids, teacher logits) are always detached,
so gradients only reach the student side.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from gendistill.errors import ConfigError, ShapeError
from gendistill.pyramid import LEVELS, FeaturePyramid

IGNORE_INDEX = 255


@dataclass
class DistillConfig:
    lambda_at: float = 10.0
    p: int = 2
    tau: float = 4.0
    lambda_d: float = 3.0
    lambda_ld: float = 1.0
    levels: list[int] = field(default_factory=lambda: list(LEVELS))
    eps: float = 1e-5
    mse_reduction: str = "mean"  # "sum": raw squared L2 norm per level
    kd_tau_squared: bool = False  # multiply label distillation by tau**2
    dice_eps: float = 1e-6
    at_eps: float = 1e-12

    def validate(self) -> None:
        if min(self.lambda_at, self.lambda_d, self.lambda_ld) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.p < 1:
            raise ConfigError(f"p must be >= 1, got {self.p}")
        if self.mse_reduction not in ("mean", "sum"):
            raise ConfigError(f"unknown mse_reduction {self.mse_reduction!r}")
        if not self.levels:
            raise ConfigError("at least one distillation level is required")


def whiten(f: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Per-location channel standardization (no learnable affine)."""
    mu = f.mean(dim=1, keepdim=True)
    var = f.var(dim=1, unbiased=False, keepdim=True)
    return (f - mu) / torch.sqrt(var + eps)


def _check_pair(pyr_r: FeaturePyramid, pyr_g: FeaturePyramid, levels, same_channels: bool) -> None:
    for l in levels:
        if l not in pyr_r.levels or l not in pyr_g.levels:
            raise ShapeError(f"level {l} missing from student or teacher pyramid")
        a, b = pyr_r[l].shape, pyr_g[l].shape
        if a[0] != b[0] or a[2:] != b[2:] or (same_channels and a[1] != b[1]):
            raise ShapeError(f"level {l}: student {tuple(a)} vs teacher {tuple(b)}")


def mse_per_level(pyr_r: FeaturePyramid, pyr_g: FeaturePyramid, config: DistillConfig) -> dict[int, torch.Tensor]:
    _check_pair(pyr_r, pyr_g, config.levels, same_channels=True)
    out = {}
    for l in config.levels:
        diff = pyr_r[l] - whiten(pyr_g[l].detach(), config.eps)
        sq = diff.pow(2)
        out[l] = sq.mean() if config.mse_reduction == "mean" else sq.sum()
    return out


def mse_distill_loss(pyr_r: FeaturePyramid, pyr_g: FeaturePyramid, config: DistillConfig) -> torch.Tensor:
    terms = mse_per_level(pyr_r, pyr_g, config)
    return torch.stack(list(terms.values())).mean()


def attention_map(f: torch.Tensor, p: int = 2) -> torch.Tensor:
    """Sum over channels of |f|**p, shape [B,1,H,W]."""
    if p < 1:
        raise ConfigError(f"p must be >= 1, got {p}")
    return f.abs().pow(p).sum(dim=1, keepdim=True)


def _normalized_attention(f: torch.Tensor, p: int, eps: float) -> torch.Tensor:
    q = attention_map(f, p).flatten(1)
    return q / q.norm(dim=1, keepdim=True).clamp_min(eps)


def at_per_level(pyr_r: FeaturePyramid, pyr_g: FeaturePyramid, config: DistillConfig) -> dict[int, torch.Tensor]:
    _check_pair(pyr_r, pyr_g, config.levels, same_channels=False)
    out = {}
    for l in config.levels:
        qr = _normalized_attention(pyr_r[l], config.p, config.at_eps)
        qg = _normalized_attention(pyr_g[l].detach(), config.p, config.at_eps)
        diff = qr - qg
        # p-norm of the difference; the tiny shift keeps the gradient finite at 0
        dist = (diff.abs().pow(config.p).sum(dim=1) + 1e-30).pow(1.0 / config.p)
        out[l] = dist.mean()
    return out


def at_distill_loss(pyr_r: FeaturePyramid, pyr_g: FeaturePyramid, config: DistillConfig) -> torch.Tensor:
    terms = at_per_level(pyr_r, pyr_g, config)
    return torch.stack(list(terms.values())).mean()


def feat_loss(pyr_r: FeaturePyramid, pyr_g: FeaturePyramid, config: DistillConfig) -> torch.Tensor:
    return mse_distill_loss(pyr_r, pyr_g, config) + config.lambda_at * at_distill_loss(pyr_r, pyr_g, config)


def feat_loss_terms(pyr_r: FeaturePyramid, pyr_g: FeaturePyramid, config: DistillConfig) -> dict:
    """Loss components plus per-level values, for logging and NaN diagnostics."""
    mse = mse_per_level(pyr_r, pyr_g, config)
    at = at_per_level(pyr_r, pyr_g, config)
    mse_total = torch.stack(list(mse.values())).mean()
    at_total = torch.stack(list(at.values())).mean()
    return {
        "mse": mse_total,
        "at": at_total,
        "feat": mse_total + config.lambda_at * at_total,
        "mse_levels": mse,
        "at_levels": at,
    }


def dice_loss(logits: torch.Tensor, y: torch.Tensor, eps: float = 1e-6, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """1 - mean over classes of 2*sum(p*g) / (sum(p) + sum(g) + eps), sums over batch and pixels."""
    K = logits.shape[1]
    valid = (y != ignore_index).unsqueeze(1).to(logits.dtype)
    prob = logits.softmax(dim=1) * valid
    onehot = F.one_hot(torch.where(y == ignore_index, 0, y), K).permute(0, 3, 1, 2).to(logits.dtype) * valid
    dims = (0, 2, 3)
    inter = (prob * onehot).sum(dims)
    denom = prob.sum(dims) + onehot.sum(dims)
    return 1 - (2 * inter / (denom + eps)).mean()


def interpreter_loss(logits: torch.Tensor, y: torch.Tensor, config: DistillConfig) -> torch.Tensor:
    if logits.dim() != 4 or y.dim() != 3 or logits.shape[0] != y.shape[0] or logits.shape[2:] != y.shape[1:]:
        raise ShapeError(f"logits {tuple(logits.shape)} vs labels {tuple(y.shape)}")
    valid = y[y != IGNORE_INDEX]
    if valid.numel() and (int(valid.min()) < 0 or int(valid.max()) >= logits.shape[1]):
        raise ShapeError(f"labels outside [0, {logits.shape[1] - 1}] for K={logits.shape[1]}")
    ce = F.cross_entropy(logits, y, ignore_index=IGNORE_INDEX)
    return ce + config.lambda_d * dice_loss(logits, y, config.dice_eps)


def label_distill_loss(logits_g: torch.Tensor, logits_r: torch.Tensor, config: DistillConfig) -> torch.Tensor:
    """Cross-entropy of softened student probabilities under softened teacher ones."""
    if config.tau <= 0:
        raise ConfigError(f"tau must be positive, got {config.tau}")
    if logits_g.shape != logits_r.shape:
        raise ShapeError(f"teacher logits {tuple(logits_g.shape)} vs student {tuple(logits_r.shape)}")
    pg = (logits_g.detach() / config.tau).softmax(dim=1)
    log_pr = (logits_r / config.tau).log_softmax(dim=1)
    loss = -(pg * log_pr).sum(dim=1).mean()
    if config.kd_tau_squared:
        loss = loss * config.tau**2
    return loss


def mix_loss(feat: torch.Tensor, ld: torch.Tensor, config: DistillConfig) -> torch.Tensor:
    return feat + config.lambda_ld * ld

