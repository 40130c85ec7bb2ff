"""Pretraining (feature-only and mixed distillation), segmentation finetuning,
ablation sweeps and run reporting."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from gendistill.backbone import Backbone, BackboneConfig, Segmenter, build_backbone
from gendistill.data import DatasetSpec, EncodedFeatureSource, FeatureRecord, flip_coin, iterate_encoded
from gendistill.errors import ConfigError
from gendistill.losses import DistillConfig, feat_loss_terms, label_distill_loss, mix_loss
from gendistill.metrics import SegMetric
from gendistill.optim import RunConfig, make_optimizer
from gendistill.pyramid import FeaturePyramid
from gendistill.regressor import FeatureRegressor, RegressorConfig, StudentLogitHead
from gendistill.rng import keyed_generator

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_COLUMNS = ("mse", "at", "feat", "ld", "total")


@dataclass
class MetricsReport:
    run_id: str
    losses: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_seconds")
        return d

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)

    def write(self, directory) -> Path:
        """metrics.json (deterministic), losses.csv and timing.json."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "metrics.json").write_text(self.to_json() + "\n")
        with open(directory / "losses.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("epoch",) + LOSS_COLUMNS)
            for row in self.losses:
                writer.writerow([row["epoch"]] + [repr(float(row.get(c, 0.0))) for c in LOSS_COLUMNS])
        (directory / "timing.json").write_text(json.dumps({"wall_clock_seconds": self.wall_clock_seconds}) + "\n")
        return directory / "metrics.json"

    @classmethod
    def read(cls, path) -> MetricsReport:
        d = json.loads(Path(path).read_text())
        timing = Path(path).with_name("timing.json")
        if timing.exists():
            d["wall_clock_seconds"] = json.loads(timing.read_text())["wall_clock_seconds"]
        return cls(**d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


@dataclass
class PretrainResult:
    backbone: Backbone
    regressor: FeatureRegressor
    report: MetricsReport
    logit_head: StudentLogitHead | None = None

    def checkpoint(self) -> dict:
        ckpt = {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.backbone.config),
            "state_dict": self.backbone.state_dict(),
            "regressor": {
                "config": asdict(self.regressor.config),
                "state_dict": self.regressor.state_dict(),
            },
        }
        if self.logit_head is not None:
            ckpt["logit_head"] = self.logit_head.state_dict()
        return ckpt

    def save(self, path) -> None:
        torch.save(self.checkpoint(), Path(path))


def collate(records: list[FeatureRecord], with_soft: bool = False):
    """Stack images and teacher pyramids; labels are never read."""
    images = torch.stack([r.image for r in records])
    pyramid = FeaturePyramid.cat([r.teacher_features for r in records])
    soft = None
    if with_soft:
        if any(r.soft_logits is None for r in records):
            missing = [r.sample_id for r in records if r.soft_logits is None][:5]
            raise ConfigError(f"mixed distillation needs soft_logits; missing for samples {missing}")
        soft = torch.stack([r.soft_logits for r in records])
    return images, pyramid, soft


def batched(stream: Iterable, size: int) -> Iterator[list]:
    batch = []
    for item in stream:
        batch.append(item)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def _check_finite(terms: dict, ld: torch.Tensor | None) -> None:
    for name in ("mse_levels", "at_levels"):
        for level, value in terms[name].items():
            if not torch.isfinite(value):
                raise FloatingPointError(f"non-finite {name[:-7]} loss at level {level}: {value.item()}")
    if ld is not None and not torch.isfinite(ld):
        raise FloatingPointError(f"non-finite label-distillation loss: {ld.item()}")


LOSS_VARIANTS = {
    # name: (feature weight, use AT, label weight)
    "feat": (1.0, True, 0.0),
    "mse": (1.0, False, 0.0),
    "label": (0.0, False, 1.0),
    "mix": (1.0, True, 1.0),
}


def _pretrain(
    backbone: Backbone,
    regressor: FeatureRegressor,
    source,
    run: RunConfig,
    distill: DistillConfig,
    logit_head: StudentLogitHead | None,
    variant: str,
    run_id: str,
    log_fn: Callable | None,
) -> PretrainResult:
    run.validate()
    distill.validate()
    w_feat, use_at, w_ld = LOSS_VARIANTS[variant]
    mix = w_ld > 0
    if mix and logit_head is None:
        raise ConfigError(f"loss variant {variant!r} needs a student logit head")
    cfg = replace(distill, lambda_at=distill.lambda_at if use_at else 0.0)
    modules = nn.ModuleList([backbone, regressor] + ([logit_head] if mix else []))
    n = len(source)
    steps = math.ceil(n / run.batch_size)
    opt, sched = make_optimizer(modules.parameters(), run, steps)
    report = MetricsReport(run_id=run_id, seeds={"run": run.seed})
    start = time.perf_counter()
    step = 0
    for epoch in range(run.epochs):
        modules.train()
        order = torch.randperm(n, generator=keyed_generator(0x0DE4, run.seed, epoch)).tolist()
        sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
        count = 0
        for batch in batched(source.records(epoch, order), run.batch_size):
            images, teacher_pyr, soft = collate(batch, with_soft=mix)
            regressed = regressor(backbone(images))
            terms = feat_loss_terms(regressed, teacher_pyr, cfg)
            ld = label_distill_loss(soft, logit_head(regressed), cfg) if mix else None
            _check_finite(terms, ld)
            feat = w_feat * terms["feat"]
            total = mix_loss(feat, ld, replace(cfg, lambda_ld=w_ld * cfg.lambda_ld)) if mix else feat
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            sched.step()
            step += 1
            b = len(batch)
            count += b
            sums["mse"] += terms["mse"].item() * b
            sums["at"] += terms["at"].item() * b
            sums["feat"] += terms["feat"].item() * b
            sums["ld"] += (ld.item() if ld is not None else 0.0) * b
            sums["total"] += total.item() * b
        row = {"epoch": epoch + 1, **{k: v / max(count, 1) for k, v in sums.items()}}
        report.losses.append(row)
        if log_fn:
            log_fn(f"[{run_id}] epoch {epoch + 1}/{run.epochs} " + " ".join(f"{k}={row[k]:.4f}" for k in LOSS_COLUMNS))
    modules.eval()
    report.final = {"optimizer_steps": step, "final_total_loss": report.losses[-1]["total"] if report.losses else None}
    report.config = {"run": asdict(run), "distill": asdict(distill), "variant": variant}
    report.wall_clock_seconds = time.perf_counter() - start
    return PretrainResult(backbone, regressor, report, logit_head if mix else None)


def pretrain_feature_distill(
    backbone: Backbone,
    regressor: FeatureRegressor,
    source,
    run: RunConfig,
    distill: DistillConfig | None = None,
    *,
    variant: str = "feat",
    run_id: str = "pretrain-feat",
    log_fn: Callable | None = None,
) -> PretrainResult:
    """Train backbone + regressor to regress teacher features (MSE + lambda_at * AT)."""
    if variant not in ("feat", "mse"):
        raise ConfigError(f"feature-only pretraining supports variants feat/mse, got {variant!r}")
    return _pretrain(backbone, regressor, source, run, distill or DistillConfig(), None, variant, run_id, log_fn)


def pretrain_mix_distill(
    backbone: Backbone,
    regressor: FeatureRegressor,
    logit_head: StudentLogitHead,
    source,
    run: RunConfig,
    distill: DistillConfig | None = None,
    *,
    variant: str = "mix",
    run_id: str = "pretrain-mix",
    log_fn: Callable | None = None,
) -> PretrainResult:
    """Feature regression plus soft-label distillation from interpreter logits.

    ``source`` records must carry ``soft_logits``; raw labels are never used.
    """
    if variant not in ("mix", "label"):
        raise ConfigError(f"mixed pretraining supports variants mix/label, got {variant!r}")
    return _pretrain(backbone, regressor, source, run, distill or DistillConfig(), logit_head, variant, run_id, log_fn)


# -------------------------------------------------------------------- finetune


@torch.no_grad()
def evaluate_segmenter(model: Segmenter, images, masks, num_classes: int, batch_size: int = 64) -> SegMetric:
    metric = SegMetric(num_classes)
    model.eval()
    for s in range(0, images.shape[0], batch_size):
        pred = model(images[s:s + batch_size]).argmax(1)
        metric.add_batch(pred, masks[s:s + batch_size])
    return metric


def finetune_segmentation(
    backbone: Backbone,
    images: torch.Tensor,
    masks: torch.Tensor,
    test_images: torch.Tensor,
    test_masks: torch.Tensor,
    run: RunConfig,
    freeze: bool = False,
    num_classes: int = 5,
    head_channels: int = 64,
    run_id: str = "finetune",
    log_fn: Callable | None = None,
) -> tuple[MetricsReport, Segmenter]:
    """Train an FPN segmentation head on ``backbone`` and score the test split.

    ``freeze`` keeps the backbone fixed (readout); otherwise everything trains.
    """
    run.validate()
    for name, m in (("train", masks), ("test", test_masks)):
        valid = m[m != 255]
        if valid.numel() and int(valid.max()) >= num_classes:
            raise ConfigError(f"{name} masks contain class {int(valid.max())} but num_classes={num_classes}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(run.seed)
        model = Segmenter(backbone, num_classes, head_channels)
    if freeze:
        for p in backbone.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    n = images.shape[0]
    steps = math.ceil(n / run.batch_size)
    opt, sched = make_optimizer(params, run, steps)
    report = MetricsReport(run_id=run_id, seeds={"run": run.seed})
    start = time.perf_counter()
    step = 0
    for epoch in range(run.epochs):
        model.train()
        if freeze:
            backbone.eval()
        perm = torch.randperm(n, generator=keyed_generator(0xF17E, run.seed, epoch)).tolist()
        total, count = 0.0, 0
        for s in range(0, n, run.batch_size):
            ids = perm[s:s + run.batch_size]
            x, y = images[ids].clone(), masks[ids].clone()
            for i, sid in enumerate(ids):
                if flip_coin(run.seed, sid, epoch):
                    x[i], y[i] = x[i].flip(-1), y[i].flip(-1)
            loss = F.cross_entropy(model(x), y, ignore_index=255)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite finetune loss at epoch {epoch + 1}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            total += loss.item() * len(ids)
            count += len(ids)
        report.losses.append({"epoch": epoch + 1, "total": total / count})
        if log_fn:
            log_fn(f"[{run_id}] epoch {epoch + 1}/{run.epochs} ce={total / count:.4f}")
    metric = evaluate_segmenter(model, test_images, test_masks, num_classes)
    report.final = {
        "miou": metric.miou(),
        "pixel_accuracy": metric.pixel_accuracy(),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in metric.iou()],
        "optimizer_steps": step,
        "freeze": freeze,
    }
    report.config = {"run": asdict(run), "num_classes": num_classes, "head_channels": head_channels}
    report.wall_clock_seconds = time.perf_counter() - start
    return report, model


# ------------------------------------------------------------- experiment glue


@dataclass
class Experiment:
    """Everything one pretrain + finetune cycle needs, shared across seeds and arms."""

    teacher: Any
    unlabeled: torch.Tensor
    finetune_images: torch.Tensor
    finetune_masks: torch.Tensor
    test_images: torch.Tensor
    test_masks: torch.Tensor
    spec: DatasetSpec
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    pretrain_run: RunConfig = field(default_factory=RunConfig)
    finetune_run: RunConfig = field(default_factory=RunConfig)
    num_classes: int = 5
    freeze: bool = False
    interpreter: Any = None
    variant: str = "feat"
    log_fn: Callable | None = None


def make_student(exp: Experiment, seed: int):
    backbone = build_backbone(replace(exp.backbone, seed=seed))
    reg_cfg = replace(exp.regressor, teacher_channels=dict(exp.teacher.feature_channels))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        regressor = FeatureRegressor(reg_cfg, backbone.out_channels)
        head = StudentLogitHead(reg_cfg.teacher_channels[2], exp.num_classes)
    return backbone, regressor, head


def run_pretrain(exp: Experiment, seed: int, run_id: str | None = None) -> PretrainResult:
    backbone, regressor, head = make_student(exp, seed)
    run = replace(exp.pretrain_run, seed=seed)
    mix = LOSS_VARIANTS[exp.variant][2] > 0
    if mix and exp.interpreter is None:
        raise ConfigError(f"loss variant {exp.variant!r} needs a trained interpreter")
    source = EncodedFeatureSource(exp.teacher, exp.unlabeled, exp.spec, interpreter=exp.interpreter if mix else None)
    run_id = run_id or f"pretrain-{exp.variant}-seed{seed}"
    if mix:
        res = pretrain_mix_distill(backbone, regressor, head, source, run, exp.distill,
                                   variant=exp.variant, run_id=run_id, log_fn=exp.log_fn)
    else:
        res = pretrain_feature_distill(backbone, regressor, source, run, exp.distill,
                                       variant=exp.variant, run_id=run_id, log_fn=exp.log_fn)
    res.report.seeds.update({"student": seed, "encode": exp.spec.encode.seed})
    res.report.config["dataset"] = {
        "mode": exp.spec.mode, "encode": asdict(exp.spec.encode), "augmentation": exp.spec.augmentation,
        "n_unlabeled": int(exp.unlabeled.shape[0]),
    }
    return res


def run_finetune(exp: Experiment, backbone: Backbone | None, seed: int, run_id: str) -> MetricsReport:
    """Finetune a pretrained backbone, or a fresh random-init one when ``backbone`` is None."""
    if backbone is None:
        backbone = build_backbone(replace(exp.backbone, seed=seed))
    report, _ = finetune_segmentation(
        backbone, exp.finetune_images, exp.finetune_masks, exp.test_images, exp.test_masks,
        replace(exp.finetune_run, seed=seed), freeze=exp.freeze, num_classes=exp.num_classes,
        run_id=run_id, log_fn=exp.log_fn,
    )
    return report


@torch.no_grad()
def epoch_feature_drift(teacher, images: torch.Tensor, spec: DatasetSpec, epochs=(0, 1)) -> dict:
    """Per-sample max |difference| of encoded features between two epochs.

    Augmentation is switched off so only the encoding noise can differ.
    """
    probe = replace(spec, augmentation="none")
    a = list(iterate_encoded(teacher, images, probe, epochs[0], workers=1))
    b = list(iterate_encoded(teacher, images, probe, epochs[1], workers=1))
    drift = []
    for ra, rb in zip(a, b):
        drift.append(max(float((ra.teacher_features[l] - rb.teacher_features[l]).abs().max())
                         for l in ra.teacher_features.level_ids))
    drift = np.asarray(drift)
    return {"max_drift": float(drift.max()), "fraction_changed": float((drift > 0).mean()), "n_probe": len(drift)}


SWEEP_AXES = ("encode_mode", "t_encode", "loss_variant")


def run_ablation_sweep(axis: str, values: list, exp: Experiment, seed: int = 0, probe_size: int = 100) -> list[dict]:
    """One pretrain + finetune cycle per axis value with shared seeds.

    Rows carry the finetune metrics and pretrain loss; encode-mode rows also
    carry the cross-epoch feature drift, which is checked against the mode.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    rows = []
    for value in values:
        if axis == "encode_mode":
            e = replace(exp, spec=replace(exp.spec, encode=replace(exp.spec.encode, variant=value)))
        elif axis == "t_encode":
            e = replace(exp, spec=replace(exp.spec, encode=replace(exp.spec.encode, t_encode=int(value))))
        else:
            if value not in LOSS_VARIANTS:
                raise ConfigError(f"unknown loss variant {value!r}")
            e = replace(exp, variant=value)
        e.spec.encode.validate(e.teacher.schedule.T)
        pre = run_pretrain(e, seed, run_id=f"sweep-{axis}-{value}-pretrain")
        fin = run_finetune(e, pre.backbone, seed, run_id=f"sweep-{axis}-{value}-finetune")
        row = {
            "axis": axis,
            "value": value,
            "seed": seed,
            "pretrain_final_loss": pre.report.losses[-1]["total"],
            "miou": fin.final["miou"],
            "pixel_accuracy": fin.final["pixel_accuracy"],
            "pretrain": pre.report,
            "finetune": fin,
        }
        if axis == "encode_mode":
            drift = epoch_feature_drift(e.teacher, e.unlabeled[:probe_size], e.spec)
            row.update(drift)
            if value == "deterministic" and drift["max_drift"] > 1e-6:
                raise AssertionError(f"deterministic encoding drifted across epochs by {drift['max_drift']}")
            if value == "stochastic" and drift["fraction_changed"] <= 0.99:
                raise AssertionError(f"stochastic encoding left {1 - drift['fraction_changed']:.2%} of samples unchanged")
        rows.append(row)
    return rows


def format_table(rows: list[dict], columns=("axis", "value", "miou", "pixel_accuracy", "pretrain_final_loss")) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for row in rows:
        cells = [f"{row[c]:.3f}" if isinstance(row.get(c), float) else str(row.get(c, "")) for c in columns]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)
