"""Command-line entry point: one subcommand per pipeline stage plus reporting.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import torch

from gendistill.backbone import build_backbone, load_backbone
from gendistill.config import ExperimentConfig, load_config
from gendistill.data import (
    CachedFeatureSource,
    EncodedFeatureSource,
    export_cache,
    generate_shapes_dataset,
    iterate_encoded,
)
from gendistill.errors import CacheFormatError, ConfigError, ShapeError
from gendistill.harness import (
    LOSS_COLUMNS,
    LOSS_VARIANTS,
    SWEEP_AXES,
    Experiment,
    MetricsReport,
    format_table,
    make_student,
    pretrain_feature_distill,
    pretrain_mix_distill,
    run_ablation_sweep,
    run_finetune,
)
from gendistill.interpreter import build_interpreter, evaluate_interpreter, train_interpreter
from gendistill.rng import seed_everything
from gendistill.teacher import load_teacher, save_teacher, train_teacher

log = logging.getLogger("gendistill")

COMMANDS = ("train-teacher", "train-interpreter", "pretrain", "finetune", "sweep", "export-cache", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gendistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--config", type=Path, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. distill.lambda_at=0 (repeatable)")
        p.add_argument("--output", type=Path, help="output root (defaults to output_dir from the config)")
        p.add_argument("--run-id", help="subdirectory name under the output root")
        return p

    common(sub.add_parser("train-teacher", help="train the diffusion teacher on unlabeled images"))
    common(sub.add_parser("train-interpreter", help="fit the feature interpreter on labeled images"))
    common(sub.add_parser("pretrain", help="distill teacher features into the student backbone"))
    common(sub.add_parser("finetune", help="finetune a backbone (or random init) for segmentation"))
    sw = common(sub.add_parser("sweep", help="pretrain + finetune once per value of one axis"))
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    common(sub.add_parser("export-cache", help="write encoded teacher features to an offline cache"))
    rp = sub.add_parser("report", help="summarize run directories into markdown and loss plots")
    rp.add_argument("--runs", type=Path, required=True)
    rp.add_argument("--output", type=Path, help="where to write summary.md and plots (defaults to --runs)")
    return parser


# ------------------------------------------------------------------ helpers


def _run_dir(args, cfg: ExperimentConfig, default: str) -> Path:
    root = args.output or Path(cfg.output_dir)
    d = root / (args.run_id or default)
    d.mkdir(parents=True, exist_ok=True)
    return d


def load_datasets(cfg: ExperimentConfig):
    """(unlabeled, labeled, labeled masks, test, test masks) per the dataset section."""
    d = cfg.dataset
    if d.source == "shapes":
        unl, _ = generate_shapes_dataset(d.n_unlabeled, d.num_classes, d.resolution, seed=d.data_seed)
        lab, lab_m = generate_shapes_dataset(d.n_labeled, d.num_classes, d.resolution, seed=d.data_seed + 1)
        test, test_m = generate_shapes_dataset(d.n_test, d.num_classes, d.resolution, seed=d.data_seed + 2)
        return unl, lab, lab_m, test, test_m
    path = Path(d.source)
    if not path.exists():
        raise ConfigError(f"dataset.source {d.source!r} is neither 'shapes' nor an existing file")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    try:
        return (blob["unlabeled"], blob["labeled"], blob["labeled_masks"], blob["test"], blob["test_masks"])
    except KeyError as err:
        raise ConfigError(f"{path} is missing key {err}") from None


def _teacher(cfg: ExperimentConfig, unlabeled, seed: int, out: Path):
    if cfg.teacher.checkpoint:
        teacher, _ = load_teacher(cfg.teacher.checkpoint)
        return teacher
    log.info("no teacher.checkpoint given; training a teacher first")
    teacher = _fit_teacher(cfg, unlabeled, seed)
    save_teacher(teacher, out / "teacher.pt")
    return teacher


def _fit_teacher(cfg: ExperimentConfig, unlabeled, seed: int):
    t = cfg.teacher
    return train_teacher(unlabeled, t.epochs, seed=seed, unet_config=replace(t.unet, seed=seed),
                         schedule=cfg.schedule(), batch_size=t.batch_size, lr=t.lr, log=log.info)


def _interpreter(cfg: ExperimentConfig, teacher, lab, lab_m, seed: int):
    i = cfg.interpreter
    icfg = cfg.interpreter_config(teacher.feature_channels)
    if i.checkpoint:
        interp = build_interpreter(icfg, seed)
        interp.load_state_dict(torch.load(i.checkpoint, map_location="cpu", weights_only=False)["state_dict"])
        return interp.eval()
    return train_interpreter(teacher, lab[:i.n_labeled], lab_m[:i.n_labeled], icfg, i.epochs, seed=seed,
                             run=replace(i.run, seed=seed), distill=cfg.distill_config(), t_encode=i.t_encode,
                             augmentation=cfg.dataset.augmentation, log=log.info)


def _experiment(cfg: ExperimentConfig, teacher, data, interpreter=None) -> Experiment:
    unl, lab, lab_m, test, test_m = data
    return Experiment(
        teacher, unl, lab, lab_m, test, test_m, cfg.dataset_spec(),
        backbone=cfg.backbone_config(0), regressor=cfg.regressor_config(), distill=cfg.distill_config(),
        pretrain_run=cfg.run.pretrain, finetune_run=cfg.run.finetune, num_classes=cfg.dataset.num_classes,
        freeze=cfg.run.freeze, interpreter=interpreter, variant=cfg.distill.variant, log_fn=log.info,
    )


def _snapshot(report: MetricsReport, cfg: ExperimentConfig, seed: int, command: str) -> None:
    report.config = {**report.config, "experiment": cfg.to_dict(), "command": command, "cli_seed": seed}


# ----------------------------------------------------------------- commands


def cmd_train_teacher(args, cfg):
    out = _run_dir(args, cfg, f"teacher-seed{args.seed}")
    unl = load_datasets(cfg)[0]
    start = time.perf_counter()
    teacher = _fit_teacher(cfg, unl, args.seed)
    save_teacher(teacher, out / "teacher.pt")
    report = MetricsReport(
        run_id=out.name,
        losses=[{"epoch": e, "total": v} for e, v in enumerate(teacher.history)],
        final={"held_out_mse": teacher.history[-1]},
        seeds={"run": args.seed},
        wall_clock_seconds=time.perf_counter() - start,
    )
    _snapshot(report, cfg, args.seed, "train-teacher")
    report.write(out)
    return out


def cmd_train_interpreter(args, cfg):
    out = _run_dir(args, cfg, f"interpreter-seed{args.seed}")
    data = load_datasets(cfg)
    start = time.perf_counter()
    teacher = _teacher(cfg, data[0], args.seed, out)
    interp = _interpreter(replace(cfg, interpreter=replace(cfg.interpreter, checkpoint=None)), teacher,
                          data[1], data[2], args.seed)
    torch.save({"config": asdict(interp.config), "state_dict": interp.state_dict()}, out / "interpreter.pt")
    test = evaluate_interpreter(interp, teacher, data[3], data[4], cfg.interpreter.t_encode)
    report = MetricsReport(
        run_id=out.name,
        losses=[{"epoch": e, "total": v} for e, v in enumerate(interp.history)],
        final={"train_miou": interp.history[-1], "miou": test.miou(), "pixel_accuracy": test.pixel_accuracy()},
        seeds={"run": args.seed},
        wall_clock_seconds=time.perf_counter() - start,
    )
    _snapshot(report, cfg, args.seed, "train-interpreter")
    report.write(out)
    return out


def cmd_pretrain(args, cfg):
    out = _run_dir(args, cfg, f"pretrain-{cfg.distill.variant}-seed{args.seed}")
    data = load_datasets(cfg)
    teacher = _teacher(cfg, data[0], args.seed, out)
    mix = LOSS_VARIANTS[cfg.distill.variant][2] > 0
    interp = _interpreter(cfg, teacher, data[1], data[2], args.seed) if mix else None
    exp = _experiment(cfg, teacher, data, interp)
    backbone, regressor, head = make_student(exp, args.seed)
    run = replace(cfg.run.pretrain, seed=args.seed)
    if cfg.dataset.cache == "offline":
        if not cfg.dataset.cache_path:
            raise ConfigError("dataset.cache=offline needs dataset.cache_path")
        source = CachedFeatureSource(cfg.dataset.cache_path)
    else:
        source = EncodedFeatureSource(teacher, data[0], cfg.dataset_spec(), interpreter=interp)
    if mix:
        res = pretrain_mix_distill(backbone, regressor, head, source, run, cfg.distill_config(),
                                   variant=cfg.distill.variant, run_id=out.name, log_fn=log.info)
    else:
        res = pretrain_feature_distill(backbone, regressor, source, run, cfg.distill_config(),
                                       variant=cfg.distill.variant, run_id=out.name, log_fn=log.info)
    _snapshot(res.report, cfg, args.seed, "pretrain")
    res.save(out / "checkpoint.pt")
    res.report.write(out)
    return out


def cmd_finetune(args, cfg):
    out = _run_dir(args, cfg, f"finetune-seed{args.seed}")
    data = load_datasets(cfg)
    if cfg.backbone.checkpoint:
        backbone, _ = load_backbone(cfg.backbone.checkpoint)
    else:
        log.info("no backbone.checkpoint given; finetuning from random init")
        backbone = build_backbone(cfg.backbone_config(args.seed))
    exp = _experiment(cfg, None, data)
    report = run_finetune(exp, backbone, args.seed, run_id=out.name)
    report.final["init"] = cfg.backbone.checkpoint or "random"
    _snapshot(report, cfg, args.seed, "finetune")
    report.write(out)
    return out


def cmd_sweep(args, cfg):
    out = _run_dir(args, cfg, f"sweep-{args.axis}-seed{args.seed}")
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    if args.axis == "t_encode":
        try:
            values = [int(v) for v in values]
        except ValueError:
            raise ConfigError(f"t_encode values must be integers, got {args.values!r}") from None
    data = load_datasets(cfg)
    teacher = _teacher(cfg, data[0], args.seed, out)
    needs_interp = args.axis == "loss_variant" and any(LOSS_VARIANTS.get(v, (0, 0, 0))[2] > 0 for v in values)
    interp = _interpreter(cfg, teacher, data[1], data[2], args.seed) if needs_interp else None
    rows = run_ablation_sweep(args.axis, values, _experiment(cfg, teacher, data, interp), seed=args.seed)
    extra = ("max_drift", "fraction_changed") if args.axis == "encode_mode" else ()
    table = format_table(rows, ("axis", "value", "miou", "pixel_accuracy", "pretrain_final_loss") + extra)
    (out / "table.md").write_text(table + "\n")
    for row in rows:
        for kind in ("pretrain", "finetune"):
            _snapshot(row[kind], cfg, args.seed, "sweep")
            row[kind].write(out / f"{row['value']}" / kind)
    print(table)
    return out


def cmd_export_cache(args, cfg):
    out = _run_dir(args, cfg, f"cache-seed{args.seed}")
    data = load_datasets(cfg)
    teacher = _teacher(cfg, data[0], args.seed, out)
    path = Path(cfg.dataset.cache_path) if cfg.dataset.cache_path else out / "features.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    spec = cfg.dataset_spec()
    n = export_cache(iterate_encoded(teacher, data[0], spec, epoch=0), path)
    log.info("wrote %d records to %s (%d bytes)", n, path, path.stat().st_size)
    return out


def _plot_losses(metrics_path: Path, png: Path) -> bool:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_path = metrics_path.with_name("losses.csv")
    if not csv_path.exists():
        return False
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return False
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for col in LOSS_COLUMNS:
        vals = [float(r[col]) for r in rows]
        if any(vals):
            ax.plot(epochs, vals, label=col)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return True


def cmd_report(args):
    runs = args.runs
    if not runs.is_dir():
        raise ConfigError(f"--runs {runs} is not a directory")
    out = args.output or runs
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    found = sorted(runs.rglob("metrics.json"))
    if not found:
        raise ConfigError(f"no metrics.json found under {runs}")
    lines = ["| run | command | seed | epochs | final loss | mIoU | pixel acc |", "|---|---|---|---|---|---|---|"]
    for path in found:
        rep = MetricsReport.read(path)
        name = path.parent.relative_to(runs).as_posix() or rep.run_id
        final_loss = rep.losses[-1].get("total") if rep.losses else None
        cells = [
            name,
            str(rep.config.get("command", "")),
            str(rep.seeds.get("run", "")),
            str(len(rep.losses)),
            f"{final_loss:.4f}" if isinstance(final_loss, (int, float)) else "",
            f"{rep.final['miou']:.2f}" if isinstance(rep.final.get("miou"), (int, float)) else "",
            f"{rep.final['pixel_accuracy']:.2f}" if isinstance(rep.final.get("pixel_accuracy"), (int, float)) else "",
        ]
        lines.append("| " + " | ".join(cells) + " |")
        png = plots / (name.replace("/", "__") + ".png")
        if _plot_losses(path, png):
            lines.append(f"|  ![{name}]({png.relative_to(out).as_posix()}) | | | | | | |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return out


HANDLERS = {
    "train-teacher": cmd_train_teacher,
    "train-interpreter": cmd_train_interpreter,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "export-cache": cmd_export_cache,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        if args.command == "report":
            cmd_report(args)
            return 0
        cfg = load_config(args.config, args.overrides)
        seed_everything(args.seed)
        out = HANDLERS[args.command](args, cfg)
        log.info("outputs in %s", out)
        return 0
    except (ConfigError, ShapeError, CacheFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - any other failure is a runtime failure
        log.exception("runtime failure")
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
