"""Command-line entry point: train, eval, ablate, info and synth.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, read_manifest
from .config import RunConfig, from_text, to_text
from .data import load_class_names, load_mask_dir, save_mask_dir, split_samples, synth_dataset
from .errors import ConfigError, DataError, NumericalError
from .fileio import atomic_write_bytes, atomic_write_text
from .functional import count_macs
from .metrics import DICE_VARIANTS, ConfusionAccumulator, MetricReport
from .model import ABLATION_ROWS, FaslSeg, count_parameters, parameter_breakdown
from .tensor import Tensor, no_grad
from .train import evaluate, fit, predict

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
REFERENCE_PARAMS = 81.99e6

log = logging.getLogger("faslseg")


# -- shared helpers -----------------------------------------------------------------


def _resolve_config(args) -> RunConfig:
    text = ""
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    extra = []
    if getattr(args, "preset", None):
        extra.append(f"model.preset = {args.preset}")
    if getattr(args, "seed", None) is not None:
        extra.append(f"train.seed = {args.seed}")
    for item in getattr(args, "set", None) or []:
        extra.append(item)
    source = args.config if getattr(args, "config", None) else "<defaults>"
    return from_text(text + "\n" + "\n".join(extra) + "\n", source, preset="toy")


def _load_samples(args, cfg: RunConfig, num_classes: int | None = None):
    if getattr(args, "synthetic", False):
        return synth_dataset(cfg.data.synthetic_n, cfg.model.image_size, cfg.model.num_classes, cfg.data.synthetic_seed)
    if not getattr(args, "data", None):
        raise ConfigError("either --data DIR or --synthetic is required")
    return load_mask_dir(args.data, num_classes or cfg.model.num_classes)


def _class_names(args, num_classes: int) -> list[str] | None:
    if not getattr(args, "class_names", None):
        return None
    mapping = load_class_names(args.class_names)
    if sorted(mapping) != list(range(num_classes)):
        raise ConfigError(f"class-name file lists indices {sorted(mapping)} but the model has {num_classes} classes")
    return [mapping[i] for i in range(num_classes)]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out: Path, command: str, argv: Sequence[str], cfg: RunConfig | None, outputs: list[str], start: str, end: str = "") -> None:
    lines = [
        f"command = {command}",
        f"argv = {' '.join(argv)}",
        f"code_version = faslseg {__version__}",
        f"seed = {cfg.train.seed if cfg else ''}",
        f"start = {start}",
        f"end = {end}",
        f"outputs = {','.join(outputs)}",
        "",
        "# resolved configuration",
    ]
    text = "\n".join(lines) + "\n" + (to_text(cfg) if cfg else "")
    atomic_write_text(out / "run_manifest.txt", text)


# -- commands -----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    samples = _load_samples(args, cfg)
    train_set, val_set = split_samples(samples, cfg.data.split)
    start = _now()
    outputs = ["train_log.tsv", "steps.tsv", "timing.tsv", "checkpoints/last", "checkpoints/best"]
    _write_manifest(out, "train", args.argv, cfg, outputs, start)
    model = FaslSeg(cfg.model, seed=cfg.train.seed)
    manifest = to_text(cfg)
    log.info("training %s (%d params) on %d samples, validating on %d", cfg.ablation, count_parameters(model), len(train_set), len(val_set))
    history = fit(
        model,
        train_set,
        cfg.train,
        val_set,
        out_dir=out,
        manifest=manifest,
        resume_from=args.resume,
        max_steps=args.max_steps,
    )
    _write_manifest(out, "train", args.argv, cfg, outputs, start, _now())
    last = history.epochs[-1] if history.epochs else None
    if last is not None:
        print(f"epoch {last.epoch}: train loss {last.train_loss:.5f}, val mIoU {last.val_miou:.4f}, val Dice {last.val_dice:.4f}")
    return EXIT_OK


def _overlay(sample, pred: np.ndarray, num_classes: int) -> np.ndarray:
    from .data import _PALETTE

    colors = np.vstack([[0.0, 0.0, 0.0], _PALETTE])[np.arange(num_classes) % (len(_PALETTE) + 1)]
    rgb = sample.image.transpose(1, 2, 0)
    alpha = np.where(pred > 0, 0.5, 0.0)[..., None]
    return np.clip((1 - alpha) * rgb + alpha * colors[pred], 0, 1)


def cmd_eval(args) -> int:
    manifest = read_manifest(args.checkpoint)
    cfg = from_text(manifest, f"{args.checkpoint}/manifest.txt")
    n = cfg.model.num_classes
    names = _class_names(args, n)
    if args.synthetic:
        samples = _load_samples(args, cfg)
    else:
        if not args.data:
            raise ConfigError("either --data DIR or --synthetic is required")
        samples = load_mask_dir(args.data, 256)
        top = max(int(s.mask.max()) for s in samples)
        if top >= n:
            raise ConfigError(f"data contains class index {top} but the checkpoint model has {n} classes")
    out = Path(args.out)
    start = _now()
    outputs = ["metrics.txt", "metrics.tsv"] + (["overlays/"] if args.overlay else [])
    _write_manifest(out, "eval", args.argv, cfg, outputs, start)

    if args.oracle:
        preds = [s.mask.copy() for s in samples]
    else:
        model = FaslSeg(cfg.model, seed=cfg.train.seed)
        load_checkpoint(args.checkpoint, model, manifest)
        preds = predict(model, samples, cfg.train.batch_size)
    acc = ConfusionAccumulator(n)
    for s, p in zip(samples, preds):
        acc.accumulate(p, s.mask)
    report = MetricReport.from_accumulator(acc, names, args.dice_variant, exclude_absent=args.exclude_absent)
    atomic_write_text(out / "metrics.txt", report.to_text())
    atomic_write_text(out / "metrics.tsv", report.to_tsv())
    if args.overlay:
        from io import BytesIO

        from PIL import Image

        for s, p in zip(samples, preds):
            buf = BytesIO()
            Image.fromarray((_overlay(s, p, n) * 255).round().astype(np.uint8)).save(buf, format="PNG")
            atomic_write_bytes(out / "overlays" / f"{s.id}.png", buf.getvalue())
    _write_manifest(out, "eval", args.argv, cfg, outputs, start, _now())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown or not rows:
        raise ConfigError(f"unknown ablation rows {unknown}; valid rows: {', '.join(ABLATION_ROWS)}")
    base = _resolve_config(args)
    out = Path(args.out)
    start = _now()
    _write_manifest(out, "ablate", args.argv, base, [f"{r}/" for r in rows] + ["ablation_summary.tsv"], start)
    samples = _load_samples(args, base)
    train_set, val_set = split_samples(samples, base.data.split)
    eval_set = val_set or train_set
    results = []
    for row in rows:
        # the row fixes the architecture; training and data settings come from the base config
        row_cfg = RunConfig.default(base.model.preset, base.model.num_classes, row)
        row_cfg.train, row_cfg.data = base.train, base.data
        row_dir = out / row
        _write_manifest(row_dir, f"ablate:{row}", args.argv, row_cfg, ["train_log.tsv", "checkpoints/"], _now())
        model = FaslSeg(row_cfg.model, seed=row_cfg.train.seed)
        fit(model, train_set, row_cfg.train, val_set, out_dir=row_dir, manifest=to_text(row_cfg), max_steps=args.max_steps)
        report = evaluate(model, eval_set, row_cfg.train.batch_size)
        results.append((row, report.mean_iou, report.mean_dice, count_parameters(model)))
        log.info("%s: mIoU %.4f Dice %.4f", row, report.mean_iou, report.mean_dice)
    tsv = "model\tmIoU\tDice\tparams\n" + "".join(f"{r}\t{a!r}\t{b!r}\t{n}\n" for r, a, b, n in results)
    atomic_write_text(out / "ablation_summary.tsv", tsv)
    text = f"{'Model':<10}  {'mIoU':>7}  {'Dice':>7}  {'params':>10}\n" + "".join(
        f"{r:<10}  {a:7.4f}  {b:7.4f}  {n:10d}\n" for r, a, b, n in results
    )
    atomic_write_text(out / "ablation_summary.txt", text)
    _write_manifest(out, "ablate", args.argv, base, [f"{r}/" for r in rows] + ["ablation_summary.tsv"], start, _now())
    print(text, end="")
    return EXIT_OK


def cmd_info(args) -> int:
    cfg = _resolve_config(args)
    model = FaslSeg(cfg.model, seed=cfg.train.seed)
    total = count_parameters(model)
    lines = [f"configuration: {cfg.ablation} ({cfg.model.preset} preset, {cfg.model.num_classes} classes)"]
    for name, n in parameter_breakdown(model):
        lines.append(f"  {name:<24}{n:>12,d}")
    lines.append(f"  {'total':<24}{total:>12,d}")
    if cfg.model.preset == "full":
        lines.append(f"  reference FASL-Seg:     {REFERENCE_PARAMS:>12,.0f}  (ratio {total / REFERENCE_PARAMS:.3f})")
    if not args.no_macs:
        size = args.input_size or cfg.model.image_size
        model.eval()
        with no_grad(), count_macs() as counter:
            model(Tensor(np.zeros((1, 3, size, size), dtype=np.float32)))
        lines.append(f"multiply-accumulates at {size}x{size}: {counter.total:,d} ({2 * counter.total / 1e9:.2f} GFLOPs)")
    print("\n".join(lines))
    return EXIT_OK


def cmd_synth(args) -> int:
    samples = synth_dataset(args.n, args.size, args.num_classes, args.seed)
    save_mask_dir(samples, args.out)
    names = "".join(f"{i}\t{'background' if i == 0 else f'class_{i}'}\n" for i in range(args.num_classes))
    atomic_write_text(Path(args.out) / "classes.txt", names)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faslseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"faslseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--preset", choices=["toy", "small", "full"], help="model scale preset")
        p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if data:
            src = p.add_mutually_exclusive_group()
            src.add_argument("--data", help="directory with images/ and masks/")
            src.add_argument("--synthetic", action="store_true", help="use the built-in synthetic dataset")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--synthetic", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--dice-variant", choices=DICE_VARIANTS, default="standard")
    p.add_argument("--class-names", help="index<TAB>name file")
    p.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    p.add_argument("--overlay", action="store_true", help="write prediction overlays as PNG")
    p.add_argument("--exclude-absent", action="store_true", help="drop classes absent from both masks from means")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score several ablation rows")
    common(p)
    p.add_argument("--rows", required=True, help=f"comma-separated subset of {','.join(ABLATION_ROWS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("info", help="parameter and compute accounting")
    common(p, data=False)
    p.add_argument("--input-size", type=int)
    p.add_argument("--no-macs", action="store_true", help="skip the forward pass that counts MACs")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("synth", help="write a synthetic dataset to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
