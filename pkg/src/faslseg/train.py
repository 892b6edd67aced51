"""Adam optimizer, training loop and evaluation helpers."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentPolicy, SegmentationSample, augment, resize_for_model, restore_prediction, sample_rng
from .errors import ConfigError, ContractError, NumericalError
from .fileio import atomic_write_text
from .losses import LossConfig, combined_loss
from .metrics import ConfusionAccumulator, MetricReport
from .model import FaslSeg
from .tensor import Parameter, Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 100
    batch_size: int = 4
    weight_decay: float = 0.0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 1
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"train.checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("adam betas must lie in [0, 1) and eps must be positive")
        self.loss.validate()


# -- optimizer --------------------------------------------------------------------


class Adam:
    """Adam with bias correction. Moments are keyed by parameter name."""

    def __init__(self, params: Sequence[Parameter], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        adam_step(self.params, self, lr)


def adam_step(params: Sequence[Parameter], state: Adam, lr: float) -> None:
    """One bias-corrected Adam update, in place, using each parameter's ``grad``."""
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or '<unnamed>'} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - update.astype(p.dtype)


# -- batching / inference -------------------------------------------------------


def batch_images(samples: Sequence[SegmentationSample], dtype) -> Tensor:
    x = np.stack([s.image for s in samples]).astype(dtype)
    return Tensor((x - 0.5) / 0.25)


def batch_masks(samples: Sequence[SegmentationSample]) -> np.ndarray:
    return np.stack([s.mask for s in samples]).astype(np.int64)


def predict(model: FaslSeg, samples: Sequence[SegmentationSample], batch_size: int = 4) -> list[np.ndarray]:
    """Argmax masks at each sample's original resolution."""
    size = model.cfg.image_size
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(samples), batch_size):
                chunk = samples[i : i + batch_size]
                inputs = [resize_for_model(s, size) for s in chunk]
                logits = model(batch_images(inputs, model.dtype)).data
                for s, lg in zip(chunk, logits):
                    out.append(restore_prediction(lg.argmax(axis=0), s.original_size))
    finally:
        model.train(was_training)
    return out


def evaluate(
    model: FaslSeg,
    samples: Sequence[SegmentationSample],
    batch_size: int = 4,
    dice_variant: str = "standard",
    class_names: list[str] | None = None,
) -> MetricReport:
    acc = ConfusionAccumulator(model.cfg.num_classes)
    for s, pred in zip(samples, predict(model, samples, batch_size)):
        acc.accumulate(pred, s.mask)
    return MetricReport.from_accumulator(acc, class_names, dice_variant)


# -- training loop ----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_miou: float
    val_dice: float
    wall_seconds: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def to_tsv(self) -> str:
        # wall time lives in timing_tsv so that this file is reproducible
        lines = ["epoch\ttrain_loss\tval_mIoU\tval_Dice"]
        lines += [f"{r.epoch}\t{r.train_loss!r}\t{r.val_miou!r}\t{r.val_dice!r}" for r in self.epochs]
        return "\n".join(lines) + "\n"

    def timing_tsv(self) -> str:
        lines = ["epoch\twall_seconds"] + [f"{r.epoch}\t{r.wall_seconds:.3f}" for r in self.epochs]
        return "\n".join(lines) + "\n"

    def steps_tsv(self) -> str:
        return "step\tloss\n" + "".join(f"{i + 1}\t{v!r}\n" for i, v in enumerate(self.step_losses))


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the final short batch is kept."""
    order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_step(model: FaslSeg, optimizer: Adam, batch: Sequence[SegmentationSample], cfg: TrainConfig) -> float:
    images = batch_images(batch, model.dtype)
    labels = batch_masks(batch)
    loss = combined_loss(model(images), labels, cfg.loss)
    value = float(loss.item())
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    model.zero_grad()
    loss.backward()
    for p in optimizer.params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalError(f"non-finite gradient in {p.name}")
    optimizer.step(cfg.lr)
    return value


def fit(
    model: FaslSeg,
    train_samples: Sequence[SegmentationSample],
    cfg: TrainConfig,
    val_samples: Sequence[SegmentationSample] | None = None,
    out_dir: str | Path | None = None,
    manifest: str = "",
    resume_from: str | Path | None = None,
    max_steps: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainingLog:
    """Train ``model`` in place.

    Data order and augmentation draw from (seed, epoch, sample id), so a run
    resumed from an epoch checkpoint continues exactly like an uninterrupted one.
    With ``out_dir`` set, ``last`` and ``best`` checkpoints plus the log files
    are written there.
    """
    cfg.validate()
    if not train_samples:
        raise ContractError("training set is empty")
    size = model.cfg.image_size
    train_samples = [resize_for_model(s, size) for s in train_samples]
    val_samples = list(val_samples or [])
    out = Path(out_dir) if out_dir is not None else None

    model.train()
    optimizer = Adam(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
    log = TrainingLog()
    start_epoch = 1
    best = -math.inf
    if resume_from is not None:
        state = load_checkpoint(resume_from, model, manifest or None, optimizer)
        start_epoch = int(state.get("epoch", 0)) + 1
        best = float(state.get("best_val_miou", "-inf"))
        log = _read_log(Path(resume_from))

    step = optimizer.step_count
    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in epoch_batches(len(train_samples), cfg.batch_size, cfg.seed, epoch):
            batch = [augment(train_samples[i], sample_rng(cfg.seed, train_samples[i].id, epoch), cfg.augment) for i in idx]
            try:
                value = train_step(model, optimizer, batch, cfg)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, step {step + 1}: {exc}") from exc
            step += 1
            losses.append(value)
            log.step_losses.append(value)
            if max_steps is not None and step >= max_steps:
                break
        if val_samples:
            report = evaluate(model, val_samples, cfg.batch_size)
            val_miou, val_dice = report.mean_iou, report.mean_dice
        else:
            val_miou = val_dice = float("nan")
        model.train()
        record = EpochRecord(epoch, float(np.mean(losses)), val_miou, val_dice, time.perf_counter() - t0)
        log.epochs.append(record)
        logger.info(
            "epoch %d loss %.5f val mIoU %.4f Dice %.4f (%.1fs)", epoch, record.train_loss, val_miou, val_dice,
            record.wall_seconds,
        )
        if on_epoch is not None:
            on_epoch(record)
        done = epoch == cfg.epochs or (max_steps is not None and step >= max_steps)
        improved = not math.isnan(val_miou) and val_miou > best
        if improved:
            best = val_miou
        if out is not None:
            state = {"epoch": epoch, "step": step, "best_val_miou": repr(best)}
            if improved:
                save_checkpoint(out / "checkpoints" / "best", model, manifest, optimizer, state)
            if epoch % cfg.checkpoint_every == 0 or done:
                save_checkpoint(out / "checkpoints" / "last", model, manifest, optimizer, state)
                _write_log(out / "checkpoints" / "last", log, timing=False)
            _write_log(out, log)
        if done:
            break
    return log


def _write_log(directory: Path, log: TrainingLog, timing: bool = True) -> None:
    # checkpoints carry only the reproducible logs; wall times stay in the run directory
    atomic_write_text(directory / "train_log.tsv", log.to_tsv())
    atomic_write_text(directory / "steps.tsv", log.steps_tsv())
    if timing:
        atomic_write_text(directory / "timing.tsv", log.timing_tsv())


def _read_log(directory: Path) -> TrainingLog:
    log = TrainingLog()
    if (directory / "train_log.tsv").is_file():
        lines = (directory / "train_log.tsv").read_text().splitlines()[1:]
        walls = {}
        # a checkpoint at <run>/checkpoints/<name> finds its wall times in <run>
        timing = next((d / "timing.tsv" for d in (directory, directory.parent.parent) if (d / "timing.tsv").is_file()), None)
        if timing is not None:
            for line in timing.read_text().splitlines()[1:]:
                e, w = line.split("\t")
                walls[int(e)] = float(w)
        for line in lines:
            e, loss, miou_v, dice_v = line.split("\t")
            log.epochs.append(EpochRecord(int(e), float(loss), float(miou_v), float(dice_v), walls.get(int(e), 0.0)))
    if (directory / "steps.tsv").is_file():
        log.step_losses = [float(line.split("\t")[1]) for line in (directory / "steps.tsv").read_text().splitlines()[1:]]
    return log
