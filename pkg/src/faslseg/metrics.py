"""Per-class confusion counts and the IoU / Dice / FPR evaluation suite."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

EPS = 1e-7
DICE_VARIANTS = ("standard", "as_printed")


class ConfusionAccumulator:
    """Running TP/FP/FN/TN pixel counts for each class.

    Accumulators built on disjoint parts of a dataset can be merged with ``+``.
    """

    def __init__(self, num_classes: int, eps: float = EPS):
        if num_classes < 1:
            raise ContractError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.eps = eps
        # rows: ground truth, columns: prediction
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> ConfusionAccumulator:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in extent")
        for name, mask in (("prediction", pred), ("ground truth", gt)):
            bad = (mask < 0) | (mask >= self.num_classes)
            if bad.any():
                where = tuple(int(i) for i in np.argwhere(bad)[0])
                raise ContractError(f"{name} value {mask[where]} at pixel {where} is outside [0, {self.num_classes})")
        n = self.num_classes
        flat = gt.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
        self.matrix += np.bincount(flat, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: ConfusionAccumulator) -> ConfusionAccumulator:
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge accumulators with different class counts")
        out = ConfusionAccumulator(self.num_classes, self.eps)
        out.matrix = self.matrix + other.matrix
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - np.diag(self.matrix)

    @property
    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - np.diag(self.matrix)

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn

    def present(self) -> np.ndarray:
        """Classes that occur in the prediction or the ground truth."""
        return (self.tp + self.fp + self.fn) > 0


def _mean(values: np.ndarray, acc: ConfusionAccumulator, exclude_absent: bool) -> float:
    if exclude_absent:
        keep = acc.present()
        return float(values[keep].mean()) if keep.any() else float("nan")
    return float(values.mean())


def miou(acc: ConfusionAccumulator, exclude_absent: bool = False) -> tuple[np.ndarray, float]:
    """Per-class (TP + eps) / (TP + FP + FN + eps) and its mean.

    Classes absent from both masks score eps / eps = 1 unless excluded.
    """
    tp = acc.tp.astype(np.float64)
    union = tp + acc.fp + acc.fn
    per_class = (tp + acc.eps) / (union + acc.eps)
    return per_class, _mean(per_class, acc, exclude_absent)


def dice(acc: ConfusionAccumulator, variant: str = "standard", exclude_absent: bool = False) -> tuple[np.ndarray, float]:
    """Per-class Dice and its mean.

    ``standard`` is (2TP + eps) / (2TP + FP + FN + eps). ``as_printed`` divides
    by the union instead, (2TP + eps) / (TP + FP + FN + eps), which reaches 2 on
    perfect masks; it is kept as an alternative reporting convention.
    """
    tp = acc.tp.astype(np.float64)
    if variant == "standard":
        denom = 2 * tp + acc.fp + acc.fn
    elif variant == "as_printed":
        denom = tp + acc.fp + acc.fn
    else:
        raise ContractError(f"unknown dice variant {variant!r}; expected one of {DICE_VARIANTS}")
    per_class = (2 * tp + acc.eps) / (denom + acc.eps)
    return per_class, _mean(per_class, acc, exclude_absent)


def fpr(acc: ConfusionAccumulator, exclude_absent: bool = False) -> tuple[np.ndarray, float]:
    """Per-class (FP + eps) / (FP + TN + eps) and its mean."""
    fp = acc.fp.astype(np.float64)
    per_class = (fp + acc.eps) / (fp + acc.tn + acc.eps)
    return per_class, _mean(per_class, acc, exclude_absent)


@dataclass
class MetricReport:
    class_names: list[str]
    iou: np.ndarray
    dice: np.ndarray
    fpr: np.ndarray
    mean_iou: float
    mean_dice: float
    mean_fpr: float
    dice_variant: str

    @classmethod
    def from_accumulator(
        cls,
        acc: ConfusionAccumulator,
        class_names: list[str] | None = None,
        dice_variant: str = "standard",
        exclude_absent: bool = False,
    ) -> MetricReport:
        names = class_names or [f"class_{i}" for i in range(acc.num_classes)]
        if len(names) != acc.num_classes:
            raise ContractError(f"{len(names)} class names for {acc.num_classes} classes")
        iou_c, iou_m = miou(acc, exclude_absent)
        dice_c, dice_m = dice(acc, dice_variant, exclude_absent)
        fpr_c, fpr_m = fpr(acc, exclude_absent)
        return cls(list(names), iou_c, dice_c, fpr_c, iou_m, dice_m, fpr_m, dice_variant)

    def rows(self) -> list[tuple[str, float, float, float]]:
        out = [(n, float(a), float(b), float(c)) for n, a, b, c in zip(self.class_names, self.iou, self.dice, self.fpr)]
        out.append(("mean", self.mean_iou, self.mean_dice, self.mean_fpr))
        return out

    def to_text(self) -> str:
        header = ("class", "IoU", f"Dice[{self.dice_variant}]", "FPR")
        body = [(n, f"{a:.4f}", f"{b:.4f}", f"{c:.4f}") for n, a, b, c in self.rows()]
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
        lines = []
        for j, r in enumerate([header, *body]):
            if j == len(body):  # rule above the mean row
                lines.append("  ".join("-" * w for w in widths))
            lines.append("  ".join(r[0].ljust(widths[0]) if i == 0 else r[i].rjust(widths[i]) for i in range(4)))
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write(f"class\tiou\tdice_{self.dice_variant}\tfpr\n")
        for n, a, b, c in self.rows():
            buf.write(f"{n}\t{a!r}\t{b!r}\t{c!r}\n")
        return buf.getvalue()
