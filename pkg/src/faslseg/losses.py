"""Tversky, cross-entropy and their weighted mix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, as_tensor


@dataclass
class LossConfig:
    tversky_alpha: float = 0.7  # false-positive weight
    tversky_beta: float = 0.3  # false-negative weight
    mix_alpha: float = 0.5  # Tversky share of the total
    smooth_eps: float = 1e-7

    def validate(self) -> None:
        if self.tversky_alpha <= 0 or self.tversky_beta <= 0:
            raise ConfigError(
                f"tversky weights must be positive, got alpha={self.tversky_alpha} beta={self.tversky_beta}"
            )
        if not 0.0 <= self.mix_alpha <= 1.0:
            raise ConfigError(f"loss.mix_alpha must lie in [0, 1], got {self.mix_alpha}")
        if self.smooth_eps < 0:
            raise ConfigError(f"loss.smooth_eps must be >= 0, got {self.smooth_eps}")


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(B, H, W) integer labels -> (B, C, H, W) one-hot."""
    labels = np.asarray(labels)
    _check_labels(labels, num_classes)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None], 1.0, axis=1)
    return out


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ContractError(f"label {labels[idx]} at pixel {idx} is outside [0, {num_classes})")


def tversky_index(probs: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    """Per-class soft Tversky index (TP + eps) / (TP + a*FP + b*FN + eps), shape (C,)."""
    cfg = cfg or LossConfig()
    probs = as_tensor(probs)
    target = as_tensor(target, dtype=probs.dtype)
    if probs.shape != target.shape or probs.ndim != 4:
        raise DimensionError(f"tversky needs matching (B, C, H, W) inputs, got {probs.shape} and {target.shape}")
    p = probs.data
    if p.min() < -1e-6 or p.max() > 1 + 1e-6:
        raise ContractError(f"probabilities must lie in [0, 1], got range [{p.min()}, {p.max()}]")
    axes = (0, 2, 3)
    tp = (probs * target).sum(axis=axes)
    fp = (probs * (1.0 - target)).sum(axis=axes)
    fn = ((1.0 - probs) * target).sum(axis=axes)
    eps = cfg.smooth_eps
    return (tp + eps) / (tp + cfg.tversky_alpha * fp + cfg.tversky_beta * fn + eps)


def tversky_loss(probs: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    """1 - mean over classes of the Tversky index."""
    return 1.0 - tversky_index(probs, target, cfg).mean()


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over pixels of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DimensionError(f"cross entropy needs logits (B, C, H, W) and labels (B, H, W), got {logits.shape} and {labels.shape}")
    target = one_hot(labels, logits.shape[1], dtype=logits.dtype)
    logp = F.log_softmax(logits, axis=1)
    return -(logp * target).sum() * (1.0 / labels.size)


def combined_loss(logits: Tensor, labels, cfg: LossConfig | None = None) -> Tensor:
    """mix * Tversky(softmax(logits), one_hot(labels)) + (1 - mix) * CE."""
    cfg = cfg or LossConfig()
    labels = np.asarray(labels)
    ce = cross_entropy_loss(logits, labels)
    if cfg.mix_alpha == 0.0:
        return ce
    probs = F.softmax(logits, axis=1)
    tv = tversky_loss(probs, one_hot(labels, logits.shape[1], dtype=logits.dtype), cfg)
    if cfg.mix_alpha == 1.0:
        return tv
    return cfg.mix_alpha * tv + (1.0 - cfg.mix_alpha) * ce
