"""Samples, augmentation, resizing policy, mask-directory I/O and synthetic scenes."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError
from .functional import bilinear_matrix

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class SegmentationSample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) int64 class indices
    original_size: tuple[int, int]
    id: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ContractError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} are not aligned")

    @property
    def size(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 42


def split_samples(samples: Sequence[SegmentationSample], spec: SplitSpec) -> tuple[list, list]:
    """Deterministic train/validation partition; independent of input order."""
    ordered = sorted(samples, key=lambda s: s.id)
    perm = np.random.default_rng(spec.seed).permutation(len(ordered))
    n_train = int(round(spec.train_fraction * len(ordered)))
    train = sorted((ordered[i] for i in perm[:n_train]), key=lambda s: s.id)
    val = sorted((ordered[i] for i in perm[n_train:]), key=lambda s: s.id)
    return train, val


def sample_rng(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Per-sample generator, so results do not depend on processing order."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample_id.encode("utf-8"))])


# -- resizing -------------------------------------------------------------------


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) array (half-pixel centres, edge clamp)."""
    H, W = image.shape[-2:]
    if (H, W) == (out_h, out_w):
        return image.copy()
    ah = bilinear_matrix(H, out_h)
    aw = bilinear_matrix(W, out_w)
    return np.matmul(np.matmul(ah, image.astype(np.float64)), aw.T).astype(image.dtype)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of an (H, W) label mask."""
    H, W = mask.shape
    return mask[nearest_indices(H, out_h)][:, nearest_indices(W, out_w)]


def resize_for_model(s: SegmentationSample, size: int = 512) -> SegmentationSample:
    """Resize to the square model input; ``original_size`` is kept for restoration."""
    if size < 1 or min(s.size) < 1:
        raise ContractError(f"cannot resize sample {s.id} of extent {s.size} to {size}")
    if s.size == (size, size):
        return s
    return replace(s, image=resize_image(s.image, size, size), mask=resize_mask(s.mask, size, size))


def restore_prediction(pred: np.ndarray, original_size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour rescale of an argmax mask back to the annotation resolution."""
    h0, w0 = original_size
    if h0 < 1 or w0 < 1:
        raise ContractError(f"original size must be positive, got {original_size}")
    if pred.shape == (h0, w0):
        return pred
    return resize_mask(pred, h0, w0)


# -- augmentation ---------------------------------------------------------------


@dataclass
class AugmentPolicy:
    resized_crop: bool = True
    hflip: bool = True
    vflip: bool = True
    flip_prob: float = 0.5
    crop_area: tuple[float, float] = (0.5, 1.0)
    crop_aspect: tuple[float, float] = (3 / 4, 4 / 3)

    @classmethod
    def none(cls) -> AugmentPolicy:
        return cls(resized_crop=False, hflip=False, vflip=False)

    def names(self) -> list[str]:
        return [n for n in ("resized_crop", "hflip", "vflip") if getattr(self, n)]


def sample_crop(rng: np.random.Generator, h: int, w: int, policy: AugmentPolicy) -> tuple[int, int, int, int]:
    """(top, left, height, width) of a random crop; falls back to the full frame."""
    area = h * w
    lo, hi = policy.crop_aspect
    for _ in range(10):
        frac = rng.uniform(*policy.crop_area)
        aspect = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        cw = int(round(math.sqrt(frac * area * aspect)))
        ch = int(round(math.sqrt(frac * area / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def crop_and_resize(s: SegmentationSample, top: int, left: int, ch: int, cw: int) -> SegmentationSample:
    if ch < 1 or cw < 1:
        raise ContractError(f"crop of {ch}x{cw} pixels is empty")
    h, w = s.size
    image = resize_image(s.image[:, top : top + ch, left : left + cw], h, w)
    mask = resize_mask(s.mask[top : top + ch, left : left + cw], h, w)
    return replace(s, image=image, mask=mask)


def hflip(s: SegmentationSample) -> SegmentationSample:
    return replace(s, image=s.image[:, :, ::-1].copy(), mask=s.mask[:, ::-1].copy())


def vflip(s: SegmentationSample) -> SegmentationSample:
    return replace(s, image=s.image[:, ::-1, :].copy(), mask=s.mask[::-1, :].copy())


def augment(s: SegmentationSample, rng: np.random.Generator, policy: AugmentPolicy) -> SegmentationSample:
    """Apply the enabled geometric transforms identically to image and mask."""
    if policy.resized_crop:
        s = crop_and_resize(s, *sample_crop(rng, *s.size, policy))
    if policy.hflip and rng.random() < policy.flip_prob:
        s = hflip(s)
    if policy.vflip and rng.random() < policy.flip_prob:
        s = vflip(s)
    return s


# -- synthetic scenes -------------------------------------------------------------

_PALETTE = np.array(
    [
        [0.85, 0.20, 0.20],
        [0.20, 0.35, 0.90],
        [0.95, 0.90, 0.15],
        [0.20, 0.80, 0.30],
        [0.80, 0.30, 0.85],
        [0.15, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.55, 0.55],
    ]
)
THIN_MAX_FRACTION = 0.02


def class_shapes(num_classes: int) -> list[str]:
    """Shape type drawn for each foreground class; the last is thin when there are >= 3 classes."""
    kinds = []
    for c in range(1, num_classes):
        if num_classes >= 3 and c == num_classes - 1:
            kinds.append("thin")
        else:
            kinds.append("rectangle" if c % 2 else "ellipse")
    return kinds


def _line_pixels(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    # Bresenham, 8-connected, one pixel wide
    pts = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr, sc = (1 if r1 > r0 else -1), (1 if c1 > c0 else -1)
    err = dc - dr
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if (r, c) == (r1, c1):
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
    return pts


def _polyline(rng: np.random.Generator, size: int, budget: int) -> list[tuple[int, int]]:
    n_vertices = int(rng.integers(3, 5))
    verts = [tuple(int(v) for v in rng.integers(2, size - 2, size=2))]
    for _ in range(n_vertices - 1):
        r, c = verts[-1]
        step = rng.integers(-size // 3, size // 3 + 1, size=2)
        verts.append((int(np.clip(r + step[0], 1, size - 2)), int(np.clip(c + step[1], 1, size - 2))))
    pixels: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    for a, b in zip(verts[:-1], verts[1:]):
        for p in _line_pixels(*a, *b):
            if p not in seen:
                if len(pixels) >= budget:
                    return pixels
                seen.add(p)
                pixels.append(p)
    return pixels


def synth_sample(index: int, size: int, num_classes: int, seed: int) -> SegmentationSample:
    rng = np.random.default_rng([seed, index])
    yy, xx = np.mgrid[0:size, 0:size] / size
    # textured background: two low-frequency gratings plus pixel noise
    f1, f2 = rng.uniform(1.0, 3.0, size=2)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.5 + 0.08 * np.sin(2 * np.pi * f1 * xx + ph1) + 0.08 * np.sin(2 * np.pi * f2 * yy + ph2)
    image = np.stack([texture * k for k in (0.55, 0.45, 0.40)])
    mask = np.zeros((size, size), dtype=np.int64)
    shapes = []
    for c, kind in enumerate(class_shapes(num_classes), start=1):
        color = _PALETTE[(c - 1) % len(_PALETTE)] + rng.uniform(-0.05, 0.05, size=3)
        if kind == "thin":
            budget = max(1, int(THIN_MAX_FRACTION * size * size) - 1)
            pts = _polyline(rng, size, budget)
            rows, cols = np.array(pts).T
            region = np.zeros((size, size), dtype=bool)
            region[rows, cols] = True
            shapes.append({"class": c, "kind": kind, "pixels": len(pts)})
        else:
            h, w = (int(v) for v in rng.integers(size // 6, size // 3 + 1, size=2))
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            region = np.zeros((size, size), dtype=bool)
            if kind == "rectangle":
                region[top : top + h, left : left + w] = True
            else:
                cy, cx = top + (h - 1) / 2, left + (w - 1) / 2
                ys, xs = np.mgrid[0:size, 0:size]
                region = ((ys - cy) / (h / 2)) ** 2 + ((xs - cx) / (w / 2)) ** 2 <= 1.0
            shapes.append({"class": c, "kind": kind, "top": top, "left": left, "height": h, "width": w})
        mask[region] = c
        image[:, region] = color[:, None]
    image = np.clip(image + rng.normal(0.0, 0.03, size=image.shape), 0.0, 1.0)
    return SegmentationSample(
        image=image, mask=mask, original_size=(size, size), id=f"synth_{index:05d}", meta={"shapes": shapes}
    )


def synth_dataset(n: int, size: int, num_classes: int, seed: int = 0) -> list[SegmentationSample]:
    """Deterministic scenes of filled shapes and 1-pixel polylines on a textured background.

    Foreground classes are drawn in class order, so the thin class lies on top.
    Identical arguments give bit-identical samples.
    """
    if num_classes < 2:
        raise ContractError(f"synthetic data needs at least 2 classes, got {num_classes}")
    if size < 8:
        raise ContractError(f"synthetic images need size >= 8, got {size}")
    return [synth_sample(i, size, num_classes, seed) for i in range(n)]


# -- on-disk datasets ---------------------------------------------------------------


def load_class_names(path: str | Path) -> dict[int, str]:
    """Read ``index<TAB>name`` lines."""
    names = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            idx, name = line.split("\t", 1)
            names[int(idx)] = name.strip()
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: expected 'index<TAB>name', got {line!r}") from exc
    return names


def palette_to_index(rgb: np.ndarray, palette: dict[tuple[int, int, int], int]) -> np.ndarray:
    """Convert a colour-coded (H, W, 3) mask to class indices."""
    out = np.full(rgb.shape[:2], -1, dtype=np.int64)
    for color, idx in palette.items():
        out[np.all(rgb[..., :3] == np.asarray(color), axis=-1)] = idx
    if (out < 0).any():
        r, c = (int(i) for i in np.argwhere(out < 0)[0])
        raise DataError(f"colour {tuple(rgb[r, c, :3])} at pixel ({r}, {c}) is not in the palette")
    return out


def _read_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _read_mask(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise DataError(f"{path}: mask must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def load_mask_dir(path: str | Path, num_classes: int) -> list[SegmentationSample]:
    """Load ``images/<id>.<ext>`` with ``masks/<id>.png``, sorted by id."""
    root = Path(path)
    img_dir, mask_dir = root / "images", root / "masks"
    for d in (img_dir, mask_dir):
        if not d.is_dir():
            raise DataError(f"missing directory {d}")
    samples = []
    for img_path in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS):
        stem = img_path.stem
        mask_path = mask_dir / f"{stem}.png"
        if not mask_path.is_file():
            raise DataError(f"no mask for image {stem!r} (expected {mask_path})")
        image, mask = _read_image(img_path), _read_mask(mask_path)
        if image.shape[1:] != mask.shape:
            raise DataError(f"{stem}: image {image.shape[1:]} and mask {mask.shape} differ in size")
        if mask.max(initial=0) >= num_classes:
            raise DataError(f"{stem}: mask value {int(mask.max())} >= num_classes {num_classes}")
        samples.append(SegmentationSample(image, mask, mask.shape, stem))
    if not samples:
        raise DataError(f"no images found in {img_dir}")
    return samples


def save_mask_dir(samples: Sequence[SegmentationSample], path: str | Path) -> None:
    """Write samples in the layout read by ``load_mask_dir``."""
    from PIL import Image

    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.mask.max(initial=0) > 255:
            raise DataError(f"{s.id}: class index above 255 cannot be stored in an 8-bit mask")
        rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb).save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.mask.astype(np.uint8)).save(root / "masks" / f"{s.id}.png")
