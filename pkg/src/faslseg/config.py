"""Run configuration and its canonical ``key = value`` text form.

Keys are dotted (``train.lr``, ``stream2.heads``, ...). A config file only
needs the keys it changes: ``model.preset`` and ``model.num_classes`` select
the defaults, every other line overrides one field.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentPolicy, SplitSpec
from .errors import ConfigError
from .losses import LossConfig
from .model import ABLATION_ROWS, ModelConfig, build_ablation, default_config
from .train import TrainConfig

AUGMENT_NAMES = ("resized_crop", "hflip", "vflip")


@dataclass
class DataConfig:
    split: SplitSpec = field(default_factory=SplitSpec)
    synthetic_n: int = 8
    synthetic_seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: str = "FASL-Seg"

    @classmethod
    def default(cls, preset: str = "full", num_classes: int = 12, ablation: str = "FASL-Seg") -> RunConfig:
        return cls(model=build_ablation(ablation, preset, num_classes), ablation=ablation)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if not 0.0 < self.data.split.train_fraction <= 1.0:
            raise ConfigError(f"data.train_fraction must lie in (0, 1], got {self.data.split.train_fraction}")
        if self.data.synthetic_n < 1:
            raise ConfigError(f"data.synthetic_n must be >= 1, got {self.data.synthetic_n}")


# -- formatting -----------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def to_items(cfg: RunConfig) -> list[tuple[str, str]]:
    m, t, d = cfg.model, cfg.train, cfg.data
    e = m.encoder
    items = [
        ("model.preset", m.preset),
        ("model.ablation", cfg.ablation),
        ("model.num_classes", m.num_classes),
        ("model.image_size", m.image_size),
        ("model.decoder_channels", m.decoder_channels),
        ("model.final_upsample_factor", m.final_upsample_factor),
        ("encoder.stage_channels", e.stage_channels),
        ("encoder.stage_depths", e.stage_depths),
        ("encoder.heads_per_stage", e.heads_per_stage),
        ("encoder.patch_kernels", e.patch_kernels),
        ("encoder.patch_strides", e.patch_strides),
        ("encoder.patch_paddings", e.patch_paddings),
        ("encoder.sr_ratios", e.sr_ratios),
        ("encoder.mlp_ratio", float(e.mlp_ratio)),
    ]
    for i, s in enumerate(m.streams, start=1):
        items += [
            (f"stream{i}.kind", s.kind),
            (f"stream{i}.attention", s.attention_enabled),
            (f"stream{i}.heads", s.heads),
            (f"stream{i}.conv_chain_len", s.conv_chain_len),
            (f"stream{i}.up_steps", s.up_steps),
            (f"stream{i}.upsample_mode", s.upsample_mode),
            (f"stream{i}.out_channels", s.out_channels),
        ]
    items += [
        ("loss.tversky_alpha", float(t.loss.tversky_alpha)),
        ("loss.tversky_beta", float(t.loss.tversky_beta)),
        ("loss.mix_alpha", float(t.loss.mix_alpha)),
        ("loss.smooth_eps", float(t.loss.smooth_eps)),
        ("train.lr", float(t.lr)),
        ("train.epochs", t.epochs),
        ("train.batch_size", t.batch_size),
        ("train.weight_decay", float(t.weight_decay)),
        ("train.seed", t.seed),
        ("train.checkpoint_every", t.checkpoint_every),
        ("train.adam_beta1", float(t.adam_beta1)),
        ("train.adam_beta2", float(t.adam_beta2)),
        ("train.adam_eps", float(t.adam_eps)),
        ("train.augment", t.augment.names() or ["none"]),
        ("train.flip_prob", float(t.augment.flip_prob)),
        ("train.crop_area", [float(v) for v in t.augment.crop_area]),
        ("train.crop_aspect", [float(v) for v in t.augment.crop_aspect]),
        ("data.train_fraction", float(d.split.train_fraction)),
        ("data.split_seed", d.split.seed),
        ("data.synthetic_n", d.synthetic_n),
        ("data.synthetic_seed", d.synthetic_seed),
    ]
    return [(k, _fmt(v)) for k, v in items]


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_items(cfg))


# -- parsing ------------------------------------------------------------------------


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> list[int]:
    return [int(x) for x in v.split(",") if x.strip()]


def _floats(v: str) -> list[float]:
    return [float(x) for x in v.split(",") if x.strip()]


def _pair(v: str) -> tuple[float, float]:
    vals = _floats(v)
    if len(vals) != 2 or vals[0] > vals[1]:
        raise ValueError(f"expected 'low,high', got {v!r}")
    return vals[0], vals[1]


def _augment(v: str) -> list[str]:
    names = [x.strip() for x in v.split(",") if x.strip()]
    if names == ["none"]:
        return []
    for n in names:
        if n not in AUGMENT_NAMES:
            raise ValueError(f"unknown augmentation {n!r}; expected any of {AUGMENT_NAMES} or 'none'")
    return names


def _setter(path: str, conv):
    def apply(cfg: RunConfig, raw: str) -> None:
        obj = cfg
        parts = path.split(".")
        for p in parts[:-1]:
            obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
        setattr(obj, parts[-1], conv(raw))

    return apply


def _set_augment(cfg: RunConfig, raw: str) -> None:
    names = _augment(raw)
    a = cfg.train.augment
    a.resized_crop, a.hflip, a.vflip = ("resized_crop" in names), ("hflip" in names), ("vflip" in names)


_SETTERS = {
    "model.num_classes": _setter("model.num_classes", _int),
    "model.image_size": _setter("model.image_size", _int),
    "model.decoder_channels": _setter("model.decoder_channels", _ints),
    "model.final_upsample_factor": _setter("model.final_upsample_factor", _int),
    "encoder.stage_channels": _setter("model.encoder.stage_channels", _ints),
    "encoder.stage_depths": _setter("model.encoder.stage_depths", _ints),
    "encoder.heads_per_stage": _setter("model.encoder.heads_per_stage", _ints),
    "encoder.patch_kernels": _setter("model.encoder.patch_kernels", _ints),
    "encoder.patch_strides": _setter("model.encoder.patch_strides", _ints),
    "encoder.patch_paddings": _setter("model.encoder.patch_paddings", _ints),
    "encoder.sr_ratios": _setter("model.encoder.sr_ratios", _ints),
    "encoder.mlp_ratio": _setter("model.encoder.mlp_ratio", _float),
    "loss.tversky_alpha": _setter("train.loss.tversky_alpha", _float),
    "loss.tversky_beta": _setter("train.loss.tversky_beta", _float),
    "loss.mix_alpha": _setter("train.loss.mix_alpha", _float),
    "loss.smooth_eps": _setter("train.loss.smooth_eps", _float),
    "train.lr": _setter("train.lr", _float),
    "train.epochs": _setter("train.epochs", _int),
    "train.batch_size": _setter("train.batch_size", _int),
    "train.weight_decay": _setter("train.weight_decay", _float),
    "train.seed": _setter("train.seed", _int),
    "train.checkpoint_every": _setter("train.checkpoint_every", _int),
    "train.adam_beta1": _setter("train.adam_beta1", _float),
    "train.adam_beta2": _setter("train.adam_beta2", _float),
    "train.adam_eps": _setter("train.adam_eps", _float),
    "train.augment": _set_augment,
    "train.flip_prob": _setter("train.augment.flip_prob", _float),
    "train.crop_area": _setter("train.augment.crop_area", _pair),
    "train.crop_aspect": _setter("train.augment.crop_aspect", _pair),
    "data.train_fraction": _setter("data.split.train_fraction", _float),
    "data.split_seed": _setter("data.split.seed", _int),
    "data.synthetic_n": _setter("data.synthetic_n", _int),
    "data.synthetic_seed": _setter("data.synthetic_seed", _int),
}
for _i in range(4):
    _SETTERS.update(
        {
            f"stream{_i + 1}.kind": _setter(f"model.streams.{_i}.kind", str),
            f"stream{_i + 1}.attention": _setter(f"model.streams.{_i}.attention_enabled", _bool),
            f"stream{_i + 1}.heads": _setter(f"model.streams.{_i}.heads", _int),
            f"stream{_i + 1}.conv_chain_len": _setter(f"model.streams.{_i}.conv_chain_len", _int),
            f"stream{_i + 1}.up_steps": _setter(f"model.streams.{_i}.up_steps", _int),
            f"stream{_i + 1}.upsample_mode": _setter(f"model.streams.{_i}.upsample_mode", str),
            f"stream{_i + 1}.out_channels": _setter(f"model.streams.{_i}.out_channels", _int),
        }
    )
_BASE_KEYS = ("model.preset", "model.ablation")


def parse_lines(text: str, source: str = "<config>") -> list[tuple[int, str, str]]:
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key not in _SETTERS and key not in _BASE_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        entries.append((lineno, key, value))
    return entries


def from_text(text: str, source: str = "<config>", preset: str | None = None) -> RunConfig:
    entries = parse_lines(text, source)
    base = {k: (n, v) for n, k, v in entries if k in _BASE_KEYS or k == "model.num_classes"}
    chosen_preset = base.get("model.preset", (0, preset or "toy"))[1]
    ablation = base.get("model.ablation", (0, "FASL-Seg"))[1]
    n_classes = 12 if chosen_preset == "full" else 4
    if "model.num_classes" in base:
        lineno, raw = base["model.num_classes"]
        try:
            n_classes = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: model.num_classes: {exc}") from exc
    try:
        cfg = RunConfig.default(chosen_preset, n_classes, ablation)
    except ConfigError as exc:
        lineno = base.get("model.preset", base.get("model.ablation", (0, "")))[0]
        raise ConfigError(f"{source}:{lineno}: {exc}") from exc
    for lineno, key, value in entries:
        if key in _BASE_KEYS:
            continue
        try:
            _SETTERS[key](cfg, value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: field {key}: {exc}") from exc
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_text(text, str(path))


def copy_config(cfg: RunConfig) -> RunConfig:
    return from_text(to_text(cfg))


__all__ = [
    "ABLATION_ROWS",
    "DataConfig",
    "RunConfig",
    "copy_config",
    "default_config",
    "from_text",
    "load_config",
    "to_text",
]
