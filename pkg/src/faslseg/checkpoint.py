"""Checkpoint directories: a config manifest plus one binary file per tensor.

Layout::

    manifest.txt          canonical key=value config text
    state.txt             training counters (epoch, step, ...)
    params/<name>.bin     trainable parameters
    buffers/<name>.bin    batch-norm running statistics
    optim/{m,v}/<name>.bin  Adam moments (optional)
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .fileio import atomic_directory
from .nn import Module
from .tensor import read_tensor, write_tensor

MODEL_KEY_PREFIXES = ("model.", "encoder.", "stream")


def _write(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def _read(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def model_lines(manifest: str) -> list[str]:
    return [ln.strip() for ln in manifest.splitlines() if ln.strip().startswith(MODEL_KEY_PREFIXES)]


def save_checkpoint(
    path: str | Path,
    model: Module,
    manifest: str,
    optimizer=None,
    state: dict | None = None,
) -> None:
    with atomic_directory(path) as tmp:
        (tmp / "manifest.txt").write_text(manifest)
        lines = [f"{k}={v}" for k, v in sorted((state or {}).items())]
        (tmp / "state.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
        for name, p in model.named_parameters():
            _write(tmp / "params" / f"{name}.bin", p.data)
        for name, buf in model.named_buffers():
            _write(tmp / "buffers" / f"{name}.bin", buf)
        if optimizer is not None:
            (tmp / "optim").mkdir()
            (tmp / "optim" / "step.txt").write_text(f"{optimizer.step_count}\n")
            for name in optimizer.m:
                _write(tmp / "optim" / "m" / f"{name}.bin", optimizer.m[name])
                _write(tmp / "optim" / "v" / f"{name}.bin", optimizer.v[name])


def read_manifest(path: str | Path) -> str:
    p = Path(path) / "manifest.txt"
    if not p.is_file():
        raise DataError(f"{path} is not a checkpoint (no manifest.txt)")
    return p.read_text()


def read_state(path: str | Path) -> dict[str, str]:
    p = Path(path) / "state.txt"
    out = {}
    if p.is_file():
        for line in p.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                out[k] = v
    return out


def load_checkpoint(path: str | Path, model: Module, manifest: str | None = None, optimizer=None) -> dict[str, str]:
    """Load weights into ``model``; refuse if the model section of the manifest differs."""
    root = Path(path)
    stored = read_manifest(root)
    if manifest is not None and model_lines(stored) != model_lines(manifest):
        diff = sorted(set(model_lines(stored)) ^ set(model_lines(manifest)))
        raise ConfigError(f"checkpoint {root} was written for a different model configuration: {diff[:6]}")
    state = {}
    for name, p in model.named_parameters():
        f = root / "params" / f"{name}.bin"
        if not f.is_file():
            raise DataError(f"checkpoint {root} lacks parameter {name}")
        state[name] = _read(f)
    for name, _ in model.named_buffers():
        f = root / "buffers" / f"{name}.bin"
        if not f.is_file():
            raise DataError(f"checkpoint {root} lacks buffer {name}")
        state[name] = _read(f)
    model.load_state_dict(state)
    if optimizer is not None:
        optim = root / "optim"
        if not optim.is_dir():
            raise DataError(f"checkpoint {root} has no optimizer state")
        optimizer.step_count = int((optim / "step.txt").read_text())
        for name, _ in model.named_parameters():
            optimizer.m[name] = _read(optim / "m" / f"{name}.bin")
            optimizer.v[name] = _read(optim / "v" / f"{name}.bin")
    return read_state(root)
