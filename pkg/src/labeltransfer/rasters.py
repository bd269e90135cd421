"""Raster file helpers: 16-bit label PNGs, 8-bit RGB PNGs and float depth grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .container import read_arrays, write_arrays

DEPTH_MAGIC = b"LTDGRID1"
LABEL_VOID = 65535  # void / unlabeled in 16-bit label files


def write_label_png(path: str | Path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    out = np.where(arr < 0, LABEL_VOID, arr)
    if out.max(initial=0) > LABEL_VOID:
        raise ValueError(f"{path}: label value {out.max()} does not fit 16 bits")
    Image.fromarray(out.astype(np.uint16)).save(path)


def read_label_png(path: str | Path) -> np.ndarray:
    """Labels as int64 with void mapped to -1."""
    arr = np.array(Image.open(path)).astype(np.int64)
    return np.where(arr == LABEL_VOID, -1, arr)


def write_rgb_png(path: str | Path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_rgb_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def write_depth(path: str | Path, depth: np.ndarray) -> None:
    """Float32 grid; ``inf`` marks no surface, 0 marks invalid."""
    d = np.asarray(depth, dtype=np.float32)
    write_arrays(path, {"depth": d}, {"height": int(d.shape[0]), "width": int(d.shape[1])}, DEPTH_MAGIC)


def read_depth(path: str | Path) -> np.ndarray:
    arrays, _ = read_arrays(path, DEPTH_MAGIC)
    return arrays["depth"]
