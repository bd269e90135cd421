"""Pinhole cameras and per-pixel ray generation.

Camera frame follows the OpenCV convention (x right, y down, z forward).
Rays of a frame are ordered row-major: ray ``row * width + col``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1 or self.fx <= 0 or self.fy <= 0:
            raise ValueError("intrinsics need positive image size and focal lengths")


@dataclass(frozen=True, eq=False)
class Frame:
    """A posed image. ``rotation`` maps camera axes to world axes."""

    id: int
    side: str  # "left" | "right"
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        if self.side not in ("left", "right"):
            raise ValueError(f"frame {self.id}: side must be left or right, got {self.side!r}")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))


def look_forward_rotation(pitch: float = 0.0) -> np.ndarray:
    """Camera looking along world +x with world +z up, tilted down by ``pitch`` radians."""
    base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    c, s = np.cos(pitch), np.sin(pitch)
    tilt = np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])  # about camera x
    return base @ tilt


def pixel_rays(intr: Intrinsics, frame: Frame, pixels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """World origins and unit directions through pixel centers.

    ``pixels`` is an optional (N, 2) array of (row, col); default is every
    pixel in row-major order.
    """
    if pixels is None:
        rows, cols = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
        rows, cols = rows.reshape(-1), cols.reshape(-1)
    else:
        rows, cols = pixels[:, 0], pixels[:, 1]
    cam = np.stack([(cols + 0.5 - intr.cx) / intr.fx, (rows + 0.5 - intr.cy) / intr.fy,
                    np.ones(len(rows))], axis=1)
    dirs = cam @ frame.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(frame.translation, dirs.shape).copy()
    return origins, dirs


def unproject(intr: Intrinsics, frame: Frame, depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3D points for finite, positive ray-distance depths; returns (points, flat pixel index)."""
    o, d = pixel_rays(intr, frame)
    flat = depth.reshape(-1)
    ok = np.isfinite(flat) & (flat > 0)
    return o[ok] + flat[ok, None] * d[ok], np.nonzero(ok)[0]
