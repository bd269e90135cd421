"""Report figures: loss curves, per-class IoU and label-map panels."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .rendering import colormap  # noqa: E402

FIG_DPI = 120


def _finish(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return path


def plot_losses(log: dict[str, np.ndarray], path: str | Path) -> Path:
    """One line per loss term against the training step, log-scaled."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    step = log["step"]
    for key, values in log.items():
        if not key.startswith("loss_"):
            continue
        v = np.where(values > 0, values, np.nan)
        if np.all(np.isnan(v)):
            continue
        ax.plot(step, v, label=key[5:], lw=1.2 if key != "loss_total" else 2.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, ncol=2)
    ax.grid(alpha=0.3)
    return _finish(fig, Path(path))


def plot_class_iou(iou: dict[int, float], names, path: str | Path, reference: dict[int, float] | None = None,
                   labels: tuple[str, str] = ("learned", "pseudo")) -> Path:
    keys = sorted(iou)
    x = np.arange(len(keys))
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    width = 0.4 if reference else 0.8
    ax.bar(x - (width / 2 if reference else 0), [iou[k] for k in keys], width, label=labels[0])
    if reference:
        ax.bar(x + width / 2, [reference.get(k, 0.0) for k in keys], width, label=labels[1])
        ax.legend(fontsize=8)
    ax.set_xticks(x, [names[k] for k in keys], rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    return _finish(fig, Path(path))


def plot_frame_panel(rgb: np.ndarray, pred: np.ndarray, gt: np.ndarray | None, depth: np.ndarray | None,
                     num_classes: int, path: str | Path, title: str = "") -> Path:
    cmap = colormap(num_classes)
    panels = [("rgb", rgb), ("prediction", cmap[np.clip(pred, 0, num_classes - 1)])]
    if gt is not None:
        panels.append(("ground truth", np.where((gt < 0)[..., None], 0, cmap[np.clip(gt, 0, num_classes - 1)])))
    if depth is not None:
        panels.append(("depth", depth))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.4))
    for ax, (name, img) in zip(np.atleast_1d(axes), panels):
        if name == "depth":
            ax.imshow(np.where(np.isfinite(img), img, np.nan), cmap="viridis")
        else:
            ax.imshow(img, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    return _finish(fig, Path(path))
