"""Training losses: three semantic terms, photometric and depth.

Every term is a mean over the rays (or points) that contribute to it.
Labels use ``VOID`` (-1) for pixels without a pseudo label; depth targets use
0 for "no depth".
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VOID = -1
PROB_FLOOR = 1e-6

PART_NAMES = ("fixed_2d", "learned_2d", "point_3d", "photometric", "depth")

# counts batches where a masked loss had nothing to average over
telemetry: Counter = Counter()


class LossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    fixed_2d: float = 1.0
    learned_2d: float = 1.0
    point_3d: float = 1.0
    photometric: float = 1.0
    depth: float = 0.1
    sigma_threshold: float = 0.1

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    def weight(self, part: str) -> float:
        return getattr(self, part)


def _zero() -> Tensor:
    return Tensor(0.0)


def _masked_mean(per_item: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    if count == 0:
        return _zero()
    return (per_item * Tensor(mask.astype(ad.default_dtype()))).sum() / float(count)


def _picked_nll(dist: Tensor, labels: np.ndarray) -> Tensor:
    onehot = ad.one_hot(labels, dist.shape[-1])
    picked = (dist * onehot).sum(axis=-1)
    return -ad.log(ad.maximum(picked, PROB_FLOOR))


def loss_fixed_semantic(sem_fixed: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy of the rendered fixed-field distribution against pseudo labels."""
    labels = np.asarray(labels)
    return _masked_mean(_picked_nll(sem_fixed, labels), labels != VOID)


def ray_mask(slot_cls: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """1 where the pseudo label equals the class of some interval on the ray (sky included)."""
    labels = np.asarray(labels)
    return (labels != VOID) & np.any(np.asarray(slot_cls) == labels[:, None], axis=1)


def loss_learned_semantic(sem_learned: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool) & (np.asarray(labels) != VOID)
    if not mask.any():
        telemetry["learned_2d_all_masked"] += 1
        return _zero()
    return _masked_mean(_picked_nll(sem_learned, labels), mask)


def point_mask(n_candidates: np.ndarray, sigma: np.ndarray, threshold: float) -> np.ndarray:
    """Points with a single candidate class and (detached) density above ``threshold``."""
    return (np.asarray(n_candidates) == 1) & (np.asarray(sigma) > threshold)


def loss_3d_semantic(log_s: Tensor, s_fixed: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-point cross-entropy between the fixed field and the learned log-probabilities.

    Callers pass ``log_s`` computed from detached trunk features so the loss
    reaches only the semantic head.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return _zero()
    ce = -(log_s * Tensor(s_fixed)).sum(axis=-1)
    return _masked_mean(ce, mask)


def loss_photometric(color: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Per-ray sum of squared channel errors, averaged over rays."""
    diff = color - Tensor(target)
    per_ray = (diff * diff).sum(axis=-1)
    if mask is None:
        mask = np.ones(per_ray.shape, dtype=bool)
    return _masked_mean(per_ray, mask)


def loss_depth(depth: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    target = np.asarray(target)
    valid = np.isfinite(target) & (target > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    diff = depth - Tensor(np.where(valid, target, 0.0))
    return _masked_mean(diff * diff, valid)


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    total: Tensor | None = None
    for name in PART_NAMES:
        part = parts[name]
        value = float(part.data)
        if not math.isfinite(value):
            raise LossError(f"loss term {name} is not finite ({value})")
        term = part * weights.weight(name)
        total = term if total is None else total + term
    return total
