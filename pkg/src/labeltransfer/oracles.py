"""Independent reference implementations used to check the fast code paths.

These are deliberately slow and literal: per-ray Python loops, brute-force
containment scans and finite differences.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .geometry import BoundingPrimitive, contains
from .rendering import render_frame


def reference_composite(sigma, delta, values, sky_value=None) -> tuple[np.ndarray, float]:
    """Loop-form volume rendering of one ray; returns (accumulated value, opacity).

    With ``sky_value`` the leftover mass ``1 - opacity`` is added times that value.
    """
    acc = np.zeros(np.shape(values)[1:], dtype=np.float64)
    trans = 1.0
    opacity = 0.0
    for s, d, v in zip(sigma, delta, values):
        alpha = 1.0 - np.exp(-float(s) * float(d))
        w = trans * alpha
        acc = acc + w * np.asarray(v, dtype=np.float64)
        opacity += w
        trans *= 1.0 - alpha
    if sky_value is not None:
        acc = acc + (1.0 - opacity) * np.asarray(sky_value, dtype=np.float64)
    return acc, opacity


def marched_intervals(origins, dirs, prim: BoundingPrimitive, t_max: float = 10.0, n_steps: int = 4000,
                      refine: int = 40, chunk: int = 256) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entry/exit distances through a convex primitive by a dense containment scan plus bisection.

    Returns ``(t_near, t_far, hit)``; chords shorter than the scan step can be missed.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    ts = np.linspace(0.0, t_max, n_steps + 1)
    t0 = np.full(n, np.inf)
    t1 = np.full(n, np.inf)
    hit = np.zeros(n, bool)

    def inside(o, d, t):
        return contains(o + t[:, None] * d, prim)

    for lo in range(0, n, chunk):
        o, d = origins[lo:lo + chunk], dirs[lo:lo + chunk]
        m = len(o)
        pts = o[:, None, :] + ts[None, :, None] * d[:, None, :]
        ins = contains(pts.reshape(-1, 3), prim).reshape(m, -1)
        has = ins.any(axis=1)
        first = np.argmax(ins, axis=1)
        last = ins.shape[1] - 1 - np.argmax(ins[:, ::-1], axis=1)
        # entry: outside at a, inside at b; exit: inside at a, outside at b
        a0, b0 = ts[np.maximum(first - 1, 0)], ts[first]
        a1, b1 = ts[last], ts[np.minimum(last + 1, n_steps)]
        for _ in range(refine):
            mid = 0.5 * (a0 + b0)
            cin = inside(o, d, mid)
            a0, b0 = np.where(cin, a0, mid), np.where(cin, mid, b0)
            mid = 0.5 * (a1 + b1)
            cin = inside(o, d, mid)
            a1, b1 = np.where(cin, mid, a1), np.where(cin, b1, mid)
        enter = np.where(first == 0, 0.0, 0.5 * (a0 + b0))
        leave = np.where(last == n_steps, t_max, 0.5 * (a1 + b1))
        t0[lo:lo + chunk] = np.where(has, enter, np.inf)
        t1[lo:lo + chunk] = np.where(has, leave, np.inf)
        hit[lo:lo + chunk] = has
    return t0, t1, hit


def naive_confusion(pred, gt, num_classes: int, void: int = -1) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    p = np.asarray(pred).reshape(-1)
    g = np.asarray(gt).reshape(-1)
    for i in range(len(g)):
        if g[i] != void:
            cm[g[i], p[i]] += 1
    return cm


def naive_miou(pred, gt, num_classes: int) -> tuple[float, float]:
    """mIoU over classes present in gt or prediction, and pixel accuracy, by explicit counting."""
    p = np.asarray(pred).reshape(-1)
    g = np.asarray(gt).reshape(-1)
    ious = []
    for k in range(num_classes):
        tp = fp = fn = 0
        for a, b in zip(p, g):
            if b == -1:
                continue
            tp += int(a == k and b == k)
            fp += int(a == k and b != k)
            fn += int(a != k and b == k)
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    valid = [(a, b) for a, b in zip(p, g) if b != -1]
    return float(np.mean(ious)), sum(a == b for a, b in valid) / len(valid)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` with respect to the array ``x`` (modified in place and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def opaque_density(value: float = 1e4):
    """Density override: ``value`` inside any primitive, zero in the sky segment."""
    def override(points: np.ndarray, provenance: np.ndarray) -> np.ndarray:
        return np.where(provenance >= 0, value, 0.0).astype(np.float32)
    return override


def opaque_limit_agreement(dataset, frames=None, boundary_radius: int = 1, params=None, cfg=None) -> dict:
    """Fixed-semantic maps rendered with opaque primitives against the analytic labels.

    Returns the agreement on pixels farther than ``boundary_radius`` from a
    label change, pooled over the frames.
    """
    from .fields import FieldConfig, init_params
    from .scene_io import boundary_mask

    scene = dataset.scene
    sf = scene.scene_frame()
    if params is None:
        cfg = FieldConfig(num_classes=scene.classes.num_classes, pos_bands=2, dir_bands=1, depth=1, width=8,
                          skip=None, color_width=4, semantic_width=4)
        params = init_params(cfg, np.random.default_rng(0))
    frame_ids = frames if frames is not None else [f.id for f in scene.frames]
    agree = total = 0
    for fid in frame_ids:
        maps = render_frame(scene.intrinsics, scene.frame(fid), sf, params, cfg, passes=("semantic_fixed",),
                            table=dataset.intervals(fid), density_override=opaque_density())
        gt = dataset.gt(fid).semantic
        keep = ~boundary_mask(gt, boundary_radius)
        agree += int(np.sum((maps.semantic_fixed == gt) & keep))
        total += int(keep.sum())
    return {"agreement": agree / total, "pixels": total, "frames": len(frame_ids)}



def run_oracle_checks(dataset, threshold: float = 0.99, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Every oracle comparison that needs no trained model, as ``(name, ok, detail)`` rows."""
    from . import autodiff as ad
    from .camera import pixel_rays
    from .evaluation import miou_acc
    from .geometry import intersect_many
    from .rendering import accumulate

    rng = np.random.default_rng(seed)
    rows = []

    n, s, m = 200, 12, dataset.scene.classes.num_classes
    sigma = rng.exponential(2.0, (n, s)) * rng.choice([1e-3, 1.0, 1e2], (n, s))
    delta = rng.uniform(0.01, 0.5, (n, s))
    t = np.cumsum(delta, axis=1)
    probs = rng.dirichlet(np.ones(m), (n, s))
    with ad.precision(np.float64):
        comp = accumulate(sigma, delta, t, rng.random((n, s, 3)), probs, probs, probs[..., :2], m - 1)
    err = 0.0
    for r in range(n):
        ref, _ = reference_composite(sigma[r], delta[r], probs[r], np.eye(m)[m - 1])
        err = max(err, float(np.max(np.abs(comp.sem_fixed.data[r] - ref))))
    rows.append(("composite", err < 1e-6, f"max abs error {err:.2e} over {n} rays"))

    scene = dataset.scene
    frame = scene.left_frames()[0]
    o, d = pixel_rays(scene.intrinsics, frame)
    pick = rng.choice(len(o), size=min(256, len(o)), replace=False)
    o, d = o[pick], d[pick]
    worst, t_max, steps = 0.0, 100.0, 10000
    for prim in scene.prims:
        tn, tf, hit = intersect_many(o, d, prim)
        sn, sf, shit = marched_intervals(o, d, prim, t_max=t_max, n_steps=steps, refine=30)
        solid = hit & (tf - tn > 2 * t_max / steps) & (tf < t_max)
        if np.any(solid & ~shit):
            worst = np.inf
            break
        if solid.any():
            worst = max(worst, float(np.max(np.abs(tn[solid] - sn[solid]))),
                        float(np.max(np.abs(tf[solid] - sf[solid]))))
    rows.append(("intervals", worst < 1e-3, f"max endpoint error {worst:.2e} m over {len(scene.prims)} primitives"))

    gt = rng.integers(-1, m, (24, 24))
    pred = rng.integers(0, m, (24, 24))
    fast = miou_acc(pred, gt, m)
    slow = naive_miou(pred, gt, m)
    ok = abs(fast.miou - slow[0]) < 1e-12 and abs(fast.acc - slow[1]) < 1e-12
    rows.append(("miou", ok, f"mIoU {fast.miou:.6f} vs {slow[0]:.6f}"))

    res = opaque_limit_agreement(dataset)
    rows.append(("opaque-limit", res["agreement"] >= threshold,
                 f"agreement {res['agreement']:.5f} on {res['pixels']} non-boundary pixels ({res['frames']} frames)"))
    return rows
