"""Volume rendering of color, depth, semantic and instance distributions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import fields as fl
from . import rasters
from .autodiff import Tensor
from .camera import Frame, Intrinsics, pixel_rays
from .geometry import (BoundingPrimitive, IntervalTable, RaySamples, build_interval_table, sample_table,
                       slot_classes, slot_instances)

DEPTH_EPS = 1e-6
ALL_PASSES = ("rgb", "depth", "semantic_fixed", "semantic_learned", "panoptic")


class RenderError(RuntimeError):
    pass


def composite_weights(sigma, delta) -> tuple[Tensor, Tensor]:
    """Per-sample weights ``T_i (1 - exp(-sigma_i delta_i))`` and transmittances ``T_i``.

    ``sigma`` and ``delta`` are (R, P); the last axis runs along the ray.
    """
    sigma = ad.as_tensor(sigma)
    sd = sigma * ad.as_tensor(delta)
    # shifted inclusive sum keeps T monotone in float arithmetic
    acc = ad.cumsum(sd, axis=1)
    excl = ad.concat([Tensor(np.zeros((sd.shape[0], 1))), acc[:, :-1]], axis=1)
    trans = ad.exp(-excl)
    w = trans * (1.0 - ad.exp(-sd))
    return w, trans


@dataclass
class Composited:
    """Accumulated per-ray quantities (all Tensors)."""

    color: Tensor            # (R, 3)
    depth: Tensor            # (R,)
    sem_fixed: Tensor        # (R, M) sky-completed
    sem_learned: Tensor      # (R, M) sky-completed
    instance: Tensor         # (R, Mt)
    opacity: Tensor          # (R,)
    weights: Tensor          # (R, P)
    transmittance: Tensor    # (R, P)


def accumulate(sigma, delta, t, rgb, s_fixed, s_learned, t_fixed, sky: int) -> Composited:
    """Composite sampled quantities along each ray and apply sky completion.

    Shapes: ``sigma, delta, t`` (R, P); ``rgb`` (R, P, 3); ``s_fixed``,
    ``s_learned`` (R, P, M); ``t_fixed`` (R, P, Mt). The residual mass
    ``1 - W`` goes to the sky class of both semantic distributions; the
    instance distribution gets none.
    """
    w, trans = composite_weights(sigma, delta)
    w3 = ad.reshape(w, w.shape + (1,))
    opacity = w.sum(axis=1)
    color = (w3 * ad.as_tensor(rgb)).sum(axis=1)
    depth = (w * ad.as_tensor(t)).sum(axis=1) / ad.maximum(opacity, DEPTH_EPS)
    s_fixed = ad.as_tensor(s_fixed)
    m = s_fixed.shape[-1]
    sky_vec = np.zeros((1, m), dtype=ad.default_dtype())
    sky_vec[0, sky] = 1
    residual = ad.reshape(1.0 - opacity, (-1, 1)) * Tensor(sky_vec)
    sem_fixed = (w3 * s_fixed).sum(axis=1) + residual
    sem_learned = (w3 * ad.as_tensor(s_learned)).sum(axis=1) + residual
    instance = (w3 * ad.as_tensor(t_fixed)).sum(axis=1)
    return Composited(color, depth, sem_fixed, sem_learned, instance, opacity, w, trans)


# ---------------------------------------------------------------------------
# scene-aware forward pass

@dataclass(frozen=True)
class SceneFrame:
    """What rendering needs to know about a scene, independent of file formats."""

    prims: tuple[BoundingPrimitive, ...]
    classes: fl.ClassTable
    center: np.ndarray
    half_extent: np.ndarray
    t_int: float = 50.0
    max_prims: int = 10
    near: float = 0.0


@dataclass
class RayBundle:
    origins: np.ndarray   # (R, 3) float64
    dirs: np.ndarray      # (R, 3) float64
    samples: RaySamples
    s_fixed: np.ndarray   # (R, P, M)
    t_fixed: np.ndarray   # (R, P, Mt)
    n_candidates: np.ndarray  # (R, P)
    slot_cls: np.ndarray  # (R, S)

    @property
    def n_rays(self) -> int:
        return len(self.origins)


def make_bundle(origins: np.ndarray, dirs: np.ndarray, table: IntervalTable, scene: SceneFrame,
                n_per_interval: int, jitter: bool = False, rng: np.random.Generator | None = None) -> RayBundle:
    samples = sample_table(table, n_per_interval, jitter, rng)
    cls = slot_classes(table, list(scene.prims), scene.classes.sky)
    inst = slot_instances(table, list(scene.prims))
    s_fixed, t_fixed, n_cand = fl.fixed_fields(samples.inside, cls, inst, scene.classes)
    return RayBundle(origins, dirs, samples, s_fixed, t_fixed, n_cand, cls)


DensityOverride = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class RenderOutput:
    comp: Composited
    flat_index: np.ndarray    # (F,) flat (R*P) positions of valid samples
    sigma: Tensor             # (F,)
    feat: Tensor              # (F, width)


def render_rays(bundle: RayBundle, params: dict[str, Tensor], cfg: fl.FieldConfig, scene: SceneFrame,
                density_override: DensityOverride | None = None) -> RenderOutput:
    """Run the fields on every valid sample of the bundle and composite.

    ``density_override(points, provenance)`` replaces the network density
    with a constant array (used by the opaque-limit checks).
    """
    s = bundle.samples
    n_rays, n_samp = s.t.shape
    flat = np.flatnonzero(s.valid.reshape(-1))
    ray_of = flat // n_samp
    t_valid = s.t.reshape(-1)[flat].astype(np.float64)
    pts = bundle.origins[ray_of] + t_valid[:, None] * bundle.dirs[ray_of]
    x_enc = fl.encode(fl.normalize_positions(pts, scene.center, scene.half_extent), cfg.pos_bands)
    d_enc = fl.encode(bundle.dirs[ray_of], cfg.dir_bands)
    sigma, rgb, feat = fl.radiance(x_enc, d_enc, params, cfg)
    if density_override is not None:
        sigma = Tensor(density_override(pts, s.provenance().reshape(-1)[flat]))
    s_learned = fl.semantic_learned(feat, params)
    total = n_rays * n_samp
    m = scene.classes.num_classes

    def pad(x: Tensor, width: int | None) -> Tensor:
        shape = (n_rays, n_samp) if width is None else (n_rays, n_samp, width)
        return ad.reshape(ad.scatter_rows(x, flat, total), shape)

    comp = accumulate(pad(sigma, None), s.delta, s.t, pad(rgb, 3), bundle.s_fixed,
                      pad(s_learned, m), bundle.t_fixed, scene.classes.sky)
    return RenderOutput(comp, flat, sigma, feat)


# ---------------------------------------------------------------------------
# decoding

def panoptic_decode(sem_learned: np.ndarray, instance: np.ndarray, classes: fl.ClassTable) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray (semantic id, instance id) from rendered distributions.

    Thing pixels take the most probable instance among those of the decoded
    class; an all-zero masked distribution decodes to instance 0.
    """
    sem_learned = np.atleast_2d(sem_learned)
    instance = np.atleast_2d(instance)
    sem = np.argmax(sem_learned, axis=-1)
    inst = np.zeros(sem.shape, dtype=np.int64)
    if classes.num_instances == 0:
        return sem, inst
    thing = classes.is_thing(sem)
    same_cls = classes.instance_classes[None, :] == sem[:, None]
    masked = np.where(same_cls, instance, 0.0)
    best = np.argmax(masked, axis=-1)
    has = np.take_along_axis(masked, best[:, None], axis=-1)[:, 0] > 0
    inst = np.where(thing & has, classes.instance_ids[best], 0)
    return sem, inst


# ---------------------------------------------------------------------------
# frames

@dataclass
class LabelMaps:
    height: int
    width: int
    semantic: np.ndarray | None = None        # learned field argmax, int
    semantic_fixed: np.ndarray | None = None  # fixed field argmax, int
    instance: np.ndarray | None = None        # 0 = none
    depth: np.ndarray | None = None           # float32 meters
    rgb: np.ndarray | None = None             # float32 in [0, 1], (H, W, 3)
    opacity: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def render_frame(intr: Intrinsics, frame: Frame, scene: SceneFrame, params: dict[str, Tensor],
                 cfg: fl.FieldConfig, passes=ALL_PASSES, table: IntervalTable | None = None,
                 compute_intervals: bool = True, n_per_interval: int = 8, chunk: int = 2048,
                 density_override: DensityOverride | None = None) -> LabelMaps:
    """Render the requested passes for every pixel of a frame.

    Uses midpoint sampling, so the output is a deterministic function of the
    parameters.
    """
    passes = tuple(passes)
    unknown = set(passes) - set(ALL_PASSES)
    if unknown:
        raise RenderError(f"unknown render passes: {sorted(unknown)}")
    origins, dirs = pixel_rays(intr, frame)
    if table is None:
        if not compute_intervals:
            raise RenderError(f"frame {frame.id}: no interval cache and interval computation is disabled")
        table = build_interval_table(origins, dirs, list(scene.prims), scene.t_int, scene.max_prims, scene.near)
    n = len(origins)
    if len(table) != n:
        raise RenderError(f"frame {frame.id}: interval table has {len(table)} rows for {n} pixels")
    m, mt = scene.classes.num_classes, scene.classes.num_instances
    color = np.zeros((n, 3), np.float32)
    depth = np.zeros(n, np.float32)
    s_hat = np.zeros((n, m), np.float32)
    s_lrn = np.zeros((n, m), np.float32)
    t_ins = np.zeros((n, mt), np.float32)
    opac = np.zeros(n, np.float32)
    with ad.no_grad():
        for lo in range(0, n, chunk):
            sl = slice(lo, min(lo + chunk, n))
            bundle = make_bundle(origins[sl], dirs[sl], table.rows(sl), scene, n_per_interval)
            out = render_rays(bundle, params, cfg, scene, density_override).comp
            color[sl] = out.color.data
            depth[sl] = out.depth.data
            s_hat[sl] = out.sem_fixed.data
            s_lrn[sl] = out.sem_learned.data
            t_ins[sl] = out.instance.data
            opac[sl] = out.opacity.data
    h, w = intr.height, intr.width
    maps = LabelMaps(h, w, opacity=opac.reshape(h, w))
    if "rgb" in passes:
        maps.rgb = color.reshape(h, w, 3)
    if "depth" in passes:
        maps.depth = depth.reshape(h, w)
    if "semantic_fixed" in passes:
        maps.semantic_fixed = np.argmax(s_hat, axis=-1).reshape(h, w)
    if "semantic_learned" in passes or "panoptic" in passes:
        sem, inst = panoptic_decode(s_lrn, t_ins, scene.classes)
        if "semantic_learned" in passes:
            maps.semantic = sem.reshape(h, w)
        if "panoptic" in passes:
            maps.semantic = sem.reshape(h, w)
            maps.instance = inst.reshape(h, w)
    return maps


def colormap(n: int) -> np.ndarray:
    """Deterministic, well separated 8-bit colors for ``n`` labels."""
    import matplotlib

    cmap = matplotlib.colormaps["tab20"]
    return (np.array([cmap(i % 20)[:3] for i in range(n)]) * 255).round().astype(np.uint8)


def save_label_maps(maps: LabelMaps, out_dir: str | Path, stem: str, classes: fl.ClassTable) -> list[Path]:
    """Write every present buffer; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("semantic", "semantic_fixed", "instance"):
        arr = getattr(maps, name)
        if arr is not None:
            p = out_dir / f"{stem}_{name}.png"
            rasters.write_label_png(p, arr)
            written.append(p)
    if maps.depth is not None:
        p = out_dir / f"{stem}_depth.dgrid"
        rasters.write_depth(p, maps.depth)
        written.append(p)
    if maps.rgb is not None:
        p = out_dir / f"{stem}_rgb.png"
        rasters.write_rgb_png(p, maps.rgb)
        written.append(p)
    side = out_dir / f"{stem}_meta.json"
    side.write_text(json.dumps({
        "height": maps.height, "width": maps.width,
        "buffers": sorted(p.name for p in written),
        "classes": list(classes.names), "things": sorted(classes.things), "sky": classes.sky,
        "instances": [list(x) for x in classes.instances],
        "colormap": colormap(classes.num_classes).tolist(),
    }, indent=2, sort_keys=True))
    written.append(side)
    return written


def load_label_maps(out_dir: str | Path, stem: str) -> LabelMaps:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / f"{stem}_meta.json").read_text())
    maps = LabelMaps(meta["height"], meta["width"])
    for name in ("semantic", "semantic_fixed", "instance"):
        p = out_dir / f"{stem}_{name}.png"
        if p.exists():
            setattr(maps, name, rasters.read_label_png(p).astype(np.int64))
    if (out_dir / f"{stem}_depth.dgrid").exists():
        maps.depth = rasters.read_depth(out_dir / f"{stem}_depth.dgrid")
    if (out_dir / f"{stem}_rgb.png").exists():
        maps.rgb = rasters.read_rgb_png(out_dir / f"{stem}_rgb.png")
    return maps
