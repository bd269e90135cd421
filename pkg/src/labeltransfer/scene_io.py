"""Scene files, dataset layout, the synthetic scene generator and label corruption.

A scene file is canonical JSON (sorted keys, 2-space indent) with an explicit
``schema_version``. A dataset directory holds::

    scene.json            primitives, classes, camera, frame poses
    images/NNN_rgb.png    every frame (left and right)
    pseudo/NNN_semantic.png, pseudo/NNN_depth.dgrid   left frames only
    gt/NNN_semantic.png, gt/NNN_instance.png, gt/NNN_depth.dgrid
    cache/NNN.icache      per-frame interval tables
    manifest.json
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from . import rasters
from .camera import Frame, Intrinsics, look_forward_rotation, pixel_rays, unproject
from .fields import ClassTable
from .geometry import (KINDS, PAD, BoundingPrimitive, GeometryError, IntervalTable, build_interval_table,
                       intersect_many, load_interval_cache, rotation_z, save_interval_cache,
                       slot_classes)
from .rendering import SceneFrame

SCHEMA_VERSION = 1


class SceneError(ValueError):
    """Schema violation; the message starts with the offending field path."""


@dataclass
class SceneFile:
    classes: ClassTable
    prims: list[BoundingPrimitive]
    intrinsics: Intrinsics
    frames: list[Frame]
    center: np.ndarray
    half_extent: np.ndarray
    t_int: float = 50.0
    near: float = 0.5
    max_prims: int = 10

    def scene_frame(self) -> SceneFrame:
        return SceneFrame(tuple(self.prims), self.classes, np.asarray(self.center, dtype=np.float64),
                          np.asarray(self.half_extent, dtype=np.float64), self.t_int, self.max_prims, self.near)

    def frame(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.id == frame_id:
                return f
        raise KeyError(f"no frame {frame_id}")

    def left_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.side == "left"]


def class_table_with_instances(names, things, sky, prims: list[BoundingPrimitive]) -> ClassTable:
    inst = sorted((p.instance_id, p.semantic_class) for p in prims if p.instance_id is not None)
    return ClassTable(tuple(names), frozenset(things), sky, tuple(inst))


# ---------------------------------------------------------------------------
# JSON (de)serialisation

def _prim_to_dict(p: BoundingPrimitive) -> dict[str, Any]:
    d: dict[str, Any] = {"id": p.id, "kind": p.kind, "semantic_class": p.semantic_class,
                         "instance_id": p.instance_id, "rotation": p.rotation.tolist(),
                         "translation": p.translation.tolist()}
    if p.kind == "extruded_polygon":
        d["polygon"] = [list(v) for v in p.polygon]
        d["height"] = p.height
    else:
        d["extents"] = list(p.extents)
    return d


def scene_to_dict(scene: SceneFile) -> dict[str, Any]:
    c = scene.classes
    i = scene.intrinsics
    return {
        "schema_version": SCHEMA_VERSION,
        "classes": {"names": list(c.names), "things": sorted(c.things), "sky": c.sky},
        "primitives": [_prim_to_dict(p) for p in scene.prims],
        "camera": {"width": i.width, "height": i.height, "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy},
        "frames": [{"id": f.id, "side": f.side, "rotation": f.rotation.tolist(),
                    "translation": f.translation.tolist()} for f in scene.frames],
        "normalization": {"center": list(map(float, scene.center)),
                          "half_extent": list(map(float, scene.half_extent))},
        "sampling": {"t_int": scene.t_int, "near": scene.near, "max_prims": scene.max_prims},
    }


def dumps_scene(scene: SceneFile) -> str:
    return json.dumps(scene_to_dict(scene), indent=2, sort_keys=True) + "\n"


def _req(obj: dict, key: str, path: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SceneError(f"{path}.{key}: missing required field")
    return obj[key]


def scene_from_dict(d: dict[str, Any]) -> SceneFile:
    version = _req(d, "schema_version", "scene")
    if version != SCHEMA_VERSION:
        raise SceneError(f"scene.schema_version: unsupported version {version!r}")
    cls = _req(d, "classes", "scene")
    names = _req(cls, "names", "classes")
    things = set(_req(cls, "things", "classes"))
    sky = _req(cls, "sky", "classes")
    n_cls = len(names)
    prims = []
    for k, pd in enumerate(_req(d, "primitives", "scene")):
        path = f"primitives[{k}]"
        kind = _req(pd, "kind", path)
        if kind not in KINDS:
            raise SceneError(f"{path}.kind: unknown primitive kind {kind!r}")
        sc = _req(pd, "semantic_class", path)
        if not isinstance(sc, int) or not 0 <= sc < n_cls:
            raise SceneError(f"{path}.semantic_class: {sc!r} is not a valid class index")
        inst = pd.get("instance_id")
        if sc in things and inst is None:
            raise SceneError(f"{path}.instance_id: thing primitive of class {names[sc]!r} needs an instance id")
        if sc not in things and inst is not None:
            raise SceneError(f"{path}.instance_id: stuff primitive of class {names[sc]!r} must not carry an instance id")
        kw: dict[str, Any] = {}
        if kind == "extruded_polygon":
            kw["polygon"] = _req(pd, "polygon", path)
            kw["height"] = _req(pd, "height", path)
        else:
            kw["extents"] = _req(pd, "extents", path)
        try:
            prims.append(BoundingPrimitive(id=_req(pd, "id", path), kind=kind, semantic_class=sc,
                                           rotation=_req(pd, "rotation", path),
                                           translation=_req(pd, "translation", path), instance_id=inst, **kw))
        except (GeometryError, ValueError) as exc:
            raise SceneError(f"{path}: {exc}") from None
    try:
        classes = class_table_with_instances(names, things, sky, prims)
    except ValueError as exc:
        raise SceneError(f"classes: {exc}") from None
    cam = _req(d, "camera", "scene")
    intr = Intrinsics(**{k: _req(cam, k, "camera") for k in ("width", "height", "fx", "fy", "cx", "cy")})
    frames = []
    for k, fd in enumerate(_req(d, "frames", "scene")):
        path = f"frames[{k}]"
        try:
            frames.append(Frame(_req(fd, "id", path), _req(fd, "side", path), _req(fd, "rotation", path),
                                _req(fd, "translation", path)))
        except ValueError as exc:
            raise SceneError(f"{path}: {exc}") from None
    norm = _req(d, "normalization", "scene")
    samp = d.get("sampling", {})
    half = np.asarray(_req(norm, "half_extent", "normalization"), dtype=np.float64)
    if half.shape != (3,) or np.any(half <= 0):
        raise SceneError("normalization.half_extent: needs 3 positive values")
    return SceneFile(classes, prims, intr, frames, np.asarray(_req(norm, "center", "normalization"), dtype=np.float64),
                     half, float(samp.get("t_int", 50.0)), float(samp.get("near", 0.5)),
                     int(samp.get("max_prims", 10)))


def save_scene(scene: SceneFile, path: str | Path) -> None:
    Path(path).write_text(dumps_scene(scene))


def load_scene(path: str | Path) -> SceneFile:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"scene: not valid JSON ({exc})") from None
    return scene_from_dict(d)


# ---------------------------------------------------------------------------
# analytic ray casting

@dataclass
class SyntheticGT:
    """Analytic ground truth of one frame."""

    frame: int
    semantic: np.ndarray   # (H, W) int; sky where nothing is hit
    instance: np.ndarray   # (H, W) int; 0 for stuff / sky
    depth: np.ndarray      # (H, W) float32 ray distance; inf for sky
    rgb: np.ndarray        # (H, W, 3) float32
    ambiguous: np.ndarray  # (H, W) bool: ray passes a region with several candidate classes

    def points(self, intr: Intrinsics, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        return unproject(intr, frame, self.depth)


CLASS_COLORS = {
    "road": (0.50, 0.25, 0.50), "sidewalk": (0.95, 0.35, 0.90), "building": (0.70, 0.70, 0.70),
    "wall": (0.40, 0.40, 0.60), "vegetation": (0.42, 0.56, 0.14), "car": (0.10, 0.10, 0.85),
    "sky": (0.55, 0.70, 0.95),
}
LIGHT_DIR = np.array([-0.4, 0.6, 0.8]) / np.linalg.norm([-0.4, 0.6, 0.8])


def surface_normals(points: np.ndarray, prim: BoundingPrimitive) -> np.ndarray:
    p = prim.to_local(points)
    if prim.kind == "ellipsoid":
        a = np.asarray(prim.extents)
        n = p / a ** 2
    else:
        normals, offsets = prim.halfspaces()
        face = np.argmax(p @ normals.T - offsets, axis=1)
        n = normals[face]
    n = n @ prim.rotation.T
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _base_color(name: str, idx: int) -> np.ndarray:
    if name in CLASS_COLORS:
        return np.asarray(CLASS_COLORS[name])
    rs = np.random.default_rng(idx)
    return rs.uniform(0.2, 0.9, 3)


def ambiguous_rays(table: IntervalTable, prims: list[BoundingPrimitive], sky: int) -> np.ndarray:
    """Rays along which two intervals of different classes overlap in t."""
    cls = slot_classes(table, prims, sky)
    used = table.prim != PAD
    lo = np.maximum(table.t_near[:, :, None], table.t_near[:, None, :])
    hi = np.minimum(table.t_far[:, :, None], table.t_far[:, None, :])
    overlap = (hi > lo) & used[:, :, None] & used[:, None, :] & (cls[:, :, None] != cls[:, None, :])
    return overlap.any(axis=(1, 2))


def raycast_frame(scene: SceneFile, frame: Frame, table: IntervalTable | None = None) -> SyntheticGT:
    """Nearest-surface ray casting against the primitives (the analytic oracle)."""
    intr = scene.intrinsics
    origins, dirs = pixel_rays(intr, frame)
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_k = np.full(n, -1)
    for k, prim in enumerate(scene.prims):
        tn, _, hit = intersect_many(origins, dirs, prim)
        closer = hit & (tn < best_t)
        best_t = np.where(closer, tn, best_t)
        best_k = np.where(closer, k, best_k)
    cls_lut = np.array([p.semantic_class for p in scene.prims] + [scene.classes.sky])
    inst_lut = np.array([p.instance_id or 0 for p in scene.prims] + [0])
    sem = cls_lut[best_k]
    inst = inst_lut[best_k]
    rgb = np.tile(_base_color("sky", scene.classes.sky), (n, 1))
    for k, prim in enumerate(scene.prims):
        sel = best_k == k
        if not sel.any():
            continue
        pts = origins[sel] + best_t[sel, None] * dirs[sel]
        lam = np.clip(surface_normals(pts, prim) @ LIGHT_DIR, 0.0, 1.0)
        base = _base_color(scene.classes.names[prim.semantic_class], prim.semantic_class)
        rgb[sel] = base * (0.35 + 0.65 * lam[:, None])
    if table is None:
        table = build_interval_table(origins, dirs, scene.prims, scene.t_int, scene.max_prims, scene.near)
    amb = ambiguous_rays(table, scene.prims, scene.classes.sky)
    h, w = intr.height, intr.width
    return SyntheticGT(frame.id, sem.reshape(h, w), inst.reshape(h, w), best_t.astype(np.float32).reshape(h, w),
                       rgb.astype(np.float32).reshape(h, w, 3), amb.reshape(h, w))


# ---------------------------------------------------------------------------
# synthetic scene generator

SYNTH_CLASSES = ("road", "sidewalk", "building", "wall", "vegetation", "car", "sky")
SYNTH_THINGS = (2, 5)


def synthetic_layout(n_primitives: int, rng: np.random.Generator) -> list[BoundingPrimitive]:
    """Street scene: ground slab, building, wall cutting into the building, car,
    vegetation ellipsoid, sidewalk polygon (in that order, truncated to ``n_primitives``)."""
    j = lambda s=0.5: rng.uniform(-s, s)  # noqa: E731
    road, sidewalk, building, wall, veg, car = range(6)
    prims = [
        BoundingPrimitive(0, "cuboid", road, translation=[30.0, 0.0, -0.25], extents=(45.0, 10.0, 0.25)),
        BoundingPrimitive(1, "cuboid", building, rotation=rotation_z(j(0.05)),
                          translation=[30.0 + j(), 7.6 + j(0.2), 4.9], extents=(7.0, 3.0, 5.1), instance_id=1),
        BoundingPrimitive(2, "cuboid", wall, translation=[21.0 + j(), 4.45, 1.2], extents=(8.0, 0.3, 1.2)),
        BoundingPrimitive(3, "cuboid", car, rotation=rotation_z(0.1 + j(0.05)),
                          translation=[24.0 + j(), -2.2 + j(0.2), 0.75], extents=(2.2, 0.95, 0.8), instance_id=2),
        BoundingPrimitive(4, "ellipsoid", veg, translation=[31.0 + j(), -6.8 + j(0.2), 2.4],
                          extents=(2.2, 1.8, 2.5)),
        BoundingPrimitive(5, "extruded_polygon", sidewalk, translation=[0.0, 0.0, -0.1],
                          polygon=((-15.0, -9.5), (75.0, -9.5), (75.0, -5.0), (-15.0, -5.5)), height=0.25),
    ]
    if not 1 <= n_primitives <= len(prims):
        raise ValueError(f"n_primitives must be in [1, {len(prims)}]")
    return prims[:n_primitives]


def stereo_frames(n_frames: int, baseline: float = 0.5, step: float = 0.8, height: float = 1.6,
                  pitch: float = np.deg2rad(5.0)) -> list[Frame]:
    rot = look_forward_rotation(pitch)
    frames = []
    for i in range(n_frames):
        x = step * i
        frames.append(Frame(2 * i, "left", rot, [x, baseline / 2, height]))
        frames.append(Frame(2 * i + 1, "right", rot, [x, -baseline / 2, height]))
    return frames


def _normalization(scene: SceneFile, tables: dict[int, IntervalTable]) -> tuple[np.ndarray, np.ndarray]:
    pts = [np.concatenate([p.corners() for p in scene.prims])] if scene.prims else []
    for f in scene.frames:
        o, d = pixel_rays(scene.intrinsics, f)
        tab = tables[f.id]
        t_far = np.where(tab.prim != PAD, tab.t_far, 0.0).max(axis=1)
        pts.append(o[:1])
        pts.append(o + t_far[:, None].astype(np.float64) * d)
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    center = (lo + hi) / 2
    half = (hi - lo) / 2 * 1.02 + 1e-3
    return np.round(center, 6), np.round(half, 6)


def generate_synthetic(n_primitives: int = 6, seed: int = 7, frames: int = 24, width: int = 64,
                       height: int = 48) -> tuple[SceneFile, dict[int, SyntheticGT], dict[int, IntervalTable]]:
    """Build the synthetic scene, its interval caches and analytic ground truth."""
    if frames < 2:
        raise ValueError("need at least 2 frames")
    rng = np.random.default_rng(seed)
    prims = synthetic_layout(n_primitives, rng)
    classes = class_table_with_instances(SYNTH_CLASSES, SYNTH_THINGS, SYNTH_CLASSES.index("sky"), prims)
    intr = Intrinsics(width, height, fx=0.625 * width, fy=0.625 * width, cx=width / 2, cy=height / 2)
    scene = SceneFile(classes, prims, intr, stereo_frames(frames), np.zeros(3), np.ones(3))
    tables = {}
    for f in scene.frames:
        o, d = pixel_rays(intr, f)
        tables[f.id] = build_interval_table(o, d, prims, scene.t_int, scene.max_prims, scene.near)
    scene.center, scene.half_extent = _normalization(scene, tables)
    gt = {f.id: raycast_frame(scene, f, tables[f.id]) for f in scene.frames}
    return scene, gt, tables


# ---------------------------------------------------------------------------
# pseudo supervision

@dataclass
class NoiseModel:
    flip_rate: float = 0.15
    region_blobs: float = 0.0     # fraction of pixels covered by wrongly labeled blobs
    boundary_jitter: float = 0.0  # probability a boundary pixel copies a neighbor label

    def __post_init__(self) -> None:
        for k in ("flip_rate", "region_blobs", "boundary_jitter"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k} must be in [0, 1], got {v}")


def corrupt_labels(gt_maps: list[np.ndarray], noise: NoiseModel, rng: np.random.Generator,
                   num_classes: int) -> tuple[list[np.ndarray], dict[str, float]]:
    """Noisy copies of semantic maps plus the measured error rate.

    Flips replace a pixel with a uniformly drawn *different* class.
    """
    out = []
    wrong = 0
    total = 0
    for gt in gt_maps:
        lab = np.array(gt, dtype=np.int64)
        h, w = lab.shape
        if noise.boundary_jitter > 0:
            up = np.roll(lab, 1, axis=0)
            left = np.roll(lab, 1, axis=1)
            boundary = (up != lab) | (left != lab)
            take = boundary & (rng.random(lab.shape) < noise.boundary_jitter)
            src = np.where(rng.random(lab.shape) < 0.5, up, left)
            lab = np.where(take, src, lab)
        if noise.region_blobs > 0:
            target = noise.region_blobs * h * w
            covered = np.zeros((h, w), bool)
            yy, xx = np.mgrid[0:h, 0:w]
            while covered.sum() < target:
                r = rng.uniform(2, max(3.0, min(h, w) / 6))
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                covered |= disc
                lab[disc] = rng.integers(num_classes)
        if noise.flip_rate > 0 and num_classes > 1:
            flip = rng.random(lab.shape) < noise.flip_rate
            shift = rng.integers(1, num_classes, size=lab.shape)
            lab = np.where(flip, (np.asarray(gt) + shift) % num_classes, lab)
        wrong += int(np.sum(lab != gt))
        total += lab.size
        out.append(lab)
    return out, {"error_rate": wrong / max(total, 1), "pixels": total}


def pseudo_depth(depth: np.ndarray, max_range: float, dropout: float, rng: np.random.Generator) -> np.ndarray:
    """Depth truncated at ``max_range`` with random dropout; 0 marks invalid."""
    d = np.where(np.isfinite(depth) & (depth <= max_range), depth, 0.0)
    d = np.where(rng.random(d.shape) < dropout, 0.0, d)
    return d.astype(np.float32)


# ---------------------------------------------------------------------------
# dataset directories

def _stem(frame_id: int) -> str:
    return f"{frame_id:03d}"


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(root: str | Path, config: dict[str, Any], extra: dict[str, Any] | None = None) -> Path:
    root = Path(root)
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != "manifest.json")
    cfg_blob = json.dumps(config, sort_keys=True).encode()
    manifest = {"config": config, "config_hash": hashlib.sha256(cfg_blob).hexdigest(),
                "artifacts": [{"path": str(p.relative_to(root)), "sha256": file_digest(p)} for p in files]}
    if extra:
        manifest.update(extra)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_synthetic_dataset(root: str | Path, seed: int = 7, frames: int = 24, n_primitives: int = 6,
                            width: int = 64, height: int = 48, noise: NoiseModel | None = None,
                            depth_range: float = 15.0, depth_dropout: float = 0.2) -> dict[str, Any]:
    """Generate a synthetic scene with pseudo labels and write the full dataset."""
    noise = noise or NoiseModel()
    root = Path(root)
    for sub in ("images", "pseudo", "gt", "cache"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    scene, gt, tables = generate_synthetic(n_primitives, seed, frames, width, height)
    save_scene(scene, root / "scene.json")
    rng = np.random.default_rng([seed, 1])
    lefts = scene.left_frames()
    pseudo, report = corrupt_labels([gt[f.id].semantic for f in lefts], noise, rng, scene.classes.num_classes)
    for f in scene.frames:
        g = gt[f.id]
        s = _stem(f.id)
        rasters.write_rgb_png(root / "images" / f"{s}_rgb.png", g.rgb)
        rasters.write_label_png(root / "gt" / f"{s}_semantic.png", g.semantic)
        rasters.write_label_png(root / "gt" / f"{s}_instance.png", g.instance)
        rasters.write_depth(root / "gt" / f"{s}_depth.dgrid", g.depth)
        rasters.write_label_png(root / "gt" / f"{s}_ambiguous.png", g.ambiguous.astype(np.int64))
        save_interval_cache(root / "cache" / f"{s}.icache", tables[f.id], height, width, f.id)
    for f, lab in zip(lefts, pseudo):
        s = _stem(f.id)
        rasters.write_label_png(root / "pseudo" / f"{s}_semantic.png", lab)
        rasters.write_depth(root / "pseudo" / f"{s}_depth.dgrid",
                            pseudo_depth(gt[f.id].depth, depth_range, depth_dropout, rng))
    amb = float(np.mean([gt[f.id].ambiguous.mean() for f in scene.frames]))
    config = {"seed": seed, "frames": frames, "n_primitives": n_primitives, "width": width, "height": height,
              "flip_rate": noise.flip_rate, "region_blobs": noise.region_blobs,
              "boundary_jitter": noise.boundary_jitter, "depth_range": depth_range, "depth_dropout": depth_dropout}
    stats = {"pseudo_error_rate": report["error_rate"], "ambiguous_pixel_fraction": amb}
    write_manifest(root, config, {"kind": "dataset", "stats": stats})
    return stats


@dataclass
class Dataset:
    root: Path
    scene: SceneFile
    _cache: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def open(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        if not (root / "scene.json").exists():
            raise FileNotFoundError(f"{root}: no scene.json")
        return cls(root, load_scene(root / "scene.json"))

    def _path(self, sub: str, frame_id: int, suffix: str) -> Path:
        return self.root / sub / f"{_stem(frame_id)}{suffix}"

    def rgb(self, frame_id: int) -> np.ndarray:
        return rasters.read_rgb_png(self._path("images", frame_id, "_rgb.png"))

    def pseudo_semantic(self, frame_id: int) -> np.ndarray | None:
        p = self._path("pseudo", frame_id, "_semantic.png")
        return rasters.read_label_png(p) if p.exists() else None

    def pseudo_depth(self, frame_id: int) -> np.ndarray | None:
        p = self._path("pseudo", frame_id, "_depth.dgrid")
        return rasters.read_depth(p) if p.exists() else None

    def has_gt(self) -> bool:
        return all(self._path("gt", f.id, "_semantic.png").exists() for f in self.scene.frames)

    def gt(self, frame_id: int) -> SyntheticGT:
        sem = self._path("gt", frame_id, "_semantic.png")
        if not sem.exists():
            raise FileNotFoundError(f"missing ground truth for frame {frame_id}: {sem}")
        amb = self._path("gt", frame_id, "_ambiguous.png")
        depth = rasters.read_depth(self._path("gt", frame_id, "_depth.dgrid"))
        return SyntheticGT(frame_id, rasters.read_label_png(sem),
                           rasters.read_label_png(self._path("gt", frame_id, "_instance.png")),
                           depth, self.rgb(frame_id),
                           rasters.read_label_png(amb).astype(bool) if amb.exists() else np.zeros(depth.shape, bool))

    def intervals(self, frame_id: int, compute: bool = True) -> IntervalTable:
        key = f"icache{frame_id}"
        if key not in self._cache:
            p = self._path("cache", frame_id, ".icache")
            if p.exists():
                self._cache[key] = load_interval_cache(p)[0]
            elif compute:
                sc = self.scene
                o, d = pixel_rays(sc.intrinsics, sc.frame(frame_id))
                self._cache[key] = build_interval_table(o, d, sc.prims, sc.t_int, sc.max_prims, sc.near)
            else:
                raise FileNotFoundError(f"no interval cache for frame {frame_id}")
        return self._cache[key]


def boundary_mask(labels: np.ndarray, radius: int = 1) -> np.ndarray:
    """Pixels within ``radius`` of a label change."""
    lab = np.asarray(labels)
    size = 2 * radius + 1
    hi = ndimage.maximum_filter(lab, size=size, mode="nearest")
    lo = ndimage.minimum_filter(lab, size=size, mode="nearest")
    return hi != lo
