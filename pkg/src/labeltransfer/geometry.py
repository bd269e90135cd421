"""Labeled convex primitives, ray intersection and per-ray point sampling.

All intersection routines are vectorised over rays. Rays are given as
``origins`` (R, 3) and unit ``dirs`` (R, 3) in world coordinates (meters).
A primitive's ``rotation`` maps local axes to world axes, so a world point
``x`` has local coordinates ``rotation.T @ (x - translation)``.

Cuboids are centered on their local origin. Ellipsoids are centered on it
too. Extruded polygons use a counterclockwise convex loop in the local xy
plane, extruded over ``0 <= z <= height``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_arrays, write_arrays

KINDS = ("cuboid", "ellipsoid", "extruded_polygon")

SKY = -1  # interval / sample provenance for the sky segment
PAD = -2  # unused slot

INTERVAL_CACHE_MAGIC = b"LTICACHE"
INTERVAL_CACHE_VERSION = 1


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BoundingPrimitive:
    id: int
    kind: str
    semantic_class: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extents: tuple[float, ...] = ()  # cuboid half-extents or ellipsoid semi-axes
    polygon: tuple[tuple[float, float], ...] = ()
    height: float = 0.0
    instance_id: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))
        object.__setattr__(self, "polygon", tuple((float(u), float(v)) for u, v in self.polygon))
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise GeometryError(f"primitive {self.id}: unknown kind {self.kind!r}")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise GeometryError(f"primitive {self.id}: rotation is not a proper rotation matrix")
        if self.kind in ("cuboid", "ellipsoid"):
            if len(self.extents) != 3 or min(self.extents) <= 0:
                raise GeometryError(f"primitive {self.id}: {self.kind} needs 3 positive extents")
        else:
            if self.height <= 0:
                raise GeometryError(f"primitive {self.id}: extrusion height must be positive")
            _check_convex_ccw(self.id, np.asarray(self.polygon, dtype=np.float64))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def dir_to_local(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation

    def halfspaces(self) -> tuple[np.ndarray, np.ndarray]:
        """Local-frame half-spaces ``normals @ p <= offsets`` of a polyhedral primitive."""
        if self.kind == "cuboid":
            h = np.asarray(self.extents)
            normals = np.concatenate([np.eye(3), -np.eye(3)])
            return normals, np.concatenate([h, h])
        if self.kind == "extruded_polygon":
            poly = np.asarray(self.polygon)
            edges = np.roll(poly, -1, axis=0) - poly
            # outward normal of a CCW loop edge (ex, ey) is (ey, -ex)
            n2 = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
            n2 /= np.linalg.norm(n2, axis=1, keepdims=True)
            normals = np.concatenate([np.column_stack([n2, np.zeros(len(n2))]),
                                      [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]])
            offsets = np.concatenate([np.einsum("ij,ij->i", n2, poly), [self.height, 0.0]])
            return normals, offsets
        raise GeometryError("ellipsoids have no half-space form")

    def corners(self) -> np.ndarray:
        """World-space points whose convex hull bounds the primitive."""
        if self.kind == "extruded_polygon":
            poly = np.asarray(self.polygon)
            local = np.concatenate([np.column_stack([poly, np.zeros(len(poly))]),
                                    np.column_stack([poly, np.full(len(poly), self.height)])])
        else:
            signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
            local = signs * np.asarray(self.extents)
        return local @ self.rotation.T + self.translation


def _check_convex_ccw(pid: int, poly: np.ndarray) -> None:
    if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
        raise GeometryError(f"primitive {pid}: polygon needs at least 3 (u, v) vertices")
    a = poly
    b = np.roll(poly, -1, axis=0)
    c = np.roll(poly, -2, axis=0)
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - b[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - b[:, 0])
    if np.any(cross <= 0):
        raise GeometryError(f"primitive {pid}: polygon loop must be strictly convex and counterclockwise")


def rotation_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# containment

def contains(points: np.ndarray, prim: BoundingPrimitive, tol: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside the closed solid (vectorised)."""
    p = prim.to_local(np.atleast_2d(points))
    if prim.kind == "ellipsoid":
        q = p / np.asarray(prim.extents)
        return np.einsum("ij,ij->i", q, q) <= 1.0 + tol
    normals, offsets = prim.halfspaces()
    return np.all(p @ normals.T <= offsets + tol, axis=1)


def point_in_primitive(x, prim: BoundingPrimitive) -> bool:
    return bool(contains(np.asarray(x, dtype=np.float64).reshape(1, 3), prim)[0])


# ---------------------------------------------------------------------------
# intersection

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int] = (0, 0)
    frame: int = 0

    def __post_init__(self) -> None:
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise GeometryError(f"ray direction must be unit length, got norm {np.linalg.norm(d):.8f}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class HitInterval:
    prim: int  # primitive index into the scene list, or SKY
    t_near: float
    t_far: float


def _clip_halfspaces(o: np.ndarray, d: np.ndarray, normals: np.ndarray, offsets: np.ndarray):
    denom = d @ normals.T  # (R, F)
    num = offsets[None, :] - o @ normals.T
    parallel = denom == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / np.where(parallel, 1.0, denom)
    entering = denom < 0
    exiting = denom > 0
    t_near = np.max(np.where(entering, t, -np.inf), axis=1)
    t_far = np.min(np.where(exiting, t, np.inf), axis=1)
    # parallel to a face and outside it: never inside
    outside = np.any(parallel & (num < 0), axis=1)
    t_far = np.where(outside, -np.inf, t_far)
    return t_near, t_far


def intersect_many(origins: np.ndarray, dirs: np.ndarray, prim: BoundingPrimitive):
    """Return (t_near, t_far, hit) for every ray, clipped to t >= 0."""
    o = prim.to_local(origins)
    d = prim.dir_to_local(dirs)
    if prim.kind == "ellipsoid":
        a = np.asarray(prim.extents)
        os_, ds = o / a, d / a
        qa = np.einsum("ij,ij->i", ds, ds)
        qb = np.einsum("ij,ij->i", os_, ds)
        qc = np.einsum("ij,ij->i", os_, os_) - 1.0
        disc = qb * qb - qa * qc
        root = np.sqrt(np.maximum(disc, 0.0))
        t_near = np.where(disc > 0, (-qb - root) / qa, np.inf)
        t_far = np.where(disc > 0, (-qb + root) / qa, -np.inf)
    else:
        t_near, t_far = _clip_halfspaces(o, d, *prim.halfspaces())
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near
    return np.where(hit, t_near, np.inf), np.where(hit, t_far, -np.inf), hit


def intersect(ray: Ray, prim: BoundingPrimitive, index: int | None = None) -> HitInterval | None:
    tn, tf, hit = intersect_many(ray.origin[None], ray.direction[None], prim)
    if not hit[0]:
        return None
    return HitInterval(prim.id if index is None else index, float(tn[0]), float(tf[0]))


# ---------------------------------------------------------------------------
# per-ray interval tables

@dataclass
class IntervalTable:
    """Sorted hit intervals for a batch of rays.

    ``prim`` holds scene-list indices, ``SKY`` or ``PAD`` per slot; slots are
    sorted by ``t_near`` with the sky interval (if any) last.
    """

    prim: np.ndarray    # (R, S) int32
    t_near: np.ndarray  # (R, S) float32
    t_far: np.ndarray   # (R, S) float32

    def __len__(self) -> int:
        return self.prim.shape[0]

    def rows(self, idx) -> "IntervalTable":
        sub = IntervalTable(self.prim[idx], self.t_near[idx], self.t_far[idx])
        return sub.trimmed()

    def trimmed(self) -> "IntervalTable":
        used = int(np.max(np.sum(self.prim != PAD, axis=1), initial=1))
        return IntervalTable(self.prim[:, :used], self.t_near[:, :used], self.t_far[:, :used])

    def intervals(self, r: int) -> list[HitInterval]:
        return [HitInterval(int(k), float(a), float(b))
                for k, a, b in zip(self.prim[r], self.t_near[r], self.t_far[r]) if k != PAD]

    @staticmethod
    def concat(tables: list["IntervalTable"]) -> "IntervalTable":
        width = max(t.prim.shape[1] for t in tables)

        def pad(a, fill):
            return np.concatenate([np.pad(x, ((0, 0), (0, width - x.shape[1])), constant_values=fill)
                                   for x in a])

        return IntervalTable(pad([t.prim for t in tables], PAD),
                             pad([t.t_near for t in tables], np.inf),
                             pad([t.t_far for t in tables], np.inf))


def build_interval_table(origins: np.ndarray, dirs: np.ndarray, prims: list[BoundingPrimitive],
                         t_int: float = 50.0, max_prims: int = 10, near: float = 0.0) -> IntervalTable:
    """Sort hits near to far, keep ``max_prims`` and append the sky segment.

    The sky interval is ``[t_max, t_max + t_int]`` with ``t_max`` the farthest
    exit among the kept hits, or ``near`` for a ray that hits nothing. It is
    only appended when fewer than ``max_prims`` primitives were hit.
    """
    if max_prims < 1:
        raise GeometryError("max_prims must be >= 1")
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays, k = len(origins), len(prims)
    tn = np.full((n_rays, max(k, 1)), np.inf)
    tf = np.full((n_rays, max(k, 1)), np.inf)
    for j, prim in enumerate(prims):
        a, b, hit = intersect_many(origins, dirs, prim)
        tn[:, j] = np.where(hit, a, np.inf)
        tf[:, j] = np.where(hit, b, np.inf)
    # stable sort keeps scene order on exact t_near ties
    order = np.argsort(tn, axis=1, kind="stable")
    tn = np.take_along_axis(tn, order, axis=1)
    tf = np.take_along_axis(tf, order, axis=1)
    hit = np.isfinite(tn)
    n_hit = hit.sum(axis=1)
    width = min(max_prims, max(k, 1)) + 1
    prim = np.full((n_rays, width), PAD, dtype=np.int32)
    t_near = np.full((n_rays, width), np.inf)
    t_far = np.full((n_rays, width), np.inf)
    keep = min(max_prims, tn.shape[1])
    kept = hit[:, :keep]
    prim[:, :keep] = np.where(kept, order[:, :keep], PAD)
    t_near[:, :keep] = np.where(kept, tn[:, :keep], np.inf)
    t_far[:, :keep] = np.where(kept, tf[:, :keep], np.inf)
    t_max = np.max(np.where(kept, tf[:, :keep], -np.inf), axis=1, initial=-np.inf)
    t_max = np.where(np.isfinite(t_max), t_max, near)
    add_sky = n_hit < max_prims
    slot = np.minimum(n_hit, width - 1)
    rows = np.nonzero(add_sky)[0]
    prim[rows, slot[rows]] = SKY
    t_near[rows, slot[rows]] = t_max[rows]
    t_far[rows, slot[rows]] = t_max[rows] + t_int
    return IntervalTable(prim, t_near.astype(np.float32), t_far.astype(np.float32)).trimmed()


def build_intervals(ray: Ray, prims: list[BoundingPrimitive], t_int: float = 50.0,
                    max_prims: int = 10, near: float = 0.0) -> list[HitInterval]:
    table = build_interval_table(ray.origin[None], ray.direction[None], prims, t_int, max_prims, near)
    return table.intervals(0)


# ---------------------------------------------------------------------------
# point sampling

@dataclass
class RaySamples:
    """Samples for a batch of rays, padded to a common count per ray.

    Padding sits at the end of each row with ``valid`` False and zero delta.
    ``inside[r, i, s]`` tells whether sample ``i`` lies in slot ``s`` of the
    ray's interval table, which is how candidate sets are formed.
    """

    t: np.ndarray        # (R, P) float32; padded entries are 0
    delta: np.ndarray    # (R, P) float32
    valid: np.ndarray    # (R, P) bool
    slot: np.ndarray     # (R, P) int16 interval slot each sample came from, -1 for padding
    inside: np.ndarray   # (R, P, S) bool
    table: IntervalTable

    @property
    def n_rays(self) -> int:
        return self.t.shape[0]

    def points(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        return origins[:, None, :] + self.t[..., None] * dirs[:, None, :]

    def provenance(self) -> np.ndarray:
        """Primitive index (or SKY) of each sample's source interval; PAD for padding."""
        src = np.take_along_axis(self.table.prim, np.maximum(self.slot, 0).astype(np.int64), axis=1)
        return np.where(self.valid, src, PAD)


def sample_table(table: IntervalTable, n_per_interval: int, jitter: bool = False,
                 rng: np.random.Generator | None = None) -> RaySamples:
    """Stratified samples in every interval, merged and re-sorted per ray.

    ``delta`` for a sample runs to the next sample, capped at the end of the
    interval it was drawn from, so empty space between primitives carries no
    quadrature weight.
    """
    if n_per_interval < 1:
        raise GeometryError("n_per_interval must be >= 1")
    if jitter and rng is None:
        raise GeometryError("jittered sampling needs an rng")
    prim, a, b = table.prim, table.t_near.astype(np.float64), table.t_far.astype(np.float64)
    n_rays, n_slots = prim.shape
    n = n_per_interval
    used = prim != PAD
    if jitter:
        u = rng.random((n_rays, n_slots, n))
    else:
        u = np.full((n_rays, n_slots, n), 0.5)
    frac = (np.arange(n)[None, None, :] + u) / n
    start = np.where(used, a, 0.0)
    width = np.where(used, b, 0.0) - start
    t = start[..., None] + frac * width[..., None]
    t = np.where(used[..., None], t, np.inf).reshape(n_rays, n_slots * n)
    slot = np.broadcast_to(np.arange(n_slots)[None, :, None], (n_rays, n_slots, n)).reshape(n_rays, -1)
    order = np.argsort(t, axis=1, kind="stable")
    t = np.take_along_axis(t, order, axis=1)
    slot = np.take_along_axis(slot, order, axis=1)
    valid = np.isfinite(t)
    end = np.take_along_axis(np.where(used, b, np.inf), slot, axis=1)
    t_next = np.concatenate([t[:, 1:], np.full((n_rays, 1), np.inf)], axis=1)
    t = np.where(valid, t, 0.0)
    delta = np.where(valid, np.minimum(t_next, end) - t, 0.0)
    inside = (t[..., None] >= a[:, None, :]) & (t[..., None] <= b[:, None, :]) & used[:, None, :] & valid[..., None]
    keep = int(valid.sum(axis=1).max(initial=1))
    return RaySamples(t=t[:, :keep].astype(np.float32), delta=delta[:, :keep].astype(np.float32),
                      valid=valid[:, :keep], slot=np.where(valid, slot, -1)[:, :keep].astype(np.int16),
                      inside=inside[:, :keep], table=table)


@dataclass
class RaySampleSet:
    """Samples of a single ray, as plain lists."""

    t: np.ndarray
    delta: np.ndarray
    points: np.ndarray
    interval: np.ndarray
    candidates: list[frozenset[int]]


def sample_points(ray: Ray, intervals: list[HitInterval], prims: list[BoundingPrimitive], sky_class: int,
                  n_per_interval: int = 8, jitter: bool = False,
                  rng: np.random.Generator | None = None) -> RaySampleSet:
    """Sample one ray and attach the candidate semantic classes of every point."""
    if not intervals:
        raise GeometryError("a ray needs at least one interval to sample")
    table = IntervalTable(np.array([[iv.prim for iv in intervals]], dtype=np.int32),
                          np.array([[iv.t_near for iv in intervals]], dtype=np.float32),
                          np.array([[iv.t_far for iv in intervals]], dtype=np.float32))
    s = sample_table(table, n_per_interval, jitter, rng)
    ok = s.valid[0]
    classes = slot_classes(table, prims, sky_class)[0]
    cands = [frozenset(int(c) for c in classes[row]) for row in s.inside[0][ok]]
    t = s.t[0][ok]
    return RaySampleSet(t=t, delta=s.delta[0][ok], points=ray.origin + t[:, None].astype(np.float64) * ray.direction,
                        interval=s.slot[0][ok], candidates=cands)


def slot_classes(table: IntervalTable, prims: list[BoundingPrimitive], sky_class: int) -> np.ndarray:
    """Semantic class of each interval slot; -1 for padding."""
    lut = np.array([p.semantic_class for p in prims] + [sky_class, -1], dtype=np.int32)
    idx = np.where(table.prim >= 0, table.prim, np.where(table.prim == SKY, len(prims), len(prims) + 1))
    return lut[idx]


def slot_instances(table: IntervalTable, prims: list[BoundingPrimitive]) -> np.ndarray:
    """Instance id of each slot (0 where the primitive is not a thing, sky or padding)."""
    lut = np.array([p.instance_id or 0 for p in prims] + [0], dtype=np.int32)
    idx = np.where(table.prim >= 0, table.prim, len(prims))
    return lut[idx]


# ---------------------------------------------------------------------------
# offline interval cache

def save_interval_cache(path: str | Path, table: IntervalTable, height: int, width: int, frame: int) -> None:
    if len(table) != height * width:
        raise GeometryError(f"interval cache for frame {frame}: {len(table)} rows for {height}x{width} pixels")
    write_arrays(path, {"prim": table.prim, "t_near": table.t_near, "t_far": table.t_far},
                 {"version": INTERVAL_CACHE_VERSION, "height": height, "width": width, "frame": frame},
                 INTERVAL_CACHE_MAGIC)


def load_interval_cache(path: str | Path) -> tuple[IntervalTable, dict]:
    arrays, meta = read_arrays(path, INTERVAL_CACHE_MAGIC)
    if meta.get("version") != INTERVAL_CACHE_VERSION:
        raise GeometryError(f"{path}: unsupported interval cache version {meta.get('version')}")
    return IntervalTable(arrays["prim"], arrays["t_near"], arrays["t_far"]), meta
