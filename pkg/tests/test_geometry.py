import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labeltransfer.geometry import (PAD, SKY, BoundingPrimitive, GeometryError, Ray, build_interval_table,
                                    build_intervals, contains, intersect, intersect_many, load_interval_cache,
                                    point_in_primitive, rotation_z, sample_points, sample_table,
                                    save_interval_cache, slot_classes)
from labeltransfer.oracles import marched_intervals

UNIT_CUBE = BoundingPrimitive(0, "cuboid", 0, extents=(0.5, 0.5, 0.5))
UNIT_SPHERE = BoundingPrimitive(1, "ellipsoid", 0, extents=(1, 1, 1))
TRIANGLE = BoundingPrimitive(2, "extruded_polygon", 0, polygon=((0, 0), (1, 0), (0, 1)), height=1.0)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def cuboid(pid, cls, center, half, yaw=0.0, **kw):
    return BoundingPrimitive(pid, "cuboid", cls, rotation=rotation_z(yaw), translation=center, extents=half, **kw)


def test_cuboid_slab_example():
    hit = intersect(Ray([-2, 0, 0], [1, 0, 0]), UNIT_CUBE)
    assert (hit.t_near, hit.t_far) == pytest.approx((1.5, 2.5))


def test_sphere_chord_example():
    hit = intersect(Ray([-2, 0, 0], [1, 0, 0]), UNIT_SPHERE)
    assert (hit.t_near, hit.t_far) == pytest.approx((1.0, 3.0))


def test_miss_returns_none_and_behind_is_clipped():
    assert intersect(Ray([-2, 3, 0], [1, 0, 0]), UNIT_CUBE) is None
    assert intersect(Ray([2, 0, 0], [1, 0, 0]), UNIT_CUBE) is None
    inside = intersect(Ray([0, 0, 0], [1, 0, 0]), UNIT_CUBE)
    assert (inside.t_near, inside.t_far) == pytest.approx((0.0, 0.5))


def test_ray_rejects_non_unit_direction():
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [1, 1, 0])


def test_point_in_primitive_examples():
    assert point_in_primitive([0, 0, 0], UNIT_CUBE)
    assert not point_in_primitive([0, 0, 1.001], UNIT_SPHERE)
    assert point_in_primitive([0.25, 0.25, 0.5], TRIANGLE)
    assert not point_in_primitive([0.9, 0.9, 0.5], TRIANGLE)


def test_invalid_primitives_rejected():
    with pytest.raises(GeometryError, match="cone"):
        BoundingPrimitive(0, "cone", 0, extents=(1, 1, 1))
    with pytest.raises(GeometryError):
        BoundingPrimitive(0, "extruded_polygon", 0, polygon=((0, 0), (0, 1), (1, 0)), height=1.0)  # clockwise
    with pytest.raises(GeometryError):
        BoundingPrimitive(0, "cuboid", 0, extents=(1, 0, 1))


def _random_prim(rng, kind):
    rot = random_rotation(rng)
    t = rng.uniform(-0.5, 0.5, 3)
    if kind == "extruded_polygon":
        ang = np.sort(rng.uniform(0, 2 * np.pi, 5))
        poly = np.column_stack([np.cos(ang), np.sin(ang)]) * rng.uniform(0.5, 1.5)
        return BoundingPrimitive(0, kind, 0, rotation=rot, translation=t, polygon=tuple(map(tuple, poly)),
                                 height=rng.uniform(0.5, 2.0))
    return BoundingPrimitive(0, kind, 0, rotation=rot, translation=t, extents=tuple(rng.uniform(0.3, 1.5, 3)))


@pytest.mark.parametrize("kind", ["cuboid", "ellipsoid", "extruded_polygon"])
def test_intersection_fuzz_against_containment_scan(kind):
    """10^4 random rays per kind: endpoints agree with a dense scan within 1e-3."""
    rng = np.random.default_rng({"cuboid": 0, "ellipsoid": 1, "extruded_polygon": 2}[kind])
    n = 10_000
    origins = rng.uniform(-4, 4, (n, 3))
    target = rng.uniform(-1, 1, (n, 3))
    dirs = target - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    prim = _random_prim(rng, kind)
    tn, tf, hit = intersect_many(origins, dirs, prim)
    sn, sf, shit = marched_intervals(origins, dirs, prim, t_max=12.0, n_steps=3000)
    step = 12.0 / 3000
    solid = hit & (tf - tn > 2 * step)
    assert hit.sum() > n // 4
    assert np.all(shit[solid])
    thin = np.where(shit, sf - np.where(shit, sn, 0.0), 0.0) < 2 * step
    assert np.all(~shit | hit | thin)
    assert np.max(np.abs(tn[solid] - sn[solid])) < 1e-3
    assert np.max(np.abs(tf[solid] - sf[solid])) < 1e-3


def test_build_intervals_sorts_and_appends_sky():
    prims = [cuboid(i, i, [t + 0.5, 0, 0], [0.5, 0.5, 0.5]) for i, t in enumerate([5.0, 2.0, 9.0])]
    ivs = build_intervals(Ray([0, 0, 0], [1, 0, 0]), prims, t_int=50)
    assert [iv.prim for iv in ivs] == [1, 0, 2, SKY]
    assert [iv.t_near for iv in ivs] == pytest.approx([2.0, 5.0, 9.0, 10.0])
    assert ivs[-1].t_far == pytest.approx(60.0)


def test_twelve_hits_keep_first_ten_without_sky():
    prims = [cuboid(i, 0, [2.0 * i + 1.5, 0, 0], [0.5, 0.5, 0.5]) for i in range(12)]
    ivs = build_intervals(Ray([0, 0, 0], [1, 0, 0]), prims, max_prims=10)
    assert len(ivs) == 10 and SKY not in [iv.prim for iv in ivs]
    assert [iv.prim for iv in ivs] == list(range(10))


def test_no_hits_gives_single_sky_interval():
    ivs = build_intervals(Ray([0, 0, 0], [0, 0, 1]), [UNIT_CUBE.__class__(0, "cuboid", 0, translation=[5, 0, 0],
                                                                         extents=(0.5, 0.5, 0.5))], near=0.5)
    assert len(ivs) == 1 and ivs[0].prim == SKY
    assert (ivs[0].t_near, ivs[0].t_far) == pytest.approx((0.5, 50.5))


def test_stratified_midpoints():
    ray = Ray([0, 0, 0], [1, 0, 0])
    prim = cuboid(0, 3, [1.5, 0, 0], [0.5, 0.5, 0.5])
    table = build_interval_table(ray.origin[None], ray.direction[None], [prim], max_prims=1)
    assert table.prim.tolist() == [[0]]  # max_prims hits: no sky
    s = sample_points(ray, table.intervals(0), [prim], sky_class=9, n_per_interval=4)
    np.testing.assert_allclose(s.t, [1.125, 1.375, 1.625, 1.875])
    np.testing.assert_allclose(s.delta, [0.25, 0.25, 0.25, 0.125])
    assert all(c == {3} for c in s.candidates)


def test_overlap_sample_has_both_candidate_classes():
    building, wall = 2, 3
    prims = [cuboid(0, building, [3, 0, 0], [1, 1, 1]), cuboid(1, wall, [4.5, 0, 0], [1, 1, 1])]
    ray = Ray([0, 0, 0], [1, 0, 0])
    s = sample_points(ray, build_intervals(ray, prims), prims, sky_class=6, n_per_interval=8)
    in_overlap = (s.t > 3.5) & (s.t < 4.0)
    assert in_overlap.any()
    assert all(s.candidates[i] == {building, wall} for i in np.flatnonzero(in_overlap))
    assert s.candidates[-1] == {6}


def test_sky_samples_have_sky_candidate_only():
    ray = Ray([0, 0, 0], [0, 0, 1])
    s = sample_points(ray, build_intervals(ray, [UNIT_CUBE.__class__(0, "cuboid", 1, translation=[9, 9, 9],
                                                                      extents=(1, 1, 1))]), [], sky_class=4)
    assert all(c == {4} for c in s.candidates)


def test_sample_containment_flags_match_point_oracle():
    rng = np.random.default_rng(5)
    prims = [BoundingPrimitive(i, k, i, rotation=random_rotation(rng), translation=rng.uniform(2, 4, 3),
                               extents=tuple(rng.uniform(0.5, 1.5, 3))) for i, k in
             enumerate(["cuboid", "ellipsoid", "cuboid"])]
    origins = np.zeros((500, 3))
    dirs = rng.uniform(2, 4, (500, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    table = build_interval_table(origins, dirs, prims)
    s = sample_table(table, 8, jitter=True, rng=rng)
    pts = s.points(origins, dirs)
    checked = 0
    for r in range(len(origins)):
        ok = s.valid[r]
        t = s.t[r][ok]
        for slot in range(table.prim.shape[1]):
            k = table.prim[r, slot]
            if k < 0:
                continue
            # float32 sample distances can round across a surface; skip points within 1e-3 of it
            clear = (np.abs(t - table.t_near[r, slot]) > 1e-3) & (np.abs(t - table.t_far[r, slot]) > 1e-3)
            truth = contains(pts[r][ok], prims[k])
            assert np.array_equal(s.inside[r, ok, slot][clear], truth[clear])
            checked += int(clear.sum())
    assert checked > 10_000


def test_jitter_stays_inside_intervals_and_is_sorted():
    rng = np.random.default_rng(0)
    prims = [cuboid(0, 0, [3, 0, 0], [1, 1, 1]), cuboid(1, 1, [4, 0.2, 0], [1, 1, 1])]
    o = np.zeros((64, 3))
    d = np.tile([1.0, 0, 0], (64, 1))
    table = build_interval_table(o, d, prims)
    s = sample_table(table, 8, jitter=True, rng=rng)
    t = np.where(s.valid, s.t, np.inf)
    assert np.all(np.diff(t, axis=1)[s.valid[:, 1:]] >= 0)
    assert np.all(s.delta >= 0)


def test_slot_classes_use_sky_and_pad():
    prims = [cuboid(0, 5, [3, 0, 0], [1, 1, 1])]
    table = build_interval_table(np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 0, 1.0]]), prims)
    cls = slot_classes(table, prims, sky_class=9)
    assert cls[0].tolist() == [5, 9]
    assert cls[1].tolist() == [9, -1]
    assert table.prim[1].tolist() == [SKY, PAD]


def test_interval_cache_round_trip(tmp_path):
    prims = [cuboid(0, 5, [3, 0, 0], [1, 1, 1])]
    table = build_interval_table(np.zeros((4, 3)), np.tile([1.0, 0, 0], (4, 1)), prims)
    save_interval_cache(tmp_path / "c.icache", table, 2, 2, frame=3)
    back, meta = load_interval_cache(tmp_path / "c.icache")
    assert meta["frame"] == 3
    np.testing.assert_array_equal(back.t_near, table.t_near)
    with pytest.raises(GeometryError):
        save_interval_cache(tmp_path / "d.icache", table, 3, 2, frame=0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2 * np.pi), st.floats(0.2, 2), st.floats(0.2, 2))
def test_entry_and_exit_points_lie_on_the_surface(y, z, yaw, a, b):
    prim = cuboid(0, 0, [0, 0, 0], [a, b, 1.0], yaw=yaw)
    origin = np.array([-10.0, y, z])
    tn, tf, hit = intersect_many(origin[None], np.array([[1.0, 0, 0]]), prim)
    if hit[0] and tf[0] - tn[0] > 1e-6:
        mid = origin + 0.5 * (tn[0] + tf[0]) * np.array([1.0, 0, 0])
        assert contains(mid[None], prim, tol=1e-9)[0]
        for t in (tn[0], tf[0]):
            p = origin + t * np.array([1.0, 0, 0])
            assert contains(p[None], prim, tol=1e-6)[0]
            assert not contains((p + np.array([1e-3, 0, 0]) * (1 if t == tf[0] else -1))[None], prim)[0]
