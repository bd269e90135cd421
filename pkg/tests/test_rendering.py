import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labeltransfer import autodiff as ad
from labeltransfer import fields as fl
from labeltransfer.autodiff import Tensor
from labeltransfer.camera import pixel_rays
from labeltransfer.oracles import opaque_density, reference_composite
from labeltransfer.rendering import (RenderError, accumulate, composite_weights, load_label_maps, make_bundle,
                                     panoptic_decode, render_frame, render_rays, save_label_maps)
from labeltransfer.scene_io import generate_synthetic, raycast_frame

from conftest import TINY_FIELD

CLASSES = fl.ClassTable(("road", "building", "car", "sky"), things={1, 2}, sky=3,
                        instances=((3, 2), (9, 1)))


def test_opaque_single_sample():
    w, _ = composite_weights(np.array([[1e6]]), np.array([[1.0]]))
    assert w.data[0, 0] == pytest.approx(1.0)


def test_zero_density_gives_zero_weight():
    w, t = composite_weights(np.zeros((1, 4)), np.ones((1, 4)))
    assert w.data.sum() == 0 and np.all(t.data == 1)


def test_two_samples_ln2():
    w, _ = composite_weights(np.array([[np.log(2)] * 2]), np.ones((1, 2)))
    np.testing.assert_allclose(w.data[0], [0.5, 0.25], atol=1e-6)
    assert w.data.sum() == pytest.approx(0.75, abs=1e-6)


def _random_rays(rng, n, p, m):
    sigma = rng.exponential(1.0, (n, p)) * (rng.random((n, p)) < 0.8)
    delta = rng.uniform(0.0, 2.0, (n, p))
    t = np.cumsum(delta, axis=1)
    rgb = rng.random((n, p, 3))
    s_fix = rng.dirichlet(np.ones(m), (n, p))
    s_lrn = rng.dirichlet(np.ones(m), (n, p))
    t_fix = rng.dirichlet(np.ones(2), (n, p))
    return sigma, delta, t, rgb, s_fix, s_lrn, t_fix


def test_composite_matches_scalar_oracle_on_1000_rays():
    rng = np.random.default_rng(0)
    m, sky = 5, 4
    sigma, delta, t, rgb, s_fix, s_lrn, t_fix = _random_rays(rng, 1000, 12, m)
    with ad.precision(np.float64):
        comp = accumulate(sigma, delta, t, rgb, s_fix, s_lrn, t_fix, sky)
    onehot = np.eye(m)[sky]
    for r in range(1000):
        c, op = reference_composite(sigma[r], delta[r], rgb[r])
        sf, _ = reference_composite(sigma[r], delta[r], s_fix[r], onehot)
        sl, _ = reference_composite(sigma[r], delta[r], s_lrn[r], onehot)
        ti, _ = reference_composite(sigma[r], delta[r], t_fix[r])
        dep, _ = reference_composite(sigma[r], delta[r], t[r][:, None])
        np.testing.assert_allclose(comp.color.data[r], c, atol=1e-6)
        np.testing.assert_allclose(comp.sem_fixed.data[r], sf, atol=1e-6)
        np.testing.assert_allclose(comp.sem_learned.data[r], sl, atol=1e-6)
        np.testing.assert_allclose(comp.instance.data[r], ti, atol=1e-6)
        assert comp.opacity.data[r] == pytest.approx(op, abs=1e-6)
        if op > 1e-3:
            assert comp.depth.data[r] == pytest.approx(dep[0] / op, abs=1e-6 * max(1.0, dep[0] / op))


def test_semantic_distributions_are_normalized_and_transmittance_monotone():
    rng = np.random.default_rng(1)
    sigma, delta, t, rgb, s_fix, s_lrn, t_fix = _random_rays(rng, 1000, 16, 6)
    sigma = sigma * rng.choice([1e-3, 1.0, 1e3], size=sigma.shape)
    comp = accumulate(sigma, delta, t, rgb, s_fix, s_lrn, t_fix, sky=5)
    np.testing.assert_allclose(comp.sem_fixed.data.sum(axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(comp.sem_learned.data.sum(axis=1), 1.0, atol=1e-5)
    assert np.all(np.diff(comp.transmittance.data, axis=1) <= 0)
    assert np.all(comp.opacity.data <= 1.0 + 1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=12), st.floats(1e-3, 5.0))
def test_transmittance_never_increases(sigmas, step):
    s = np.array([sigmas], dtype=np.float64)
    _, trans = composite_weights(s, np.full_like(s, step))
    assert np.all(np.diff(trans.data[0]) <= 0)
    assert np.all((trans.data >= 0) & (trans.data <= 1))


def test_sky_ray_and_opaque_car_ray():
    m = CLASSES.num_classes
    comp = accumulate(np.full((1, 4), 1e-9), np.ones((1, 4)), np.arange(1.0, 5.0)[None], np.zeros((1, 4, 3)),
                      np.tile(np.eye(m)[3], (1, 4, 1)), np.full((1, 4, m), 1 / m), np.zeros((1, 4, 2)), CLASSES.sky)
    np.testing.assert_allclose(comp.sem_learned.data[0], np.eye(m)[3], atol=1e-6)
    s_fix = np.stack([np.eye(m)[2], np.eye(m)[1], np.eye(m)[3]])[None]
    comp = accumulate(np.array([[1e5, 1e5, 0.0]]), np.ones((1, 3)), np.array([[1.0, 2, 3]]), np.zeros((1, 3, 3)),
                      s_fix, s_fix, np.zeros((1, 3, 2)), CLASSES.sky)
    np.testing.assert_allclose(comp.sem_fixed.data[0], np.eye(m)[2], atol=1e-6)


def test_panoptic_decode_examples():
    road = np.array([[0.7, 0.1, 0.1, 0.1]])
    assert [x.tolist() for x in panoptic_decode(road, np.array([[0.2, 0.8]]), CLASSES)] == [[0], [0]]
    car = np.array([[0.1, 0.2, 0.6, 0.1]])
    sem, inst = panoptic_decode(car, np.array([[0.6, 0.4]]), CLASSES)
    assert (sem[0], inst[0]) == (2, 3)
    sem, inst = panoptic_decode(car, np.array([[0.0, 0.9]]), CLASSES)
    assert (sem[0], inst[0]) == (2, 0)
    # masking, not the raw argmax, picks the instance
    sem, inst = panoptic_decode(car, np.array([[0.1, 0.9]]), CLASSES)
    assert (sem[0], inst[0]) == (2, 3)


def test_tiny_frame_matches_ray_cast_oracle(tiny_params):
    for width, height in ((2, 2), (16, 12)):
        scene, gt, tables = generate_synthetic(frames=2, width=width, height=height)
        sf = scene.scene_frame()
        for f in scene.frames:
            maps = render_frame(scene.intrinsics, f, sf, tiny_params, TINY_FIELD, passes=("semantic_fixed",),
                                table=tables[f.id], density_override=opaque_density())
            truth = raycast_frame(scene, f).semantic
            ok = ~gt[f.id].ambiguous
            np.testing.assert_array_equal(maps.semantic_fixed[ok], truth[ok])


def test_requested_passes_only(tiny_params, small_dataset):
    sc = small_dataset.scene
    maps = render_frame(sc.intrinsics, sc.frames[0], sc.scene_frame(), tiny_params, TINY_FIELD, passes=("rgb",))
    assert maps.rgb is not None and maps.rgb.shape == (12, 16, 3)
    assert maps.semantic is None and maps.semantic_fixed is None and maps.instance is None and maps.depth is None
    with pytest.raises(RenderError):
        render_frame(sc.intrinsics, sc.frames[0], sc.scene_frame(), tiny_params, TINY_FIELD, passes=("normals",))
    with pytest.raises(RenderError, match="interval"):
        render_frame(sc.intrinsics, sc.frames[0], sc.scene_frame(), tiny_params, TINY_FIELD,
                     compute_intervals=False)


def test_rendering_is_deterministic_and_round_trips(tiny_params, small_dataset, tmp_path):
    sc = small_dataset.scene
    args = (sc.intrinsics, sc.frames[0], sc.scene_frame(), tiny_params, TINY_FIELD)
    a = render_frame(*args, table=small_dataset.intervals(0))
    b = render_frame(*args, table=small_dataset.intervals(0), chunk=37)
    for name in ("rgb", "depth", "semantic", "semantic_fixed", "instance"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    save_label_maps(a, tmp_path, "000", sc.classes)
    back = load_label_maps(tmp_path, "000")
    np.testing.assert_array_equal(back.semantic, a.semantic)
    np.testing.assert_array_equal(back.instance, a.instance)
    np.testing.assert_array_equal(back.depth, a.depth)


def test_density_override_and_gradients_flow(tiny_params, small_dataset):
    sc = small_dataset.scene
    sf = sc.scene_frame()
    o, d = pixel_rays(sc.intrinsics, sc.frames[0])
    bundle = make_bundle(o[:20], d[:20], small_dataset.intervals(0).rows(slice(0, 20)), sf, 4)
    out = render_rays(bundle, tiny_params, TINY_FIELD, sf)
    ad.backward(out.comp.color.sum())
    assert np.abs(tiny_params["trunk.0.w"].grad).sum() > 0
    assert tiny_params["semantic.1.w"].grad is None
    out = render_rays(bundle, tiny_params, TINY_FIELD, sf, density_override=lambda p, prov: np.full(len(p), 2.0))
    np.testing.assert_array_equal(out.sigma.data, 2.0)
    ad.clear_tape()


def test_padded_samples_carry_no_weight():
    s = Tensor(np.array([[1.0, 1.0, 5.0]]))
    w, _ = composite_weights(s, np.array([[1.0, 1.0, 0.0]]))
    assert w.data[0, 2] == 0
