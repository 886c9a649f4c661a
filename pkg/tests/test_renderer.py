import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from spikenerf.diffcore import ContractViolation
from spikenerf.renderer import (
    Camera, NoSurfaceError, Ray, RaySampleBatch, RenderSettings, bound_rays, bound_report, bound_terms,
    composite, extract_depth, render_image, sample_ray, sample_rays, scalar_bound, weight_identity_residual,
)
from spikenerf.scenes import Sphere, SceneSpec, eval_scene

densities = arrays(np.float64, 16, elements=st.floats(0, 50))


def step_depth_closed_form(a, v, T):
    """Expected termination distance given absorption (normalised by the absorbed mass)."""
    x = v * (T - a)
    return a + (1 - math.exp(-x) * (x + 1)) / (v * (1 - math.exp(-x)))


def step_integral_closed_form(a, v, T):
    """The raw integral of sigma * exp(-int sigma) * t over [0, T]."""
    x = v * (T - a)
    return a * (1 - math.exp(-x)) + (1 - math.exp(-x) * (x + 1)) / v


def quadrature_depth(a, v, T, n, normalise=False):
    t, dt = sample_ray(Ray([0, 0, 0], [1, 0, 0], 0.0, T), n)
    _, d, w, _ = composite(RaySampleBatch(t, dt, np.where(t >= a, v, 0.0)))
    return d / w.sum() if normalise else d


# ----------------------------------------------------------------- sampling


def test_bin_centres():
    t, dt = sample_ray(Ray([0, 0, 0], [0, 0, 1], 0.0, 1.0), 4)
    np.testing.assert_allclose(t, [0.125, 0.375, 0.625, 0.875], rtol=0, atol=1e-15)
    assert abs(dt.sum() - 1.0) < 1e-12


def test_stratified_is_reproducible_and_within_bins():
    ray = Ray([0, 0, 0], [0, 0, 1], 0.5, 2.5)
    a, _ = sample_ray(ray, 32, True, seed=11)
    b, _ = sample_ray(ray, 32, True, seed=11)
    np.testing.assert_array_equal(a, b)
    edges = 0.5 + np.arange(33) * 2.0 / 32
    assert np.all((a >= edges[:-1]) & (a < edges[1:]))


def test_sampling_contracts():
    with pytest.raises(ContractViolation):
        sample_ray(Ray([0, 0, 0], [0, 0, 1], 0.0, 1.0), 1)
    with pytest.raises(ContractViolation):
        Ray([0, 0, 0], [0, 0, 1], 1.0, 1.0)
    with pytest.raises(ContractViolation):
        Ray([0, 0, 0], [0, 0, 2], 0.0, 1.0)


@given(st.floats(0, 5), st.floats(0.01, 5), st.integers(2, 300))
def test_strata_tile_the_range(near, length, n):
    t, dt = sample_rays([near], [near + length], n)
    assert abs(dt.sum() - length) < 1e-12 * max(1, n)
    assert np.all(np.diff(t) > 0)


# -------------------------------------------------------------- compositing


def test_empty_space():
    t, dt = sample_rays([0.0], [1.0], 8)
    color, d, w, _ = composite(RaySampleBatch(t[0], dt[0], np.zeros(8), np.ones((8, 3))))
    np.testing.assert_array_equal(color, 0.0)
    assert d == 0.0 and w.sum() == 0.0


def test_constant_density_closed_form():
    v, n = 3.0, 50
    t, dt = sample_rays([0.0], [2.0], n)
    _, _, w, _ = composite(RaySampleBatch(t[0], dt[0], np.full(n, v)))
    assert w.sum() == pytest.approx(1 - math.exp(-v * n * dt[0, 0]), rel=1e-13)


def test_negative_density_rejected():
    with pytest.raises(ContractViolation):
        composite(RaySampleBatch(np.array([0.5, 1.0]), np.array([0.5, 0.5]), np.array([1.0, -1.0])))


@pytest.mark.parametrize("a,v", [(0.5, 10.0), (1.2, 3.0), (0.3, 40.0)])
def test_step_density_matches_closed_form_and_fine_quadrature(a, v):
    T = 2.0
    for exact, norm in ((step_integral_closed_form(a, v, T), False), (step_depth_closed_form(a, v, T), True)):
        coarse = quadrature_depth(a, v, T, 2000, norm)
        fine = quadrature_depth(a, v, T, 20000, norm)
        # quadrature error is O(dt): the 10x finer run must be closer
        assert abs(fine - exact) < abs(coarse - exact)
        assert abs(fine - exact) < 2 * T / 20000
        assert abs(coarse - exact) < 2 * T / 2000


@given(densities)
def test_weight_identity(sigma):
    t, dt = sample_rays([0.0], [2.0], 16)
    r = weight_identity_residual(RaySampleBatch(t[0], dt[0], sigma))
    assert r[0] <= 1e-12


@given(densities)
def test_batched_matches_single(sigma):
    t, dt = sample_rays([0.0, 0.0], [2.0, 2.0], 16)
    sig = np.stack([sigma, sigma[::-1]])
    _, d, w, _ = composite(RaySampleBatch(t, dt, sig))
    for i in range(2):
        _, di, wi, _ = composite(RaySampleBatch(t[i], dt[i], sig[i]))
        assert d[i] == pytest.approx(di, rel=1e-15, abs=1e-300)
        np.testing.assert_array_equal(w[i], wi)


# ------------------------------------------------------------ extraction


def test_extraction_examples():
    t = np.array([0.1, 0.2, 0.3, 0.4])
    dt = np.full(4, 0.1)
    assert extract_depth(RaySampleBatch(t, dt, np.array([0, 0, 4.0, 7]))) == 0.3
    assert extract_depth(RaySampleBatch(t, dt, np.zeros(4))) is None
    b = RaySampleBatch(t[:3], dt[:3], np.array([0.2, 0.9, 3.0]))
    assert extract_depth(b, "threshold", 1.0) == 0.3
    with pytest.raises(ContractViolation):
        extract_depth(b, "threshold")


@given(densities, arrays(np.float64, (16, 3), elements=st.floats(0, 1)), st.floats(0.01, 100))
def test_extraction_ignores_radiance_scale(sigma, rgb, scale):
    t, dt = sample_rays([0.0], [2.0], 16)
    a = extract_depth(RaySampleBatch(t[0], dt[0], sigma, rgb))
    b = extract_depth(RaySampleBatch(t[0], dt[0], sigma, rgb * scale))
    assert a == b


# ------------------------------------------------------------------- bound


def test_bound_example():
    lo, up = bound_terms(10.0, 5.0, 0.01, 0.01, 0.01, 2.0)
    assert lo == pytest.approx(-1.7123675786697559, rel=1e-12)
    assert up == pytest.approx(1.8095926769614685, rel=1e-12)
    assert scalar_bound(10.0, 5.0, 0.01, 2.0) == pytest.approx(1.8095926769614685, rel=1e-12)


def test_large_threshold_shrinks_bound_by_shared_factor():
    b0 = scalar_bound(0.0, 5.0, 0.01, 2.0)
    b1 = scalar_bound(500.0, 5.0, 0.01, 2.0)
    assert b1 / b0 == pytest.approx(math.exp(-5), rel=1e-12)


@given(st.floats(0, 100), st.floats(0.1, 100), st.floats(1e-3, 0.1), st.floats(0.5, 5), st.floats(0.01, 5))
def test_upper_monotonicity(v_th, v_max, dt, T, step):
    up = lambda vt, vm, tr: bound_terms(vt, vm, dt, dt, dt, tr)[1]
    base = up(v_th, v_max, T)
    assert up(v_th + step, v_max, T) < base
    if v_max * T < 30:      # beyond this 1 - exp(-v T) rounds to 1
        assert up(v_th, v_max + step, T) > base
    assert up(v_th, v_max, T + step) > base


def test_report_uses_per_index_quantities():
    t = np.array([0.25, 0.75, 1.0, 1.5])
    dt = np.array([0.5, 0.5, 0.25, 0.5])
    sigma = np.array([0.0, 2.0, 1.0, 6.0])
    r = bound_report(RaySampleBatch(t, dt, sigma, far=2.0), v_th=2.0)
    assert (r.m, r.m_prime, r.v_max) == (1, 3, 6.0)
    assert (r.dt_m, r.dt_m1, r.dt_mp, r.t_range) == (0.5, 0.25, 0.5, 2.0)
    lo, up = bound_terms(2.0, 6.0, 0.5, 0.25, 0.5, 2.0)
    assert (r.lower, r.upper) == (lo, up)
    assert r.d_extracted == 0.75 and not r.degenerate
    assert r.abs_bound == max(abs(lo), abs(up)) and r.lower < r.upper


def test_report_degenerate_and_no_surface():
    t, dt = np.array([0.5, 1.5]), np.array([1.0, 1.0])
    r = bound_report(RaySampleBatch(t, dt, np.array([0.0, 3.0]), far=2.0), 3.0)
    assert r.degenerate and r.v_max == 3.0 and r.dt_m1 == 0.5
    # silent successors: V_max is their maximum, 0, and the inequality holds;
    # substituting sigma_m there would break the lower end
    t3, dt3 = np.array([0.5, 1.5, 2.5]), np.ones(3)
    r = bound_report(RaySampleBatch(t3, dt3, np.array([4.0, 0.0, 0.0]), far=3.0), 4.0)
    assert not r.degenerate and r.v_max == 0.0 and r.upper == 0.0 and r.holds
    lo, _ = bound_terms(4.0, 4.0, 1.0, 1.0, 1.0, 3.0)
    assert not lo < r.d_integrated - r.d_extracted
    with pytest.raises(NoSurfaceError):
        bound_report(RaySampleBatch(t, dt, np.zeros(2)), 0.0)


@given(arrays(np.float64, (5, 12), elements=st.sampled_from([0.0, 0.0, 1.0, 5.0, 20.0])))
def test_vectorised_bound_matches_per_ray_report(sigma):
    t, dt = sample_rays(np.zeros(5), np.full(5, 3.0), 12)
    b = bound_rays(t, dt, sigma, 1.0, 3.0)
    for i in range(5):
        if not np.any(sigma[i] > 0):
            assert np.isnan(b["abs_bound"][i])
            continue
        r = bound_report(RaySampleBatch(t[i], dt[i], sigma[i], far=3.0), 1.0)
        assert b["lower"][i] == pytest.approx(r.lower, rel=1e-14)
        assert b["upper"][i] == pytest.approx(r.upper, rel=1e-14)
        assert b["d_int"][i] == pytest.approx(r.d_integrated, rel=1e-14, abs=1e-300)
        assert b["d_ext"][i] == r.d_extracted
        assert bool(b["degenerate"][i]) == r.degenerate


# ---------------------------------------------------------------- images


SPHERE = SceneSpec([Sphere((0, 0, 0), 0.5, 500.0, (1, 0, 0))], background=(1, 1, 1),
                   bounds=((-3, -3, -3), (3, 3, 3)))


def scene_field(scene):
    return lambda x, d: eval_scene(scene, x, clip=True)


def test_empty_field_is_all_background():
    cam = Camera([0, 0, 2], [0, 0, 0], up=[0, 1, 0], width=4, height=3)
    res = render_image(cam, lambda x, d: (np.zeros(len(x)), np.zeros((len(x), 3))), RenderSettings(8))
    assert res.background_mask.all() and res.depth_extracted.shape == (3, 4)
    np.testing.assert_allclose(res.rgb, 1.0)


@pytest.mark.parametrize("n", [32, 64, 128])
def test_sphere_centre_pixel_depth(n):
    cam = Camera([0, 0, 2], [0, 0, 0], up=[0, 1, 0], width=5, height=5, near=0.5, far=3.0)
    res = render_image(cam, scene_field(SPHERE), RenderSettings(n, chunk=7))
    dt = 2.5 / n
    assert abs(res.depth_extracted[2, 2] - 1.5) <= dt
    assert res.background_mask[0, 0]


def test_doubling_samples_does_not_increase_depth_error():
    cam = Camera([0, 0, 2], [0, 0, 0], up=[0, 1, 0], width=9, height=9, near=0.5, far=3.0)
    from spikenerf.scenes import gt_depth_rays

    o, d = cam.rays()
    gt = gt_depth_rays(SPHERE, o, d, cam.near, cam.far).reshape(9, 9)
    hit = ~np.isnan(gt)
    errs = []
    for n in (32, 64, 128, 256):
        res = render_image(cam, scene_field(SPHERE), RenderSettings(n))
        assert np.array_equal(hit, ~res.background_mask)
        errs.append(np.abs(res.depth_extracted - gt)[hit].max())
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_workers_and_chunks_do_not_change_the_image():
    cam = Camera([0, 0, 2], [0, 0, 0], up=[0, 1, 0], width=6, height=5)
    a = render_image(cam, scene_field(SPHERE), RenderSettings(16, chunk=30, workers=1))
    b = render_image(cam, scene_field(SPHERE), RenderSettings(16, chunk=7, workers=3))
    assert a.rgb.tobytes() == b.rgb.tobytes()
    assert a.depth_integrated.tobytes() == b.depth_integrated.tobytes()


def test_camera_contracts_and_centre_ray():
    with pytest.raises(ContractViolation):
        Camera([0, 0, 0], [0, 0, 0])
    with pytest.raises(ContractViolation):
        Camera([0, 0, 1], [0, 0, 0], fov_deg=180)
    cam = Camera([0, 0, 2], [0, 0, 0], width=3, height=3)   # up parallel to view: basis falls back
    o, d = cam.rays()
    np.testing.assert_allclose(d[4], [0, 0, -1], atol=1e-15)
    assert Camera.from_dict(cam.to_dict()).to_dict() == cam.to_dict()
