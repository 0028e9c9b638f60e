"""Triplane feature field and canonical generator."""

import numpy as np
import pytest

from splatface.camera import CameraModel, look_at
from splatface.gradcheck import grad_check
from splatface.rasterizer import rasterize, rasterize_arrays
from splatface.tensor import Tensor
from splatface.triplane import (CanonicalGenerator, init_canonical, make_triplane,
                                nearest_neighbor_distances, sample_triplane)

from conftest import random_splat_arrays


def _unit_stack(rng=None, resolutions=(4, 8), channels=2, dtype=np.float64):
    rng = rng or np.random.default_rng(0)
    stack = make_triplane([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], resolutions,
                          channels, rng=rng, dtype=dtype)
    return stack


# -- init_canonical --------------------------------------------------------------

def test_init_canonical_scale_from_mean_nn_distance():
    # 3 collinear points spaced 1 apart: NN distances are (1, 1, 1) -> mean 1
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    seed, _ = init_canonical(pts)
    np.testing.assert_allclose(seed.s, np.log(1.0), atol=1e-7)
    np.testing.assert_array_equal(seed.q, np.tile([1, 0, 0, 0], (3, 1)))
    np.testing.assert_array_equal(seed.alpha_raw, np.zeros(3))
    np.testing.assert_array_equal(seed.sh, np.zeros((3, 12)))


def test_init_canonical_single_point_fallback_scale():
    seed, _ = init_canonical(np.array([[0.2, 0.3, 0.4]]))
    np.testing.assert_allclose(seed.s, np.log(0.1), atol=1e-7)


def test_init_canonical_bbox_inflated_unit_cube():
    pts = np.array([[0.0, 0, 0], [1.0, 1, 1]])
    _, stack = init_canonical(pts, bbox_inflate=0.1)
    np.testing.assert_allclose(stack.bbox_lo, [-0.1, -0.1, -0.1], atol=1e-12)
    np.testing.assert_allclose(stack.bbox_hi, [1.1, 1.1, 1.1], atol=1e-12)


def test_init_canonical_rejects_bad_points():
    with pytest.raises(ValueError, match=r"\(N, 3\)"):
        init_canonical(np.zeros((0, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        init_canonical(np.array([[0.0, np.nan, 0.0]]))


def test_nearest_neighbor_distances_hand_case():
    pts = np.array([[0.0, 0, 0], [3.0, 0, 0], [3.0, 4.0, 0]])
    np.testing.assert_allclose(nearest_neighbor_distances(pts), [3.0, 3.0, 4.0])


# -- bilinear sampling -----------------------------------------------------------

def test_sample_at_grid_nodes_matches_stored_features():
    stack = _unit_stack(resolutions=(4,), channels=3)
    r = 4
    # point exactly on node (i, j, k) of the normalized grid
    i, j, k = 1, 2, 3
    mu = Tensor(np.array([[i / (r - 1), j / (r - 1), k / (r - 1)]]))
    feat = sample_triplane(stack, mu).data[0]
    lvl = stack.planes[0]
    expect = lvl["xy"].data[i, j] + lvl["yz"].data[j, k] + lvl["xz"].data[i, k]
    np.testing.assert_allclose(feat, expect, atol=1e-12)


def test_sample_at_cell_midpoint_averages_corners():
    stack = _unit_stack(resolutions=(3,), channels=2)
    # midpoint of cell (0,0) in every plane: u = v = 0.5 on a 3-node grid
    mu = Tensor(np.array([[0.25, 0.25, 0.25]]))
    feat = sample_triplane(stack, mu).data[0]
    expect = np.zeros(2)
    for name in ("xy", "yz", "xz"):
        p = stack.planes[0][name].data
        expect += 0.25 * (p[0, 0] + p[1, 0] + p[0, 1] + p[1, 1])
    np.testing.assert_allclose(feat, expect, atol=1e-12)


def test_sample_matches_loop_oracle():
    rng = np.random.default_rng(5)
    stack = _unit_stack(rng, resolutions=(4, 8), channels=2)
    pts = rng.uniform(0.0, 1.0, (20, 3))
    got = sample_triplane(stack, Tensor(pts)).data

    def bilinear(plane, u, v):
        r = plane.shape[0]
        i0 = min(int(np.floor(u)), r - 2)
        j0 = min(int(np.floor(v)), r - 2)
        fu, fv = u - i0, v - j0
        return ((1 - fu) * (1 - fv) * plane[i0, j0]
                + fu * (1 - fv) * plane[i0 + 1, j0]
                + (1 - fu) * fv * plane[i0, j0 + 1]
                + fu * fv * plane[i0 + 1, j0 + 1])

    axes = {"xy": (0, 1), "yz": (1, 2), "xz": (0, 2)}
    for n, p in enumerate(pts):
        feat = []
        for lvl in stack.planes:
            r = lvl["xy"].shape[0]
            acc = np.zeros(2)
            for name, (ua, va) in axes.items():
                acc += bilinear(lvl[name].data, p[ua] * (r - 1), p[va] * (r - 1))
            feat.append(acc)
        np.testing.assert_allclose(got[n], np.concatenate(feat), atol=1e-10)


def test_sample_outside_bbox_clamps_to_surface():
    stack = _unit_stack(resolutions=(4,), channels=2)
    inside = sample_triplane(stack, Tensor(np.array([[1.0, 0.5, 0.5]]))).data
    outside = sample_triplane(stack, Tensor(np.array([[7.0, 0.5, 0.5]]))).data
    np.testing.assert_array_equal(inside, outside)


def test_sample_continuity_across_cell_boundary():
    stack = _unit_stack(resolutions=(5,), channels=3)
    # node u=1/(r-1)=0.25 is a cell boundary; features must be continuous there
    base = np.array([0.25, 0.4, 0.6])
    f0 = sample_triplane(stack, Tensor(base[None])).data
    for delta in (1e-3, 1e-5, 1e-7):
        fp = sample_triplane(stack, Tensor((base + [delta, 0, 0])[None])).data
        fm = sample_triplane(stack, Tensor((base - [delta, 0, 0])[None])).data
        assert np.abs(fp - f0).max() < 10 * delta + 1e-12
        assert np.abs(fm - f0).max() < 10 * delta + 1e-12


# -- gradients -------------------------------------------------------------------

def test_plane_gradients_finite_difference():
    rng = np.random.default_rng(6)
    stack = _unit_stack(rng, resolutions=(3, 6), channels=2)
    pts = rng.uniform(0.05, 0.95, (6, 3))
    coef = rng.normal(size=(6, 4))

    def loss():
        f = sample_triplane(stack, Tensor(pts))
        return (f * Tensor(coef)).sum()

    report = grad_check(loss, stack.parameters(), rng=rng)
    assert report.passed, report


def test_position_gradients_finite_difference():
    rng = np.random.default_rng(7)
    stack = _unit_stack(rng, resolutions=(3, 6), channels=2)
    mu = Tensor(rng.uniform(0.1, 0.9, (5, 3)), requires_grad=True)
    coef = rng.normal(size=(5, 4))
    report = grad_check(lambda: (sample_triplane(stack, mu) * Tensor(coef)).sum(),
                        [mu], rng=rng)
    assert report.passed, report


# -- canonical generator ---------------------------------------------------------

def _front_camera():
    w = look_at(eye=(0.0, 0.0, 2.0), target=(0.0, 0.0, 0.0))
    return CameraModel(w, fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32)


def test_fresh_generator_renders_seed_exactly():
    rng = np.random.default_rng(8)
    mu, s, q, sh, alpha_raw = random_splat_arrays(rng, 30, depth=0.0)
    seed, stack = init_canonical(mu, resolutions=(4, 8), channels=4, rng=rng)
    seed.s[:] = s
    seed.q[:] = q
    seed.sh[:] = sh
    seed.alpha_raw[:] = alpha_raw
    gen = CanonicalGenerator(seed, stack, decoder_hidden=(16,), rng=rng)
    canonical, f_p = gen.forward()
    assert f_p.shape == (30, stack.feature_width)

    cam = _front_camera()
    img_seed = rasterize(seed, cam).color
    img_canon = rasterize_arrays(canonical.mu.data.astype(np.float64),
                                 canonical.s.data.astype(np.float64),
                                 canonical.q.data.astype(np.float64),
                                 canonical.sh.data.astype(np.float64),
                                 canonical.alpha_raw.data.astype(np.float64),
                                 seed.k, cam, (0.0, 0.0, 0.0))[0].color
    assert np.abs(img_seed - img_canon).max() <= 1e-6


def test_generator_output_width_tracks_sh_degree():
    rng = np.random.default_rng(9)
    pts = rng.uniform(-0.3, 0.3, (10, 3))
    seed, stack = init_canonical(pts, k=2, resolutions=(4,), channels=4, rng=rng)
    gen = CanonicalGenerator(seed, stack, decoder_hidden=(8,), rng=rng)
    canonical, _ = gen.forward()
    assert canonical.sh.shape == (10, 27)
    assert canonical.mu.shape == (10, 3)
    assert canonical.q.shape == (10, 4)
    np.testing.assert_allclose(np.linalg.norm(canonical.q.data, axis=1),
                               np.ones(10), atol=1e-6)


def test_generator_end_to_end_gradients():
    rng = np.random.default_rng(10)
    pts = rng.uniform(-0.3, 0.3, (5, 3))
    seed, stack = init_canonical(pts, resolutions=(3,), channels=2, rng=rng)
    for p in stack.parameters():
        p.data = p.data.astype(np.float64)
    gen = CanonicalGenerator(seed, stack, decoder_hidden=(6,), rng=rng,
                             dtype=np.float64)
    # non-zero last layer so residuals actually flow
    for p in gen.decoder_params:
        p.data += rng.normal(0, 0.05, p.data.shape)

    def loss():
        canonical, f_p = gen.forward()
        return (canonical.mu.sum() + canonical.s.sum() + canonical.q.sum()
                + canonical.sh.sum() + canonical.alpha_raw.sum() + f_p.sum())

    report = grad_check(loss, gen.parameters(), rng=rng)
    assert report.passed, report


def test_triplane_level_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="strictly increasing"):
        make_triplane([0, 0, 0], [1, 1, 1], resolutions=(8, 4), rng=rng)
