import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from bhtomo import render
from bhtomo.dynamics import RotationAxis, warp_point
from bhtomo.field import MlpEmission, VoxelEmission
from bhtomo.geodesics import (IntegratorSettings, build_bundle,
                              euclidean_bundle)
from bhtomo.geometry import GridSpec
from bhtomo.render import (BundleFieldMismatch, export_frame_binary,
                           export_frame_png, grad_render, load_frame_binary,
                           render_frame, render_sequence, render_with_cache,
                           render_backward)
from bhtomo.synth import orbital_period_geometric


class ConstantField:
    """Uniform emission everywhere; no flow coupling."""

    uses_flow = False
    kind = "constant"
    half_extent = np.inf

    def __init__(self, c):
        self.c = c

    def forward(self, t, x):
        return np.full(np.atleast_2d(x).shape[0], self.c), None


class ShellField:
    """Smooth spherical shell, invariant under any rotation."""

    uses_flow = True
    kind = "shell"
    half_extent = np.inf

    def forward(self, x, need_input_grad=False):
        r = np.linalg.norm(np.atleast_2d(x), axis=1)
        return np.exp(-0.5 * (r - 6.0) ** 2), None


def test_constant_field_euclidean_chords(small_camera, small_settings,
                                         tilted_axis, kepler):
    eb = euclidean_bundle(small_camera, small_settings)
    frame = render_frame(eb, ConstantField(2.5), tilted_axis, kepler, 0.0)
    lengths = np.array([w.sum() for w in eb.weights])
    np.testing.assert_allclose(frame.pixels, 2.5 * lengths, atol=1e-10)


def test_linearity(small_bundle, tilted_axis, kepler, rng):
    grid = GridSpec(16, 10.0)
    f1 = VoxelEmission(grid, values=rng.uniform(0, 1, (16, 16, 16)))
    f2 = VoxelEmission(grid, values=rng.uniform(0, 1, (16, 16, 16)))
    comb = VoxelEmission(grid, values=2.0 * f1.values + 0.5 * f2.values)
    t = 11.0
    p1 = render_frame(small_bundle, f1, tilted_axis, kepler, t).pixels
    p2 = render_frame(small_bundle, f2, tilted_axis, kepler, t).pixels
    pc = render_frame(small_bundle, comb, tilted_axis, kepler, t).pixels
    np.testing.assert_allclose(pc, 2.0 * p1 + 0.5 * p2, rtol=1e-10,
                               atol=1e-12)


def test_straight_ray_projector_oracle(small_camera, small_settings,
                                       tilted_axis, kepler, rng):
    # classical parallel-beam projector: trilinear sampling along straight
    # rays via scipy, summed with the same chord weights
    eb = euclidean_bundle(small_camera, small_settings)
    grid = GridSpec(32, 10.0)
    vals = rng.uniform(0, 1, (32, 32, 32))
    f = VoxelEmission(grid, values=vals)
    frame = render_frame(eb, f, tilted_axis, kepler, 0.0)
    expected = np.zeros(eb.n_pixels)
    for i, (pos, wts) in enumerate(zip(eb.positions, eb.weights)):
        if not len(pos):
            continue
        pos = np.asarray(pos)
        inside = np.all(np.abs(pos) <= grid.half_extent, axis=1)
        coords = (pos[inside] + grid.half_extent) / grid.spacing - 0.5
        sampled = map_coordinates(vals, coords.T, order=1,
                                  mode="grid-constant", cval=0.0)
        expected[i] = np.dot(np.asarray(wts)[inside], sampled)
    scale = np.abs(expected).max()
    np.testing.assert_allclose(frame.pixels, expected, atol=1e-6 * scale)


def test_lensed_matches_finer_quadrature(small_camera, tilted_axis, kepler):
    # re-integrating the same geodesics with10x more samples changes a
    # smooth-field rendering by well under a part in a thousand
    coarse = IntegratorSettings(rtol=1e-9, atol=1e-9,
                                max_samples_per_ray=32,
                                region_of_interest=11.0)
    fine = IntegratorSettings(rtol=1e-9, atol=1e-9,
                              max_samples_per_ray=320,
                              region_of_interest=11.0)
    b1 = build_bundle(small_camera, coarse)
    b2 = build_bundle(small_camera, fine)
    f = ShellField()
    t = 21.0
    p1 = render_frame(b1, f, tilted_axis, kepler, t).pixels
    p2 = render_frame(b2, f, tilted_axis, kepler, t).pixels
    scale = p2.max()
    np.testing.assert_allclose(p1, p2, atol=1e-3 * scale)


def test_rotationally_symmetric_field_is_static(small_bundle, tilted_axis,
                                                kepler):
    f = ShellField()
    p0 = render_frame(small_bundle, f, tilted_axis, kepler, 0.0).pixels
    for t in (13.7, 150.0):
        pt = render_frame(small_bundle, f, tilted_axis, kepler, t).pixels
        np.testing.assert_allclose(pt, p0, rtol=1e-10, atol=1e-12)


def test_hotspot_orbit_period_roundtrip(small_bundle, tilted_axis, kepler):
    # emission confined to a thin shell at one radius returns to itself
    # after one orbital period of that radius
    radius = 6.0
    e1, e2 = None, None
    from bhtomo.synth import plane_basis
    e1, e2 = plane_basis(tilted_axis)
    center = radius * e1

    class SpotField:
        uses_flow = True
        kind = "spot"
        half_extent = np.inf

        def forward(self, x, need_input_grad=False):
            d2 = np.sum((np.atleast_2d(x) - center) ** 2, axis=1)
            return np.exp(-d2 / (2.0 * 0.5 ** 2)), None

    f = SpotField()
    period = orbital_period_geometric(radius)
    p0 = render_frame(small_bundle, f, tilted_axis, kepler, 0.0).pixels
    p1 = render_frame(small_bundle, f, tilted_axis, kepler, period).pixels
    phalf = render_frame(small_bundle, f, tilted_axis, kepler,
                         period / 2).pixels
    # differential shear across the spot's width prevents an exact return,
    # but the period frame must be far closer to t = 0 than mid-orbit is
    d_period = np.linalg.norm(p1 - p0)
    d_half = np.linalg.norm(phalf - p0)
    assert d_period < 0.25 * d_half
    assert d_half > 0


def test_gradients_match_fd(small_bundle, tilted_axis, kepler, rng):
    grid = GridSpec(6, 10.0)
    f = VoxelEmission(grid, pre_values=rng.normal(0, 1, (6, 6, 6)))
    up = rng.normal(size=small_bundle.n_pixels)
    t = 7.0
    (grad,), axis_grad = grad_render(small_bundle, f, tilted_axis, kepler,
                                     t, up)
    eps = 1e-6
    for idx in [(2, 2, 3), (3, 1, 4), (0, 5, 2)]:
        orig = f.pre_values[idx]
        f.pre_values[idx] = orig + eps
        lp = np.dot(up, render_frame(small_bundle, f, tilted_axis, kepler,
                                     t).pixels)
        f.pre_values[idx] = orig - eps
        lm = np.dot(up, render_frame(small_bundle, f, tilted_axis, kepler,
                                     t).pixels)
        f.pre_values[idx] = orig
        assert grad[idx] == pytest.approx((lp - lm) / (2 * eps), abs=1e-7)
    raw = np.array(tilted_axis.raw)
    fd_axis = np.zeros(3)
    for j in range(3):
        rp, rm = raw.copy(), raw.copy()
        rp[j] += eps
        rm[j] -= eps
        lp = np.dot(up, render_frame(small_bundle, f, RotationAxis(tuple(rp)),
                                     kepler, t).pixels)
        lm = np.dot(up, render_frame(small_bundle, f, RotationAxis(tuple(rm)),
                                     kepler, t).pixels)
        fd_axis[j] = (lp - lm) / (2 * eps)
    np.testing.assert_allclose(axis_grad, fd_axis, rtol=2e-3, atol=1e-8)


def test_domain_mismatch_rejected(small_camera, tilted_axis, kepler):
    wide = IntegratorSettings(rtol=1e-7, atol=1e-7,
                              region_of_interest=11.0,
                              max_samples_per_ray=16)
    bundle = euclidean_bundle(small_camera, wide)
    f = MlpEmission(half_extent=5.0, seed=0)
    with pytest.raises(BundleFieldMismatch):
        render_frame(bundle, f, tilted_axis, kepler, 0.0)


def test_render_sequence_requires_sorted_times(small_bundle, tilted_axis,
                                               kepler):
    f = ShellField()
    with pytest.raises(ValueError):
        render_sequence(small_bundle, f, tilted_axis, kepler, [5.0, 1.0])


def test_frame_binary_roundtrip(small_bundle, tilted_axis, kepler, tmp_path):
    f = ShellField()
    frame = render_frame(small_bundle, f, tilted_axis, kepler, 3.0)
    path = tmp_path / "frame.bin"
    export_frame_binary(frame, path)
    ts, pixels = load_frame_binary(path)
    assert ts == 3.0
    np.testing.assert_array_equal(pixels, frame.pixels)


def test_frame_png_export(small_bundle, tilted_axis, kepler, tmp_path):
    from PIL import Image
    f = ShellField()
    frame = render_frame(small_bundle, f, tilted_axis, kepler, 3.0)
    path = tmp_path / "frame.png"
    export_frame_png(frame, path)
    img = Image.open(path)
    assert img.size == (8, 8)


def test_backward_context_reuse(small_bundle, tilted_axis, kepler, rng):
    grid = GridSpec(6, 10.0)
    f = VoxelEmission(grid, pre_values=rng.normal(0, 1, (6, 6, 6)))
    frame, ctx = render_with_cache(small_bundle, f, tilted_axis, kepler, 9.0)
    up1 = rng.normal(size=small_bundle.n_pixels)
    up2 = rng.normal(size=small_bundle.n_pixels)
    (g1,), _ = render_backward(f, ctx, up1)
    (g2,), _ = render_backward(f, ctx, up2)
    (gsum,), _ = render_backward(f, ctx, up1 + up2)
    np.testing.assert_allclose(gsum, g1 + g2, rtol=1e-11, atol=1e-13)
