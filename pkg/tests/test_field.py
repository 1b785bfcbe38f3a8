import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st

from bhtomo import field as fld
from bhtomo.field import (Mlp4dEmission, MlpEmission, PositionalEncoding,
                          VoxelEmission, eval_at_time, grad_params,
                          init_mlp_params, load_checkpoint, save_checkpoint,
                          scale_for_extent)
from bhtomo.geometry import GridSpec


def test_encoding_zero_input():
    enc = PositionalEncoding(degree=3, input_scale=np.pi / 10.0, dims=3)
    out = enc(np.zeros(3))
    assert out.shape == (1, 18)
    np.testing.assert_array_equal(out[0], np.tile([0.0, 1.0], 9))


def test_encoding_shape_and_frequencies():
    enc = PositionalEncoding(degree=4, input_scale=1.0, dims=2)
    assert enc.out_dim == 16
    v = np.array([[0.3, -0.7]])
    out = enc(v)[0]
    # first sin block is the base frequency, later blocks double it
    assert out[0] == pytest.approx(np.sin(0.3))
    assert out[4] == pytest.approx(np.sin(0.6))
    assert out[8] == pytest.approx(np.sin(1.2))


def test_encoding_gradient_matches_fd(rng):
    enc = PositionalEncoding(degree=3, input_scale=np.pi / 10.0, dims=3)
    v = rng.normal(0, 4, (5, 3))
    _, grad = enc.with_grad(v)
    eps = 1e-7
    for j in range(3):
        vp, vm = v.copy(), v.copy()
        vp[:, j] += eps
        vm[:, j] -= eps
        fd = (enc(vp) - enc(vm)) / (2 * eps)
        np.testing.assert_allclose(grad[:, j, :], fd, atol=1e-8)


def _scripted_mlp(params, enc, x):
    """Plain-loop reference forward pass."""
    h = enc(x)
    n_layers = len(params) // 2 - 1
    for i in range(n_layers):
        h = np.maximum(h @ params[2 * i] + params[2 * i + 1], 0.0)
    z = (h @ params[-2] + params[-1])[:, 0]
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)  # softplus


def test_mlp_matches_scripted_oracle(rng):
    f = MlpEmission(half_extent=10.0, seed=4)
    x = rng.normal(0, 5, (40, 3))
    expected = _scripted_mlp(f.params, f.encoding, x)
    np.testing.assert_allclose(f.eval_canonical(x), expected, rtol=1e-12)


def test_mlp_output_nonnegative(rng):
    f = MlpEmission(half_extent=10.0, seed=1)
    x = rng.normal(0, 6, (200, 3))
    assert np.all(f.eval_canonical(x) >= 0.0)


@hsettings(deadline=None, max_examples=25)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_mlp_nonnegative_property(param_seed, point_seed):
    params = init_mlp_params(18, param_seed, hidden=16, layers=2)
    f = MlpEmission(half_extent=10.0, params=params)
    pts = np.random.default_rng(point_seed).uniform(-10, 10, (50, 3))
    assert np.all(f.eval_canonical(pts) >= 0.0)


def test_mlp_param_gradients_match_fd(rng):
    params = init_mlp_params(18, 3, hidden=8, layers=2)
    f = MlpEmission(half_extent=10.0, params=params)
    x = rng.normal(0, 5, (12, 3))
    w = rng.normal(size=12)
    grads = grad_params(f, x, w)
    eps = 1e-6
    for pi in (0, 1, 4, 5):
        p = f.params[pi]
        flat_idx = [0, p.size // 2, p.size - 1]
        for k in flat_idx:
            orig = p.flat[k]
            p.flat[k] = orig + eps
            lp = np.dot(w, f.eval_canonical(x))
            p.flat[k] = orig - eps
            lm = np.dot(w, f.eval_canonical(x))
            p.flat[k] = orig
            fd = (lp - lm) / (2 * eps)
            assert grads[pi].flat[k] == pytest.approx(fd, rel=1e-5,
                                                      abs=1e-9)


def test_mlp4d_time_dependence():
    f = Mlp4dEmission(half_extent=10.0, duration=50.0, seed=2)
    x = np.array([[4.0, 1.0, 0.0]])
    v0 = f.eval_spacetime(0.0, x)
    v1 = f.eval_spacetime(25.0, x)
    assert v0[0] != v1[0]
    assert not f.uses_flow


def test_voxel_exact_at_centers(rng):
    grid = GridSpec(8, 8.0)
    vals = rng.uniform(0, 2, (8, 8, 8))
    f = VoxelEmission(grid, values=vals)
    pts = grid.center_points()
    np.testing.assert_allclose(f.eval_canonical(pts),
                               vals.reshape(-1), rtol=1e-13)


def test_voxel_reproduces_affine_functions(rng):
    # trilinear interpolation is exact for multilinear fields
    grid = GridSpec(10, 10.0)
    pts = grid.center_points()
    coef = np.array([0.3, -0.2, 0.15])
    vals = (10.0 + pts @ coef).reshape(10, 10, 10)
    f = VoxelEmission(grid, values=vals)
    q = rng.uniform(-8.0, 8.0, (50, 3))
    np.testing.assert_allclose(f.eval_canonical(q), 10.0 + q @ coef,
                               rtol=1e-12)


def test_voxel_zero_outside_grid():
    grid = GridSpec(4, 4.0)
    f = VoxelEmission(grid, values=np.ones((4, 4, 4)))
    assert f.eval_canonical([10.0, 0.0, 0.0]) == 0.0
    assert f.eval_canonical([0.0, 0.0, -25.0]) == 0.0


def test_voxel_rejects_negative_values():
    grid = GridSpec(4, 4.0)
    vals = np.zeros((4, 4, 4))
    vals[1, 2, 3] = -0.5
    with pytest.raises(ValueError):
        VoxelEmission(grid, values=vals)


def test_voxel_softplus_parameterization_nonnegative(rng):
    grid = GridSpec(6, 6.0)
    f = VoxelEmission(grid, pre_values=rng.normal(0, 3, (6, 6, 6)))
    assert np.all(f.values >= 0.0)
    q = rng.uniform(-6, 6, (100, 3))
    assert np.all(f.eval_canonical(q) >= 0.0)


def test_voxel_gradients_match_fd(rng):
    grid = GridSpec(5, 5.0)
    f = VoxelEmission(grid, pre_values=rng.normal(0, 1, (5, 5, 5)))
    q = rng.uniform(-4, 4, (20, 3))
    w = rng.normal(size=20)
    (grad,) = grad_params(f, q, w)
    eps = 1e-6
    for idx in [(0, 0, 0), (2, 3, 1), (4, 4, 4)]:
        orig = f.pre_values[idx]
        f.pre_values[idx] = orig + eps
        lp = np.dot(w, f.eval_canonical(q))
        f.pre_values[idx] = orig - eps
        lm = np.dot(w, f.eval_canonical(q))
        f.pre_values[idx] = orig
        assert grad[idx] == pytest.approx((lp - lm) / (2 * eps), abs=1e-8)


def test_voxel_input_gradients_match_fd(rng):
    grid = GridSpec(6, 6.0)
    f = VoxelEmission(grid, pre_values=rng.normal(0, 1, (6, 6, 6)))
    # keep queries away from cell boundaries where trilinear kinks live
    q = grid.center_points()[::37][:8] + 0.2
    w = rng.normal(size=q.shape[0])
    _, cache = f.forward(q, need_input_grad=True)
    _, ig = f.backward(cache, w)
    eps = 1e-7
    for j in range(3):
        qp, qm = q.copy(), q.copy()
        qp[:, j] += eps
        qm[:, j] -= eps
        fd = w * (f.eval_canonical(qp) - f.eval_canonical(qm)) / (2 * eps)
        np.testing.assert_allclose(ig[:, j], fd, atol=1e-7)


def test_eval_at_time_flow_vs_direct(tilted_axis, kepler):
    f = MlpEmission(half_extent=10.0, seed=6)
    from bhtomo.dynamics import warp_point
    x = np.array([5.0, 1.0, -2.0])
    direct = f.eval_canonical(warp_point(tilted_axis, kepler, 13.0, x))
    assert eval_at_time(f, tilted_axis, kepler, 13.0, x) == pytest.approx(
        direct, rel=1e-14)


@pytest.mark.parametrize("make", [
    lambda: MlpEmission(half_extent=9.0, seed=7),
    lambda: Mlp4dEmission(half_extent=9.0, duration=33.0, seed=7),
    lambda: VoxelEmission(GridSpec(6, 6.0),
                          pre_values=np.random.default_rng(0).normal(
                              size=(6, 6, 6))),
    lambda: VoxelEmission(GridSpec(6, 6.0),
                          values=np.random.default_rng(0).uniform(
                              0, 1, (6, 6, 6))),
])
def test_checkpoint_roundtrip(make, tmp_path):
    f = make()
    path = tmp_path / "ck.bhck"
    save_checkpoint(path, f, extra={"note": 1})
    g, extra = load_checkpoint(path)
    assert extra == {"note": 1}
    assert g.kind == f.kind
    x = np.random.default_rng(1).uniform(-5, 5, (20, 3))
    if isinstance(f, Mlp4dEmission):
        np.testing.assert_array_equal(g.eval_spacetime(10.0, x),
                                      f.eval_spacetime(10.0, x))
    else:
        np.testing.assert_array_equal(g.eval_canonical(x),
                                      f.eval_canonical(x))


def test_checkpoint_corruption_detected(tmp_path):
    f = MlpEmission(half_extent=10.0, seed=0)
    path = tmp_path / "ck.bhck"
    save_checkpoint(path, f)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_scale_for_extent():
    assert scale_for_extent(10.0) == pytest.approx(np.pi / 10.0)
