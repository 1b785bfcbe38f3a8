import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st

from bhtomo import dynamics
from bhtomo.dynamics import (RotationAxis, VelocityProfile, omega,
                             omega_derivative, sample_perturbation,
                             warp_point, warp_with_grads)


def test_keplerian_rate_at_hotspot_radius(kepler):
    assert omega(kepler, 6.96) == pytest.approx(0.054461066349, rel=1e-10)


def test_omega_power_law(kepler):
    # quadrupling the radius slows the rotation by a factor of 8
    assert omega(kepler, 4.0) / omega(kepler, 16.0) == pytest.approx(8.0)


def test_omega_derivative_matches_fd(kepler):
    r = np.array([3.0, 5.5, 9.0])
    eps = 1e-6
    fd = (omega(kepler, r + eps) - omega(kepler, r - eps)) / (2 * eps)
    np.testing.assert_allclose(omega_derivative(kepler, r), fd, rtol=1e-8)


def test_radius_inside_horizon(kepler):
    with pytest.raises(dynamics.RadiusInsideHorizon):
        omega(kepler, 1.9)
    with pytest.raises(dynamics.RadiusInsideHorizon):
        warp_point(RotationAxis((0, 0, 1)), kepler, 1.0, [0.5, 0.5, 0.5])


def test_axis_validation():
    with pytest.raises(ValueError):
        RotationAxis((1.0, 2.0))
    with pytest.raises(ValueError):
        RotationAxis((0.0, 0.0, 0.0)).unit


def test_axis_normalization_and_flip():
    ax = RotationAxis((0.0, 0.0, 4.0))
    np.testing.assert_allclose(ax.unit, [0, 0, 1])
    np.testing.assert_allclose(ax.flipped().unit, [0, 0, -1])


def test_warp_zero_time_identity(tilted_axis, kepler, rng):
    x = rng.normal(0, 4, (20, 3))
    x += 3.0 * np.sign(x)  # push outside the horizon
    np.testing.assert_allclose(warp_point(tilted_axis, kepler, 0.0, x), x,
                               atol=1e-14)


def test_warp_preserves_radius_and_axis_component(tilted_axis, kepler, rng):
    x = rng.normal(0, 4, (50, 3))
    x += 3.0 * np.sign(x)
    y = warp_point(tilted_axis, kepler, 17.3, x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1),
                               np.linalg.norm(x, axis=1), rtol=1e-12)
    u = tilted_axis.unit
    np.testing.assert_allclose(y @ u, x @ u, atol=1e-12)


def test_warp_composition(tilted_axis, kepler, rng):
    # rotations about a fixed axis at fixed radius commute and add
    x = rng.normal(0, 4, (30, 3))
    x += 3.0 * np.sign(x)
    y1 = warp_point(tilted_axis, kepler, 5.0, warp_point(tilted_axis, kepler,
                                                         7.5, x))
    y2 = warp_point(tilted_axis, kepler, 12.5, x)
    np.testing.assert_allclose(y1, y2, atol=1e-12)


def test_flipped_axis_reverses_rotation(tilted_axis, kepler, rng):
    x = rng.normal(0, 4, (10, 3))
    x += 3.0 * np.sign(x)
    y1 = warp_point(tilted_axis, kepler, 4.0, x)
    y2 = warp_point(tilted_axis.flipped(), kepler, -4.0, x)
    np.testing.assert_allclose(y1, y2, atol=1e-12)


def test_known_quarter_turn():
    # at r = 1 the rate would be 1; use r = 4 -> omega = 1/8, so t = 4 pi
    # rotates by pi/2 about z
    ax = RotationAxis((0, 0, 1))
    y = warp_point(ax, VelocityProfile(), 4.0 * np.pi, [4.0, 0.0, 0.0])
    np.testing.assert_allclose(y, [0.0, 4.0, 0.0], atol=1e-12)


def test_axis_jacobian_matches_fd(tilted_axis, kepler, rng):
    x = rng.normal(0, 4, (6, 3))
    x += 3.0 * np.sign(x)
    raw = np.array(tilted_axis.raw)
    _, dy_draw, _ = warp_with_grads(tilted_axis, kepler, 9.0, x)
    eps = 1e-7
    for j in range(3):
        rp, rm = raw.copy(), raw.copy()
        rp[j] += eps
        rm[j] -= eps
        fd = (warp_point(RotationAxis(tuple(rp)), kepler, 9.0, x)
              - warp_point(RotationAxis(tuple(rm)), kepler, 9.0, x)) / (2 * eps)
        np.testing.assert_allclose(dy_draw[:, j, :], fd, atol=1e-6)


def test_position_jacobian_matches_fd(tilted_axis, kepler, rng):
    x = rng.normal(0, 4, (6, 3))
    x += 3.0 * np.sign(x)
    _, _, dy_dx = warp_with_grads(tilted_axis, kepler, 9.0, x)
    eps = 1e-7
    for j in range(3):
        xp, xm = x.copy(), x.copy()
        xp[:, j] += eps
        xm[:, j] -= eps
        fd = (warp_point(tilted_axis, kepler, 9.0, xp)
              - warp_point(tilted_axis, kepler, 9.0, xm)) / (2 * eps)
        np.testing.assert_allclose(dy_dx[:, j, :], fd, atol=1e-6)


def test_perturbed_profile_deterministic():
    a = sample_perturbation(0.2, 1.5, seed=11)
    b = sample_perturbation(0.2, 1.5, seed=11)
    np.testing.assert_array_equal(a.grid_g, b.grid_g)
    c = sample_perturbation(0.2, 1.5, seed=12)
    assert not np.array_equal(a.grid_g, c.grid_g)


def test_zero_magnitude_matches_exact(kepler):
    p = sample_perturbation(0.0, 2.0, seed=5)
    r = np.linspace(2.5, 11.0, 40)
    np.testing.assert_array_equal(omega(p, r), omega(kepler, r))


def test_perturbation_statistics():
    # marginal variance ~ 1 and autocorrelation at one correlation length
    # ~ exp(-1/2), estimated over many seeds
    length = 1.5
    r_a, r_b = 6.0, 6.0 + length
    samples = []
    for seed in range(1500):
        p = sample_perturbation(0.3, length, seed=seed)
        samples.append([p.perturbation(r_a), p.perturbation(r_b)])
    samples = np.array(samples)
    var = samples[:, 0].var()
    corr = np.corrcoef(samples[:, 0], samples[:, 1])[0, 1]
    assert var == pytest.approx(1.0, abs=0.1)
    assert corr == pytest.approx(np.exp(-0.5), abs=0.05)


def test_perturbation_validation():
    with pytest.raises(ValueError):
        sample_perturbation(-0.1, 1.0, 0)
    with pytest.raises(ValueError):
        sample_perturbation(0.1, 0.0, 0)


def test_profile_csv_roundtrip(tmp_path):
    p = sample_perturbation(0.2, 1.0, seed=3)
    path = tmp_path / "profile.csv"
    p.to_csv(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_allclose(data[:, 0], p.grid_r)
    np.testing.assert_allclose(data[:, 1], p.grid_g)


@hsettings(deadline=None, max_examples=40)
@given(st.floats(2.2, 11.0), st.floats(-100.0, 100.0),
       st.integers(0, 1000))
def test_warp_radius_invariant_property(r, t, seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    x = r * d
    ax = RotationAxis(tuple(rng.normal(size=3) + 2.0))
    y = warp_point(ax, VelocityProfile(), t, x)
    assert np.linalg.norm(y) == pytest.approx(r, rel=1e-10)
