import numpy as np
import pytest

from bhtomo import geometry


def test_gravitational_radius_sgra():
    # GM/c^2 for 4e6 solar masses, SI constants
    sys = geometry.derive_scales(4.0e6)
    assert sys.r_g == pytest.approx(5.9065002456e9, rel=1e-9)


def test_time_unit():
    sys = geometry.derive_scales(4.0e6)
    assert geometry.time_unit_seconds(sys) == pytest.approx(19.7019641,
                                                            rel=1e-8)
    # r_g / c by definition
    assert geometry.time_unit_seconds(sys) == pytest.approx(
        sys.r_g / geometry.C_SI, rel=1e-14)


def test_angular_scale_sgra():
    # one r_g at 8.178 kpc is a little under 5 microarcseconds
    sys = geometry.derive_scales(4.0e6)
    uas = sys.angular_scale() * 180.0 / np.pi * 3.6e9
    assert uas == pytest.approx(4.8279, rel=1e-4)


def test_innermost_stable_orbit():
    sys = geometry.derive_scales(4.0e6)
    assert sys.r_ms == 6.0


def test_mass_scaling_linear():
    a = geometry.derive_scales(1.0e6)
    b = geometry.derive_scales(2.0e6)
    assert b.r_g == pytest.approx(2.0 * a.r_g, rel=1e-14)


def test_length_conversions_roundtrip():
    sys = geometry.derive_scales(4.0e6)
    assert sys.meters_to_length(sys.length_to_meters(7.3)) == pytest.approx(
        7.3, rel=1e-14)


@pytest.mark.parametrize("bad", [0.0, -1.0, np.nan, np.inf])
def test_invalid_mass(bad):
    with pytest.raises(geometry.InvalidMass):
        geometry.derive_scales(bad)


def test_nonzero_spin_rejected():
    with pytest.raises(geometry.NonzeroSpinUnsupported):
        geometry.derive_scales(4.0e6, spin=0.5)


def test_grid_spacing_and_centers():
    g = geometry.GridSpec(10, 10.0)
    assert g.spacing == 2.0
    c = g.axis_centers()
    assert c[0] == -9.0 and c[-1] == 9.0
    np.testing.assert_allclose(c, -c[::-1], atol=1e-15)


def test_grid_points_z_fastest():
    g = geometry.GridSpec(4, 4.0)
    pts = g.center_points()
    assert pts.shape == (64, 3)
    # consecutive points advance along z first
    np.testing.assert_allclose(pts[1] - pts[0], [0.0, 0.0, g.spacing])
    np.testing.assert_allclose(pts[4] - pts[0], [0.0, g.spacing, 0.0])
    np.testing.assert_allclose(pts[16] - pts[0], [g.spacing, 0.0, 0.0])


def test_grid_validation():
    with pytest.raises(ValueError):
        geometry.GridSpec(1, 10.0)
    with pytest.raises(ValueError):
        geometry.GridSpec(8, -1.0)
