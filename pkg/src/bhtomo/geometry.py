"""Black-hole system scales, geometric units, and grid conventions.

All other modules work in geometric units G = M = c = 1: lengths are in
gravitational radii (r_g = GM/c^2) and times in r_g/c.  Conversion to and
from physical units happens here and nowhere else.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# CODATA 2018 constants; solar mass from the IAU nominal solar mass parameter.
G_SI = 6.67430e-11           # m^3 kg^-1 s^-2
C_SI = 299792458.0           # m / s
GM_SUN_SI = 1.32712442099e20  # m^3 / s^2 (IAU 2015 nominal)
M_SUN_KG = GM_SUN_SI / G_SI

# Schwarzschild marginally-stable (innermost stable circular) orbit, r_g units.
R_MS_SCHWARZSCHILD = 6.0

# Galactic-center distance used for angular-scale conversion (GRAVITY 2019),
# a catalog value editable through the run configuration.
SGRA_DISTANCE_M = 8.178e3 * 3.0856775814913673e16


class InvalidMass(ValueError):
    pass


class NonzeroSpinUnsupported(ValueError):
    pass


@dataclass(frozen=True)
class BlackHoleSystem:
    """Mass and derived scales anchoring all geometry.

    ``r_g`` is in meters; ``r_ms`` is in r_g units.
    """

    mass_solar: float
    spin: float
    r_g: float
    r_ms: float
    distance: float = SGRA_DISTANCE_M

    def length_to_meters(self, length_rg):
        return np.asarray(length_rg) * self.r_g

    def meters_to_length(self, meters):
        return np.asarray(meters) / self.r_g

    def angular_scale(self) -> float:
        """Radians subtended by one r_g at the system distance."""
        return self.r_g / self.distance


@dataclass(frozen=True)
class GridSpec:
    """Uniform cubic voxel grid centered on the black hole.

    The grid spans [-half_extent, +half_extent]^3 in r_g units; voxel 0 is
    centered at -half_extent + spacing/2.
    """

    resolution: int
    half_extent: float = 10.0

    def __post_init__(self):
        if self.resolution < 2:
            raise ValueError(f"resolution must be >= 2, got {self.resolution}")
        if self.half_extent <= 0:
            raise ValueError("half_extent must be > 0")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_extent / self.resolution

    def axis_centers(self) -> np.ndarray:
        n, d = self.resolution, self.spacing
        return -self.half_extent + d * (np.arange(n) + 0.5)

    def center_points(self) -> np.ndarray:
        """All voxel centers, shape (resolution^3, 3), z-fastest ordering
        (matches a C-ordered values array indexed [ix, iy, iz])."""
        c = self.axis_centers()
        xx, yy, zz = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=-1)


def derive_scales(mass_solar: float, spin: float = 0.0,
                  distance: float = SGRA_DISTANCE_M) -> BlackHoleSystem:
    """Build a BlackHoleSystem from mass (solar masses) and spin.

    Only spin = 0 is supported; anything else raises NonzeroSpinUnsupported.
    """
    if not np.isfinite(mass_solar) or mass_solar <= 0:
        raise InvalidMass(f"mass_solar must be positive, got {mass_solar}")
    if spin != 0.0:
        raise NonzeroSpinUnsupported(
            f"spin={spin}: only non-rotating systems are supported")
    r_g = G_SI * mass_solar * M_SUN_KG / C_SI**2
    return BlackHoleSystem(mass_solar=float(mass_solar), spin=0.0,
                           r_g=r_g, r_ms=R_MS_SCHWARZSCHILD,
                           distance=distance)


def time_unit_seconds(sys: BlackHoleSystem) -> float:
    """Seconds per geometric time unit (r_g / c)."""
    return sys.r_g / C_SI
