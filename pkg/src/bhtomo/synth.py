"""Ground-truth generation: orbiting Gaussian hotspots and voxel volumes.

Hotspots are isotropic 3D Gaussians placed on the equatorial plane of the
true rotation axis at a configured orbital radius.  Spots that flared
before t = 0 enter the canonical field pre-sheared by the flow for the
elapsed time, so rendering at later times continues their history
seamlessly.  Arbitrary external volumes are ingested through a small
versioned binary format.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .dynamics import RotationAxis, VelocityProfile, warp_point
from .field import VoxelEmission
from .geometry import GridSpec

VOLUME_MAGIC = b"BHVL"
VOLUME_VERSION = 1


class ParseError(ValueError):
    pass


class BadHeader(ValueError):
    pass


class NegativeEmission(ValueError):
    pass


@dataclass(frozen=True)
class HotspotSpec:
    center: tuple        # r_g units, equatorial plane of the true axis
    std: float
    amplitude: float = 1.0
    flare_time: float = 0.0

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("std must be > 0")
        if np.linalg.norm(self.center) <= 2.0:
            raise ValueError("hotspot center inside the horizon")


class AnalyticHotspotField:
    """Closed-form canonical emission of a set of (possibly sheared) spots."""

    uses_flow = True
    kind = "analytic-hotspots"
    half_extent = np.inf     # defined everywhere; renderer masks by bundle

    def forward(self, y, need_input_grad=False):
        return self(np.atleast_2d(np.asarray(y, dtype=float))), None

    def __init__(self, spots, axis: RotationAxis, profile: VelocityProfile):
        self.spots = list(spots)
        self.axis = axis
        self.profile = profile

    def __call__(self, x):
        xs = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(xs.shape[0])
        for spot in self.spots:
            q = xs
            if spot.flare_time != 0.0:
                # advect the query back to the spot's flare time
                q = warp_point(self.axis, self.profile, -spot.flare_time, xs)
            d2 = np.sum((q - np.array(spot.center))**2, axis=1)
            out += spot.amplitude * np.exp(-d2 / (2.0 * spot.std**2))
        return out if np.asarray(x).ndim > 1 else float(out[0])


def plane_basis(axis: RotationAxis):
    """Two orthonormal vectors spanning the plane perpendicular to the axis."""
    u = axis.unit
    helper = np.array([1.0, 0.0, 0.0])
    if abs(u[0]) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


def make_hotspots(count: int, true_axis: RotationAxis, orbit_radius: float,
                  std: float, seed: int, amplitude: float = 1.0,
                  flare_times=None, radial_jitter: float = 0.0,
                  profile: VelocityProfile = VelocityProfile()):
    """Randomly azimuthed spots on the equatorial orbit.

    Returns (specs, analytic canonical field).  ``radial_jitter`` optionally
    perturbs each radius uniformly by the given relative fraction.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    e1, e2 = plane_basis(true_axis)
    if flare_times is None:
        flare_times = [0.0] * count
    specs = []
    for k in range(count):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        radius = orbit_radius
        if radial_jitter > 0:
            radius *= 1.0 + rng.uniform(-radial_jitter, radial_jitter)
        c = radius * (np.cos(theta) * e1 + np.sin(theta) * e2)
        specs.append(HotspotSpec(center=tuple(c), std=std,
                                 amplitude=amplitude,
                                 flare_time=float(flare_times[k])))
    return specs, AnalyticHotspotField(specs, true_axis, profile)


def rasterize(field_fn, grid: GridSpec) -> VoxelEmission:
    """Sample an analytic field at voxel centers."""
    pts = grid.center_points()
    vals = np.empty(pts.shape[0])
    chunk = 1 << 16
    for lo in range(0, pts.shape[0], chunk):
        vals[lo:lo + chunk] = field_fn(pts[lo:lo + chunk])
    n = grid.resolution
    return VoxelEmission(grid, values=vals.reshape(n, n, n))


def save_volume(path, volume: VoxelEmission, provenance=None):
    """Write the BHVL binary plus a JSON provenance sidecar."""
    g = volume.grid
    vals = np.ascontiguousarray(volume.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<IId", VOLUME_VERSION, g.resolution,
                             g.half_extent))
        fh.write(vals.tobytes())
    side = {"resolution": g.resolution, "half_extent": g.half_extent,
            "sha256": hashlib.sha256(vals.tobytes()).hexdigest()}
    if provenance:
        side["provenance"] = provenance
    with open(str(path) + ".json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_volume(path) -> VoxelEmission:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != VOLUME_MAGIC:
        raise ParseError("not a volume file")
    version, resolution, half_extent = struct.unpack("<IId", blob[4:20])
    if version != VOLUME_VERSION:
        raise BadHeader(f"unsupported volume version {version}")
    if resolution < 2 or not np.isfinite(half_extent) or half_extent <= 0:
        raise BadHeader("invalid grid header")
    expected = 20 + 8 * resolution**3
    if len(blob) != expected:
        raise BadHeader(f"payload size {len(blob) - 20} does not match "
                        f"resolution {resolution}")
    vals = np.frombuffer(blob[20:], dtype="<f8").copy()
    if not np.all(np.isfinite(vals)):
        raise ParseError("non-finite voxel values")
    if np.any(vals < 0):
        raise NegativeEmission("volume contains negative emission")
    grid = GridSpec(resolution, half_extent)
    return VoxelEmission(grid, values=vals.reshape((resolution,) * 3))


def orbital_period_geometric(orbit_radius: float) -> float:
    """One full orbit at the given radius, in geometric time units."""
    return 2.0 * np.pi * orbit_radius ** 1.5


def frame_times_geometric(n_frames: int, duration_geo: float) -> np.ndarray:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if duration_geo <= 0:
        raise ValueError("duration must be > 0")
    if n_frames == 1:
        return np.array([0.0])
    return np.linspace(0.0, duration_geo, n_frames)


def make_dataset(truth_field, true_axis: RotationAxis,
                 profile: VelocityProfile, bundle, n_frames: int,
                 duration_geo: float, mode: str = "image",
                 uv_frames=None, pixel_scale: float = 0.0,
                 noise_seed=None):
    """Synthesize an observation set from a ground-truth field.

    ``mode`` is "image" (dense pixel measurements) or "uv" (the provided
    uv_frames must carry matching geometric times).  Returns
    (ObservationSet, ground-truth record dict).
    """
    from . import instrument
    t_geo = frame_times_geometric(n_frames, duration_geo)
    if mode == "image":
        obs = instrument.image_domain_observe(truth_field, true_axis,
                                              profile, bundle, t_geo)
    elif mode == "uv":
        if uv_frames is None or len(uv_frames) != n_frames:
            raise ValueError("uv mode needs one UvFrame per requested frame")
        obs = instrument.observe(truth_field, true_axis, profile, bundle,
                                 uv_frames, pixel_scale,
                                 noise_seed=noise_seed)
    else:
        raise ValueError(f"unknown dataset mode {mode!r}")
    record = {
        "mode": mode,
        "n_frames": int(n_frames),
        "duration_geo": float(duration_geo),
        "true_axis_raw": list(true_axis.raw),
        "profile": {"kind": profile.kind, "magnitude": profile.magnitude,
                    "corr_length": profile.corr_length, "seed": profile.seed},
        "noise_seed": noise_seed,
        "bundle_hash": bundle.content_hash,
        "pixel_scale": pixel_scale,
    }
    return obs, record
