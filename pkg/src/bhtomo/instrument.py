"""Interferometric measurement simulation and the data-fidelity loss.

Earth-rotation baseline projection produces per-time uv coverage for a
station catalog; model visibilities are a direct (non-gridded) DTFT of the
rendered image; thermal noise follows the radiometer equation from station
SEFDs.  The chi-squared loss weights complex residuals by per-baseline
noise variances.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

EARTH_RADIUS_M = 6.371e6
DEFAULT_WAVELENGTH_M = 0.0013  # 230 GHz
MIN_ELEVATION_DEG = 15.0


class NoVisibleBaselines(RuntimeError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Station:
    name: str
    x: float
    y: float
    z: float
    sefd: float

    @property
    def position(self):
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class ArrayCatalog:
    """Telescope array: ECEF station positions (m) and SEFDs (Jy)."""

    stations: tuple
    bandwidth_hz: float = 2e9
    integration_s: float = 10.0

    def __post_init__(self):
        if len(self.stations) < 2:
            raise ValueError("catalog needs at least 2 stations")
        for st in self.stations:
            if st.sefd <= 0:
                raise ValueError(f"station {st.name}: SEFD must be > 0")
            if np.linalg.norm(st.position) > 1.05 * EARTH_RADIUS_M:
                raise ValueError(f"station {st.name}: not on Earth")

    @staticmethod
    def from_csv(path, bandwidth_hz=2e9, integration_s=10.0) -> "ArrayCatalog":
        stations = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                stations.append(Station(row["name"], float(row["x_m"]),
                                        float(row["y_m"]), float(row["z_m"]),
                                        float(row["sefd_jy"])))
        return ArrayCatalog(tuple(stations), bandwidth_hz, integration_s)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "x_m", "y_m", "z_m", "sefd_jy"])
            for st in self.stations:
                w.writerow([st.name, st.x, st.y, st.z, st.sefd])


@dataclass
class UvFrame:
    """Sampled spatial frequencies at one observation time."""

    timestamp: str            # UTC ISO string ("" for image-domain frames)
    t_geo: float              # geometric render time
    pairs: list               # (station_i_name, station_j_name)
    u: np.ndarray             # wavelengths
    v: np.ndarray
    sigma: np.ndarray         # per-baseline noise std, visibility units

    def conjugated(self):
        """The (-u, -v) mirror points (visibility conjugate symmetry)."""
        return -self.u, -self.v


@dataclass
class ObservationSet:
    """Measurements plus everything needed to re-evaluate the model."""

    kind: str                 # "uv" | "image"
    frames: list              # UvFrame per time (kind == "uv")
    visibilities: list        # complex array per frame (or real pixels)
    t_geo: np.ndarray
    pixel_scale: float = 0.0  # radians per pixel (uv mode)
    noise_seed: int | None = None

    @property
    def n_measurements(self) -> int:
        return int(sum(len(v) for v in self.visibilities))


def gmst_hours(utc: datetime) -> float:
    """Greenwich mean sidereal time, adequate for coverage synthesis."""
    if utc.tzinfo is None:
        utc = utc.replace(tzinfo=timezone.utc)
    j2000 = datetime(2000, 1, 1, 12, tzinfo=timezone.utc)
    days = (utc - j2000).total_seconds() / 86400.0
    return (18.697374558 + 24.06570982441908 * days) % 24.0


def _parse_utc(ts) -> datetime:
    if isinstance(ts, datetime):
        return ts
    return datetime.fromisoformat(str(ts).replace("Z", "+00:00"))


def utc_ramp(start_utc, t_geo, system):
    """UTC timestamps for a ramp of geometric times anchored at start_utc."""
    from .geometry import time_unit_seconds
    start = _parse_utc(start_utc)
    unit = time_unit_seconds(system)
    return [(start + timedelta(seconds=float(t) * unit)).isoformat()
            for t in np.asarray(t_geo, dtype=float)]


def project_baselines(catalog: ArrayCatalog, source_ra_hours: float,
                      source_dec_deg: float, timestamps,
                      wavelength_m: float = DEFAULT_WAVELENGTH_M,
                      min_elevation_deg: float = MIN_ELEVATION_DEG,
                      t_geo=None) -> list:
    """Per-timestamp uv coverage with mutual-visibility masking.

    Baselines are projected onto the plane perpendicular to the source
    direction; a pair is kept only while both stations see the source above
    the elevation cut.  sigma follows the radiometer equation.
    """
    if abs(source_dec_deg) > 90:
        raise ValueError("declination out of range")
    dec = np.radians(source_dec_deg)
    sd, cd = np.sin(dec), np.cos(dec)
    if t_geo is None:
        t_geo = np.zeros(len(timestamps))
    frames = []
    for ts, tg in zip(timestamps, t_geo):
        utc = _parse_utc(ts)
        gst = gmst_hours(utc)
        # Greenwich hour angle of the source
        hg = np.radians((gst - source_ra_hours) * 15.0)
        up = []
        for st in catalog.stations:
            lat = np.arcsin(st.z / np.linalg.norm(st.position))
            lon = np.arctan2(st.y, st.x)
            local_ha = hg + lon
            sin_el = (np.sin(lat) * sd + np.cos(lat) * cd * np.cos(local_ha))
            up.append(sin_el >= np.sin(np.radians(min_elevation_deg)))
        pairs, us, vs, sig = [], [], [], []
        ns = len(catalog.stations)
        for i in range(ns):
            for j in range(i + 1, ns):
                if not (up[i] and up[j]):
                    continue
                si, sj = catalog.stations[i], catalog.stations[j]
                b = si.position - sj.position
                u = (np.sin(hg) * b[0] + np.cos(hg) * b[1]) / wavelength_m
                v = (-sd * np.cos(hg) * b[0] + sd * np.sin(hg) * b[1]
                     + cd * b[2]) / wavelength_m
                pairs.append((si.name, sj.name))
                us.append(u)
                vs.append(v)
                sig.append(np.sqrt(si.sefd * sj.sefd
                                   / (2.0 * catalog.bandwidth_hz
                                      * catalog.integration_s)))
        if not pairs:
            raise NoVisibleBaselines(f"no mutually visible baselines at {ts}")
        frames.append(UvFrame(timestamp=utc.isoformat(), t_geo=float(tg),
                              pairs=pairs, u=np.array(us), v=np.array(vs),
                              sigma=np.array(sig)))
    return frames


def pixel_angles(camera, pixel_scale: float):
    """Angular pixel-center offsets (alpha, beta) in radians."""
    alpha, beta = camera.pixel_offsets()
    pitch = 2.0 * camera.field_half_width / camera.image_pixels
    return alpha / pitch * pixel_scale, beta / pitch * pixel_scale


def dtft_matrix(u, v, alpha, beta) -> np.ndarray:
    """DTFT rows for frequencies (u, v) at pixel angles (alpha, beta)."""
    phase = -2j * np.pi * (np.outer(u, alpha) + np.outer(v, beta))
    return np.exp(phase)


def dtft(pixels, uv: UvFrame, camera, pixel_scale: float) -> np.ndarray:
    """Complex visibilities V(u, v) = sum_p I_p exp(-2 pi i (u a_p + v b_p))."""
    alpha, beta = pixel_angles(camera, pixel_scale)
    if len(pixels) != len(alpha):
        raise ShapeMismatch("pixel vector does not match camera")
    return dtft_matrix(uv.u, uv.v, alpha, beta) @ pixels


def default_pixel_scale(system, camera) -> float:
    """Radians per pixel from the system's angular scale and camera field."""
    pitch_rg = 2.0 * camera.field_half_width / camera.image_pixels
    return pitch_rg * system.angular_scale()


def _noise_rng(master_seed, frame_index):
    return np.random.default_rng(np.random.SeedSequence(
        entropy=master_seed, spawn_key=(frame_index,)))


def observe(field_model, axis, profile, bundle, uv_frames,
            pixel_scale: float, noise_seed=None) -> ObservationSet:
    """Render, Fourier-sample, and optionally corrupt with thermal noise.

    Noise draws are independent complex Gaussians with per-component std
    sigma_k, generated from per-frame substreams of the master seed.
    """
    from .render import render_frame
    t_geo = np.array([f.t_geo for f in uv_frames])
    vis = []
    for k, uvf in enumerate(uv_frames):
        frame = render_frame(bundle, field_model, axis, profile, uvf.t_geo)
        y = dtft(frame.pixels, uvf, bundle.camera, pixel_scale)
        if noise_seed is not None:
            rng = _noise_rng(noise_seed, k)
            eps = (rng.standard_normal(len(y))
                   + 1j * rng.standard_normal(len(y))) * uvf.sigma
            y = y + eps
        vis.append(y)
    return ObservationSet(kind="uv", frames=uv_frames, visibilities=vis,
                          t_geo=t_geo, pixel_scale=pixel_scale,
                          noise_seed=noise_seed)


def image_domain_observe(field_model, axis, profile, bundle,
                         t_geo) -> ObservationSet:
    """Dense pixel 'measurements' with unit sigma (upper-bound experiments)."""
    from .render import render_sequence
    frames = render_sequence(bundle, field_model, axis, profile, t_geo)
    n = bundle.n_pixels
    uv_frames = [UvFrame(timestamp="", t_geo=float(t), pairs=[],
                         u=np.zeros(0), v=np.zeros(0), sigma=np.ones(n))
                 for t in t_geo]
    return ObservationSet(kind="image", frames=uv_frames,
                          visibilities=[f.pixels.copy() for f in frames],
                          t_geo=np.asarray(t_geo, dtype=float))


def chi2(observed: ObservationSet, model_vis) -> float:
    """Noise-weighted squared residual over every frame and baseline."""
    if len(model_vis) != len(observed.visibilities):
        raise ShapeMismatch("frame count mismatch")
    total = 0.0
    for y, m, f in zip(observed.visibilities, model_vis, observed.frames):
        y, m = np.asarray(y), np.asarray(m)
        if y.shape != m.shape:
            raise ShapeMismatch("baseline count mismatch")
        r = y - m
        total += float(np.sum((r.real**2 + np.imag(r)**2) / f.sigma**2))
    return total


def chi2_gradient_upstream(observed: ObservationSet, model_vis):
    """d chi2 / d model per frame (complex); feeds the DTFT adjoint."""
    out = []
    for y, m, f in zip(observed.visibilities, model_vis, observed.frames):
        r = np.asarray(y) - np.asarray(m)
        out.append(-2.0 * r / f.sigma**2)
    return out


# ---------------------------------------------------------------------------
# observation files (JSON-lines, one record per (timestamp, baseline))

def save_observations(path, obs: ObservationSet):
    with open(path, "w") as fh:
        meta = {"kind": obs.kind, "pixel_scale": obs.pixel_scale,
                "noise_seed": obs.noise_seed}
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for uvf, vis in zip(obs.frames, obs.visibilities):
            if obs.kind == "image":
                rec = {"t_utc": "", "t_geo": uvf.t_geo,
                       "pixels": list(np.asarray(vis, dtype=float))}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                continue
            for (s1, s2), u, v, s, y in zip(uvf.pairs, uvf.u, uvf.v,
                                            uvf.sigma, vis):
                rec = {"t_utc": uvf.timestamp, "t_geo": uvf.t_geo,
                       "st1": s1, "st2": s2, "u_wav": u, "v_wav": v,
                       "vis_re": y.real, "vis_im": y.imag, "sigma": s}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_observations(path) -> ObservationSet:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    meta = lines[0]["meta"]
    records = lines[1:]
    frames, vis, t_geo = [], [], []
    if meta["kind"] == "image":
        for rec in records:
            px = np.array(rec["pixels"])
            frames.append(UvFrame("", rec["t_geo"], [], np.zeros(0),
                                  np.zeros(0), np.ones(len(px))))
            vis.append(px)
            t_geo.append(rec["t_geo"])
    else:
        bykey = {}
        order = []
        for rec in records:
            key = (rec["t_utc"], rec["t_geo"])
            if key not in bykey:
                bykey[key] = []
                order.append(key)
            bykey[key].append(rec)
        for key in order:
            rs = bykey[key]
            frames.append(UvFrame(
                timestamp=key[0], t_geo=key[1],
                pairs=[(r["st1"], r["st2"]) for r in rs],
                u=np.array([r["u_wav"] for r in rs]),
                v=np.array([r["v_wav"] for r in rs]),
                sigma=np.array([r["sigma"] for r in rs])))
            vis.append(np.array([r["vis_re"] + 1j * r["vis_im"] for r in rs]))
            t_geo.append(key[1])
    return ObservationSet(kind=meta["kind"], frames=frames, visibilities=vis,
                          t_geo=np.array(t_geo),
                          pixel_scale=meta["pixel_scale"],
                          noise_seed=meta["noise_seed"])
