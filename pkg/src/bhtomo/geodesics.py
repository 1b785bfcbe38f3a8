"""Schwarzschild null-geodesic tracing and precomputed ray bundles.

Rays are integrated backward from an orthographic image plane.  The geodesic
equations are the Hamiltonian system for a photon in the Schwarzschild
geometry written in areal-radius Cartesian coordinates (G = M = c = 1):

    H = 1/2 [ -E^2 / f + |p|^2 - (2/r) q^2 ],   f = 1 - 2/r,  q = (x.p)/r

with conserved energy E = -p_t and H = 0 on the null shell.  Hamilton's
equations give

    dx/dl =  p - (2/r) q n
    dp/dl = -[ (E^2 f^-2 + q^2) / r^2 ] n + (2q / r^2) (p - q n)

where n = x/r.  H is monitored along every ray as the null-constraint
diagnostic; the angular momentum |x cross p| provides a second drift check.

Integration uses an embedded Dormand-Prince 4(5) pair with per-ray adaptive
step control, batched over all pixels of a camera so a full bundle traces in
seconds rather than minutes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, asdict, replace

import numpy as np

MAGIC = b"BHRB"
FORMAT_VERSION = 1

FLAG_ESCAPED = 0
FLAG_CAPTURED = 1

# Dormand-Prince 4(5) tableau.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])
_DP_E = _DP_B5 - _DP_B4


class IntegratorDiverged(RuntimeError):
    pass


class MaxStepsExceeded(RuntimeError):
    pass


class BundleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntegratorSettings:
    rtol: float = 1e-9
    atol: float = 1e-9
    max_step: float = 5.0
    horizon_guard: float = 1e-3
    region_of_interest: float = 12.0
    max_samples_per_ray: int = 128
    max_steps: int = 100_000
    lambda_max: float = 4000.0

    @property
    def capture_radius(self) -> float:
        return 2.0 * (1.0 + self.horizon_guard)


@dataclass(frozen=True)
class CameraSpec:
    """Orthographic camera looking at the black hole.

    ``view_direction`` points from the camera toward the hole; ``up_direction``
    is orthogonalized against it on construction.  The image plane spans
    +-field_half_width (r_g units) and sits at ``start_radius`` along the line
    of sight.
    """

    view_direction: tuple
    up_direction: tuple
    image_pixels: int
    field_half_width: float = 12.0
    start_radius: float = 100.0

    def __post_init__(self):
        v = np.asarray(self.view_direction, dtype=float)
        u = np.asarray(self.up_direction, dtype=float)
        nv = np.linalg.norm(v)
        if nv == 0:
            raise ValueError("view_direction must be nonzero")
        # leave already-orthonormal inputs untouched so that re-creating a
        # camera from its stored vectors is bit-exact
        if abs(nv - 1.0) > 1e-12 or abs(np.dot(u, v)) > 1e-12 \
                or abs(np.linalg.norm(u) - 1.0) > 1e-12:
            v = v / nv
            u = u - np.dot(u, v) * v
            nu = np.linalg.norm(u)
            if nu < 1e-12:
                raise ValueError("up_direction parallel to view_direction")
            u = u / nu
        object.__setattr__(self, "view_direction", tuple(v))
        object.__setattr__(self, "up_direction", tuple(u))
        if self.image_pixels < 1:
            raise ValueError("image_pixels must be >= 1")
        if self.field_half_width <= 0:
            raise ValueError("field_half_width must be > 0")
        if self.start_radius <= self.field_half_width * np.sqrt(2.0):
            raise ValueError("start_radius must exceed field_half_width * sqrt(2)")

    def basis(self):
        """Return (view, up, right) orthonormal triad as arrays."""
        w = np.array(self.view_direction)
        u = np.array(self.up_direction)
        r = np.cross(w, u)
        return w, u, r

    def pixel_offsets(self):
        """Image-plane offsets (alpha, beta) of all pixel centers, row-major.

        alpha runs along the right axis, beta along up; row index increases
        downward (beta decreasing), matching image conventions.
        """
        n = self.image_pixels
        d = 2.0 * self.field_half_width / n
        coords = (np.arange(n) - (n - 1) / 2.0) * d
        alpha = np.tile(coords, n)
        beta = np.repeat(-coords, n)
        return alpha, beta

    def launch_points(self):
        w, u, r = self.basis()
        alpha, beta = self.pixel_offsets()
        return (-self.start_radius * w[None, :]
                + alpha[:, None] * r[None, :]
                + beta[:, None] * u[None, :])


@dataclass
class RayPath:
    """Full integration record of one ray, kept for diagnostics and tests."""

    lam: np.ndarray          # accepted-step parameter values
    states: np.ndarray       # (n_steps, 6) positions + covariant momenta
    energy: float
    flag: int
    null_drift: float        # max |H| / E^2 over the path
    angmom_drift: float      # max relative drift of |x cross p|

    @property
    def positions(self):
        return self.states[:, :3]

    @property
    def momenta(self):
        return self.states[:, 3:]

    def directions(self):
        """Unit coordinate velocities dx/dl at every accepted step."""
        v = _coordinate_velocity(self.states)
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def bending_angle(self) -> float:
        d = self.directions()
        c = float(np.clip(np.dot(d[0], d[-1]), -1.0, 1.0))
        return float(np.arccos(c))

    def min_radius(self) -> float:
        return float(np.min(np.linalg.norm(self.positions, axis=1)))


@dataclass
class RayBundle:
    """Precomputed per-pixel curved-ray samples and integration weights."""

    camera: CameraSpec
    settings: IntegratorSettings
    positions: list        # per pixel: (P_i, 3) float64 array
    weights: list          # per pixel: (P_i,) float64 array
    flags: np.ndarray      # per pixel termination flag
    content_hash: str
    kind: str = "schwarzschild"

    @property
    def n_pixels(self) -> int:
        return self.camera.image_pixels ** 2

    def total_lengths(self) -> np.ndarray:
        return np.array([w.sum() for w in self.weights])

    def stacked(self):
        """Concatenate all samples: (positions, weights, pixel_index)."""
        counts = np.array([len(w) for w in self.weights])
        if counts.sum() == 0:
            return (np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))
        pos = np.concatenate([p for p in self.positions if len(p)])
        wts = np.concatenate([w for w in self.weights if len(w)])
        idx = np.repeat(np.arange(self.n_pixels), counts)
        return pos, wts, idx

    def save(self, path):
        blob = _encode_bundle(self)
        with open(path, "wb") as fh:
            fh.write(blob)

    @staticmethod
    def load(path) -> "RayBundle":
        with open(path, "rb") as fh:
            return _decode_bundle(fh.read())


def _coordinate_velocity(y):
    """dx/dl for state array y of shape (..., 6)."""
    x, p = y[..., :3], y[..., 3:]
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    q = np.sum(x * p, axis=-1, keepdims=True) / r
    return p - (2.0 / r) * q * (x / r)


def _rhs(y, energy):
    """Hamiltonian right-hand side; y shape (R, 6), energy shape (R,)."""
    x, p = y[:, :3], y[:, 3:]
    r = np.linalg.norm(x, axis=1, keepdims=True)
    n = x / r
    q = np.sum(n * p, axis=1, keepdims=True)
    f = 1.0 - 2.0 / r
    xdot = p - (2.0 / r) * q * n
    e2 = (energy ** 2)[:, None]
    pdot = -((e2 / f**2 + q**2) / r**2) * n + (2.0 * q / r**2) * (p - q * n)
    return np.concatenate([xdot, pdot], axis=1)


def _hamiltonian(y, energy):
    x, p = y[..., :3], y[..., 3:]
    r = np.linalg.norm(x, axis=-1)
    q = np.sum(x * p, axis=-1) / r
    f = 1.0 - 2.0 / r
    return 0.5 * (-energy**2 / f + np.sum(p * p, axis=-1) - (2.0 / r) * q**2)


def _initial_momentum(x0, direction):
    """Covariant momentum giving coordinate velocity along ``direction``.

    Solves p = g_ij v^j for unit v, then E from the null condition H = 0.
    """
    r = np.linalg.norm(x0, axis=1, keepdims=True)
    n = x0 / r
    f = 1.0 - 2.0 / r
    nv = np.sum(n * direction, axis=1, keepdims=True)
    p = direction + (2.0 / r) / f * nv * n
    q = np.sum(n * p, axis=1)
    e2 = f[:, 0] * (np.sum(p * p, axis=1) - (2.0 / r[:, 0]) * q**2)
    return p, np.sqrt(e2)


def _hermite(y0, y1, f0, f1, h, tau):
    """Cubic Hermite interpolation at fractions tau in [0, 1]."""
    t = tau[..., None]
    h00 = 2 * t**3 - 3 * t**2 + 1
    h10 = t**3 - 2 * t**2 + t
    h01 = -2 * t**3 + 3 * t**2
    h11 = t**3 - t**2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


class _BatchTracer:
    """Adaptive Dormand-Prince 4(5) integration of many rays at once.

    Each ray keeps its own step size; a ray leaves the active set when it
    crosses the capture radius inward or the start radius outward.
    """

    def __init__(self, x0, direction, settings: IntegratorSettings,
                 escape_radius: float):
        self.s = settings
        self.n = x0.shape[0]
        # small slack so launch points on the start sphere do not instantly end
        self.escape_radius = escape_radius * (1.0 + 1e-9)
        p0, energy = _initial_momentum(x0, np.broadcast_to(direction, x0.shape))
        self.energy = energy
        y0 = np.concatenate([x0, p0], axis=1)
        self.flags = np.full(self.n, -1, dtype=np.int8)
        self.end_lam = np.zeros(self.n)
        self.end_state = np.zeros((self.n, 6))
        # per-ray step history, appended in batches then gathered
        self._chunks = []          # list of (ray_idx, lam, y)
        self._run(y0)

    def _record(self, idx, lam, y):
        self._chunks.append((idx.copy(), lam.copy(), y.copy()))

    def _run(self, y0):
        s = self.s
        lam = np.zeros(self.n)
        y = y0.copy()
        h = np.full(self.n, 0.1)
        active = np.ones(self.n, dtype=bool)
        self._record(np.arange(self.n), lam, y)
        k_last = _rhs(y, self.energy)      # FSAL cache
        nsteps = 0
        while active.any():
            nsteps += 1
            if nsteps > s.max_steps:
                raise MaxStepsExceeded(
                    f"{active.sum()} rays still active after {s.max_steps} batch steps")
            ia = np.nonzero(active)[0]
            ya, ha, la = y[ia], h[ia], lam[ia]
            ea = self.energy[ia]
            ks = np.empty((7, len(ia), 6))
            ks[0] = k_last[ia]
            for st in range(1, 7):
                acc = np.tensordot(_DP_A[st], ks[:st], axes=(0, 0))
                ks[st] = _rhs(ya + ha[:, None] * acc, ea)
            y5 = ya + ha[:, None] * np.tensordot(_DP_B5, ks, axes=(0, 0))
            err = ha[:, None] * np.tensordot(_DP_E, ks, axes=(0, 0))
            scale = s.atol + s.rtol * np.maximum(np.abs(ya), np.abs(y5))
            enorm = np.sqrt(np.mean((err / scale) ** 2, axis=1))
            enorm = np.maximum(enorm, 1e-300)
            accept = enorm <= 1.0
            if not np.all(np.isfinite(enorm)):
                bad = ia[~np.isfinite(enorm)]
                raise IntegratorDiverged(f"non-finite state for rays {bad[:8]}")

            factor = np.clip(0.9 * enorm ** -0.2, 0.2, 5.0)
            h[ia] = np.minimum(ha * factor, s.max_step)
            if np.any(h[ia] < 1e-14):
                raise IntegratorDiverged("step size underflow; tolerance unreachable")

            if accept.any():
                ga = ia[accept]
                y_new = y5[accept]
                f0 = ks[0][accept]
                f1 = ks[6][accept]
                h_acc = ha[accept]
                lam_new = la[accept] + h_acc
                r_new = np.linalg.norm(y_new[:, :3], axis=1)
                r_old = np.linalg.norm(y[ga, :3], axis=1)
                captured = r_new <= s.capture_radius
                vout = np.sum(y_new[:, :3] * _coordinate_velocity(y_new), axis=1) > 0
                escaped = (~captured) & (r_new >= self.escape_radius) & vout
                timed_out = (~captured) & (~escaped) & (lam_new >= s.lambda_max)
                if timed_out.any():
                    raise MaxStepsExceeded(
                        "rays neither captured nor escaped before lambda_max")
                ending = captured | escaped
                if ending.any():
                    # refine the crossing point inside the final step
                    tgt = np.where(captured, s.capture_radius, self.escape_radius)
                    te = self._refine_crossing(
                        y[ga], y_new, f0, f1, h_acc, tgt, ending)
                    yi = _hermite(y[ga][ending], y_new[ending],
                                  f0[ending], f1[ending],
                                  h_acc[ending][:, None], te)
                    y_new = y_new.copy()
                    lam_new = lam_new.copy()
                    y_new[ending] = yi
                    lam_new[ending] = la[accept][ending] + te * h_acc[ending]
                    idx_end = ga[ending]
                    self.flags[idx_end] = np.where(captured[ending],
                                                   FLAG_CAPTURED, FLAG_ESCAPED)
                    self.end_lam[idx_end] = lam_new[ending]
                    self.end_state[idx_end] = y_new[ending]
                    active[idx_end] = False
                y[ga] = y_new
                lam[ga] = lam_new
                k_last[ga] = f1
                self._record(ga, lam_new, y_new)
                _ = r_old  # kept for debugging step diagnostics
        self._gather()

    def _refine_crossing(self, y0, y1, f0, f1, h, target_r, mask):
        """Bisection on the Hermite interpolant for r(tau) = target."""
        m = np.nonzero(mask)[0]
        lo = np.zeros(len(m))
        hi = np.ones(len(m))
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            yi = _hermite(y0[m], y1[m], f0[m], f1[m], h[m][:, None], mid)
            r = np.linalg.norm(yi[:, :3], axis=1)
            r0 = np.linalg.norm(y0[m, :3], axis=1)
            inward = r0 > target_r[m]  # capture: crossing downward
            crossed = np.where(inward, r <= target_r[m], r >= target_r[m])
            hi = np.where(crossed, mid, hi)
            lo = np.where(crossed, lo, mid)
        return hi

    def _gather(self):
        """Assemble per-ray step histories from the batched chunks."""
        idx = np.concatenate([c[0] for c in self._chunks])
        lam = np.concatenate([c[1] for c in self._chunks])
        ys = np.concatenate([c[2] for c in self._chunks])
        order = np.lexsort((lam, idx))
        idx, lam, ys = idx[order], lam[order], ys[order]
        bounds = np.searchsorted(idx, np.arange(self.n + 1))
        self.paths = []
        for i in range(self.n):
            a, b = bounds[i], bounds[i + 1]
            li, yi = lam[a:b], ys[a:b]
            e = self.energy[i]
            # normalize |H| by its dominant term E^2/f so the monitor stays
            # well conditioned approaching the horizon guard
            ri = np.linalg.norm(yi[:, :3], axis=1)
            hval = np.abs(_hamiltonian(yi, e)) * (1.0 - 2.0 / ri) / e**2
            angm = np.linalg.norm(np.cross(yi[:, :3], yi[:, 3:]), axis=1)
            l0 = angm[0] if angm[0] > 1e-12 else 1.0
            self.paths.append(RayPath(
                lam=li, states=yi, energy=float(e), flag=int(self.flags[i]),
                null_drift=float(hval.max()),
                angmom_drift=float(np.max(np.abs(angm - angm[0])) / l0)))
        self._chunks = None


def trace_rays(camera: CameraSpec, settings: IntegratorSettings,
               pixel_indices=None) -> list:
    """Trace one curved ray per requested pixel; returns RayPath list."""
    x0 = camera.launch_points()
    if pixel_indices is not None:
        x0 = x0[np.asarray(pixel_indices)]
    w, _, _ = camera.basis()
    tracer = _BatchTracer(x0, w, settings, escape_radius=camera.start_radius)
    return tracer.paths


def trace_ray(camera: CameraSpec, pixel_index: int,
              settings: IntegratorSettings = IntegratorSettings()) -> RayPath:
    if not 0 <= pixel_index < camera.image_pixels ** 2:
        raise IndexError(f"pixel_index {pixel_index} out of range")
    return trace_rays(camera, settings, [pixel_index])[0]


def _retained_segments(path: RayPath, settings: IntegratorSettings):
    """Intervals of the path with r <= region_of_interest, in path order.

    Returns a list of (positions, weights) with trapezoidal chord weights,
    resampled uniformly in arc length to at most max_samples_per_ray points
    per ray (split across segments by length).
    """
    roi = settings.region_of_interest
    lam, y = path.lam, path.states
    r = np.linalg.norm(y[:, :3], axis=1)
    inside = r <= roi
    if not inside.any():
        return []
    # locate contiguous runs of inside samples, refining boundary crossings
    f = _rhs(y, np.full(len(y), path.energy))
    segments = []
    i = 0
    n = len(lam)
    while i < n:
        if not inside[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and inside[j + 1]:
            j += 1
        lam_a = lam[i]
        y_a = y[i]
        if i > 0:
            lam_a, y_a = _roi_cross(y[i - 1], y[i], f[i - 1], f[i],
                                    lam[i - 1], lam[i], roi)
        lam_b = lam[j]
        y_b = y[j]
        if j + 1 < n:
            lam_b, y_b = _roi_cross(y[j], y[j + 1], f[j], f[j + 1],
                                    lam[j], lam[j + 1], roi)
        segments.append((i, j, lam_a, y_a, lam_b, y_b))
        i = j + 1
    out = []
    for (i, j, lam_a, y_a, lam_b, y_b) in segments:
        fine = _fine_polyline(path, f, i, j, lam_a, y_a, lam_b, y_b, settings)
        out.append(fine)
    return out


def _roi_cross(y0, y1, f0, f1, l0, l1, roi):
    h = l1 - l0
    lo, hi = 0.0, 1.0
    r0 = np.linalg.norm(y0[:3])
    going_in = r0 > roi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        yi = _hermite(y0, y1, f0, f1, h, np.array(mid))
        r = np.linalg.norm(yi[:3])
        crossed = r <= roi if going_in else r >= roi
        if going_in:
            lo, hi = (lo, mid) if crossed else (mid, hi)
        else:
            lo, hi = (lo, mid) if crossed else (mid, hi)
    mid = 0.5 * (lo + hi)
    return l0 + mid * h, _hermite(y0, y1, f0, f1, h, np.array(mid))


def _fine_polyline(path, f, i, j, lam_a, y_a, lam_b, y_b, settings):
    """Densely sample [lam_a, lam_b] with Hermite interpolation, then
    resample uniformly in cumulative chord length."""
    lam, y = path.lam, path.states
    pts = [y_a[:3][None, :]]
    subdiv = 8
    n = len(lam)
    for k in range(max(i - 1, 0), min(j + 1, n - 1)):
        h = lam[k + 1] - lam[k]
        a = max(lam_a, lam[k])
        b = min(lam_b, lam[k + 1])
        if b <= a or h <= 0:
            continue
        taus = (a + (b - a) * (np.arange(1, subdiv + 1) / subdiv) - lam[k]) / h
        pts.append(_hermite(y[k], y[k + 1], f[k], f[k + 1], h, taus)[:, :3])
    pts.append(y_b[:3][None, :])
    poly = np.concatenate(pts, axis=0)
    chord = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(chord)])
    total = cum[-1]
    if total <= 0:
        return poly[:1], np.zeros(1)
    target = 2.0 * settings.region_of_interest / settings.max_samples_per_ray
    npts = int(min(settings.max_samples_per_ray,
                   max(2, np.ceil(total / target) + 1)))
    s_targets = np.linspace(0.0, total, npts)
    res = np.stack([np.interp(s_targets, cum, poly[:, d]) for d in range(3)],
                   axis=1)
    c = np.linalg.norm(np.diff(res, axis=0), axis=1)
    wts = np.zeros(npts)
    wts[:-1] += 0.5 * c
    wts[1:] += 0.5 * c
    return res, wts


def build_bundle(camera: CameraSpec,
                 settings: IntegratorSettings = IntegratorSettings(),
                 cache_dir=None, force: bool = False) -> RayBundle:
    """Trace all pixels and assemble the cached RayBundle.

    With ``cache_dir`` set, an existing file with a matching content hash is
    loaded instead of re-tracing; corrupted files are recomputed.
    """
    chash = bundle_hash(camera, settings, kind="schwarzschild")
    if cache_dir is not None and not force:
        cached = _try_load_cache(cache_dir, chash)
        if cached is not None:
            return cached
    n = camera.image_pixels ** 2
    positions, weights, flags = [], [], np.zeros(n, dtype=np.int8)
    chunk = 1024
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        try:
            paths = trace_rays(camera, settings, list(range(lo, hi)))
        except (IntegratorDiverged, MaxStepsExceeded) as exc:
            raise type(exc)(f"pixels [{lo}, {hi}): {exc}") from exc
        for k, path in enumerate(paths):
            segs = _retained_segments(path, settings)
            if segs:
                positions.append(np.concatenate([s[0] for s in segs]))
                weights.append(np.concatenate([s[1] for s in segs]))
            else:
                positions.append(np.zeros((0, 3)))
                weights.append(np.zeros(0))
            flags[lo + k] = path.flag
    bundle = RayBundle(camera=camera, settings=settings, positions=positions,
                       weights=weights, flags=flags, content_hash=chash)
    if cache_dir is not None:
        _write_cache(cache_dir, bundle)
    return bundle


def euclidean_bundle(camera: CameraSpec,
                     settings: IntegratorSettings = IntegratorSettings()) -> RayBundle:
    """Straight parallel rays with uniform weights; flat-space control."""
    w, _, _ = camera.basis()
    x0 = camera.launch_points()
    roi = settings.region_of_interest
    n = camera.image_pixels ** 2
    positions, weights = [], []
    for i in range(n):
        # line x0 + s w intersected with the ROI sphere
        b = np.dot(x0[i], w)
        c = np.dot(x0[i], x0[i]) - roi**2
        disc = b * b - c
        if disc <= 0:
            positions.append(np.zeros((0, 3)))
            weights.append(np.zeros(0))
            continue
        s0, s1 = -b - np.sqrt(disc), -b + np.sqrt(disc)
        total = s1 - s0
        target = 2.0 * roi / settings.max_samples_per_ray
        npts = int(min(settings.max_samples_per_ray,
                       max(2, np.ceil(total / target) + 1)))
        s = np.linspace(s0, s1, npts)
        pts = x0[i][None, :] + s[:, None] * w[None, :]
        ds = total / (npts - 1)
        wts = np.full(npts, ds)
        wts[0] = wts[-1] = 0.5 * ds
        positions.append(pts)
        weights.append(wts)
    chash = bundle_hash(camera, settings, kind="euclidean")
    return RayBundle(camera=camera, settings=settings, positions=positions,
                     weights=weights, flags=np.zeros(n, dtype=np.int8),
                     content_hash=chash, kind="euclidean")


# ---------------------------------------------------------------------------
# serialization

def _header_dict(camera, settings, kind):
    return {"camera": asdict(camera), "settings": asdict(settings),
            "kind": kind, "format_version": FORMAT_VERSION}


def bundle_hash(camera, settings, kind="schwarzschild") -> str:
    payload = json.dumps(_header_dict(camera, settings, kind),
                         sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def _encode_bundle(bundle: RayBundle) -> bytes:
    buf = io.BytesIO()
    header = _header_dict(bundle.camera, bundle.settings, bundle.kind)
    header["content_hash"] = bundle.content_hash
    hjson = json.dumps(header, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(hjson)))
    buf.write(hjson)
    buf.write(struct.pack("<I", bundle.n_pixels))
    for i in range(bundle.n_pixels):
        pos, wts = bundle.positions[i], bundle.weights[i]
        buf.write(struct.pack("<IB", len(wts), int(bundle.flags[i])))
        buf.write(pos.astype("<f8").tobytes())
        buf.write(wts.astype("<f8").tobytes())
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    return payload + digest


def _decode_bundle(blob: bytes) -> RayBundle:
    if len(blob) < 44 or blob[:4] != MAGIC:
        raise BundleCacheError("not a ray-bundle file")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise BundleCacheError("ray-bundle checksum mismatch")
    buf = io.BytesIO(payload)
    buf.read(4)
    (version,) = struct.unpack("<I", buf.read(4))
    if version != FORMAT_VERSION:
        raise BundleCacheError(f"unsupported bundle format version {version}")
    (hlen,) = struct.unpack("<I", buf.read(4))
    header = json.loads(buf.read(hlen))
    camera = CameraSpec(**header["camera"])
    settings = IntegratorSettings(**header["settings"])
    (npix,) = struct.unpack("<I", buf.read(4))
    positions, weights, flags = [], [], np.zeros(npix, dtype=np.int8)
    for i in range(npix):
        cnt, flg = struct.unpack("<IB", buf.read(5))
        flags[i] = flg
        positions.append(np.frombuffer(buf.read(24 * cnt), dtype="<f8")
                         .reshape(cnt, 3).copy())
        weights.append(np.frombuffer(buf.read(8 * cnt), dtype="<f8").copy())
    return RayBundle(camera=camera, settings=settings, positions=positions,
                     weights=weights, flags=flags,
                     content_hash=header["content_hash"], kind=header["kind"])


def _cache_path(cache_dir, chash):
    import os
    return os.path.join(cache_dir, f"bundle_{chash[:16]}.bhrb")


def _try_load_cache(cache_dir, chash):
    import os
    path = _cache_path(cache_dir, chash)
    if not os.path.exists(path):
        return None
    try:
        bundle = RayBundle.load(path)
        if bundle.content_hash != chash:
            raise BundleCacheError("stale content hash")
        return bundle
    except BundleCacheError:
        import warnings
        warnings.warn(f"corrupted ray-bundle cache at {path}; re-tracing")
        return None


def _write_cache(cache_dir, bundle):
    import os
    os.makedirs(cache_dir, exist_ok=True)
    bundle.save(_cache_path(cache_dir, bundle.content_hash))
