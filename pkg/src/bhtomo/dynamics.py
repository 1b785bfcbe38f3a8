"""Keplerian orbital flow: angular velocity profile and coordinate warp.

The emission at time t is the canonical t = 0 field evaluated at rotated
coordinates.  The rotation angle phi = t * omega(r) depends on the full 3D
radius, so inner shells rotate farther (differential shearing).  omega is
r^(-3/2) in geometric units (radians per unit time); a multiplicative
correlated-Gaussian perturbation of the radial profile supports the velocity
model mismatch study.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_NORM = 1e-12


class RadiusInsideHorizon(ValueError):
    pass


@dataclass(frozen=True)
class RotationAxis:
    """Unconstrained 3-vector parameterization of the orbit normal."""

    raw: tuple

    def __post_init__(self):
        r = np.asarray(self.raw, dtype=float)
        if r.shape != (3,):
            raise ValueError("axis must be a 3-vector")
        object.__setattr__(self, "raw", tuple(r))

    @property
    def unit(self) -> np.ndarray:
        r = np.array(self.raw)
        n = np.linalg.norm(r)
        if n < EPS_NORM:
            raise ValueError("axis norm too small to normalize")
        return r / n

    def flipped(self) -> "RotationAxis":
        return RotationAxis(tuple(-np.array(self.raw)))


@dataclass(frozen=True)
class VelocityProfile:
    """Exact Keplerian omega(r) or a perturbed tabulation of it.

    Perturbed profiles multiply the exact law by (1 + m * g(r)) with g drawn
    from a zero-mean unit-variance Gaussian process (squared-exponential
    covariance), tabulated on a dense radial grid with linear interpolation.
    """

    kind: str = "exact"
    magnitude: float = 0.0
    corr_length: float = 1.0
    seed: int = 0
    grid_r: np.ndarray | None = None
    grid_g: np.ndarray | None = None

    def perturbation(self, r):
        if self.kind == "exact":
            return np.zeros_like(np.asarray(r, dtype=float))
        return np.interp(r, self.grid_r, self.grid_g)

    def to_csv(self, path):
        if self.kind == "exact":
            raise ValueError("exact profile has no tabulation to export")
        data = np.stack([self.grid_r, self.grid_g], axis=1)
        np.savetxt(path, data, delimiter=",", header="r,g", comments="")


EXACT_PROFILE = VelocityProfile()


def _check_radius(r):
    if np.any(np.asarray(r) <= 2.0):
        raise RadiusInsideHorizon("radius must exceed the horizon r = 2")


def omega(profile: VelocityProfile, r):
    """Angular velocity (radians per geometric time) at radius r."""
    r = np.asarray(r, dtype=float)
    _check_radius(r)
    w = r ** -1.5
    if profile.kind == "perturbed":
        w = w * (1.0 + profile.magnitude * profile.perturbation(r))
    return w


def omega_derivative(profile: VelocityProfile, r):
    """d omega / dr, with the tabulated perturbation differenced piecewise."""
    r = np.asarray(r, dtype=float)
    _check_radius(r)
    dw = -1.5 * r ** -2.5
    if profile.kind == "perturbed":
        g = profile.perturbation(r)
        # piecewise-linear perturbation: slope from neighbouring nodes
        dg = np.gradient(profile.grid_g, profile.grid_r)
        gp = np.interp(r, profile.grid_r, dg)
        m = profile.magnitude
        dw = dw * (1.0 + m * g) + r ** -1.5 * m * gp
    return dw


def _rodrigues(u, phi, x):
    """R(u, phi) x for unit axis u; broadcasts over leading dims of x, phi."""
    c = np.cos(phi)[..., None]
    s = np.sin(phi)[..., None]
    ux = np.cross(np.broadcast_to(u, x.shape), x)
    ud = np.sum(u * x, axis=-1, keepdims=True)
    return x * c + ux * s + u * ud * (1.0 - c)


def warp_point(axis: RotationAxis, profile: VelocityProfile, t, x):
    """Map time-t query points to canonical t = 0 coordinates.

    Rotates x right-handedly about the unit axis by phi = t * omega(|x|).
    Accepts a single 3-vector or an (..., 3) batch.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    r = np.linalg.norm(xs, axis=-1)
    _check_radius(r)
    phi = t * omega(profile, r)
    out = _rodrigues(axis.unit, phi, xs)
    return out[0] if single else out.reshape(x.shape)


def warp_with_grads(axis: RotationAxis, profile: VelocityProfile, t, x):
    """Warped points plus jacobians w.r.t. the raw axis and w.r.t. x.

    Returns (y, dy_draw, dy_dx) with shapes (n,3), (n,3,3), (n,3,3);
    dy_draw[i, j, k] = d y_k / d raw_j and dy_dx[i, j, k] = d y_k / d x_j.
    """
    xs = np.atleast_2d(np.asarray(x, dtype=float))
    n = xs.shape[0]
    raw = np.array(axis.raw)
    nr = np.linalg.norm(raw)
    u = raw / nr
    r = np.linalg.norm(xs, axis=-1)
    _check_radius(r)
    w = omega(profile, r)
    dwdr = omega_derivative(profile, r)
    phi = t * w
    c, s = np.cos(phi), np.sin(phi)
    ux = np.cross(np.broadcast_to(u, xs.shape), xs)
    ud = xs @ u
    y = _rodrigues(u, phi, xs)

    # d y / d u, then chain through normalization
    eye = np.eye(3)
    # term from u x x: d(u cross x)/du_j = e_j cross x
    ejx = np.stack([np.cross(eye[j], xs) for j in range(3)], axis=1)  # (n,3,3)
    dy_du = (s[:, None, None] * ejx
             + (1 - c)[:, None, None]
             * (eye[None, :, :] * ud[:, None, None]
                + u[None, None, :] * xs[:, :, None]))
    norm_jac = (eye - np.outer(u, u)) / nr        # du_k / draw_j
    dy_draw = np.einsum("jk,nkl->njl", norm_jac, dy_du)

    # d y / d x at fixed phi: rows are d y_k / d x_j of the rotation matrix,
    # plus the phi(r) dependence through r = |x|
    rot = (c[:, None, None] * eye[None, :, :]
           + s[:, None, None] * _cross_matrix(u)[None, :, :]
           + (1 - c)[:, None, None] * np.outer(u, u)[None, :, :])
    # with y = R x, d y_k / d x_j = R[k, j]; store transposed for (j, k) layout
    dy_dx = np.transpose(rot, (0, 2, 1))
    dphi_dx = (t * dwdr / r)[:, None] * xs        # (n, 3)
    dR_dphi_x = (-xs * s[:, None] + ux * c[:, None]
                 + u[None, :] * (ud * s)[:, None])
    dy_dx = dy_dx + dphi_dx[:, :, None] * dR_dphi_x[:, None, :]
    return y, dy_draw, dy_dx


def _cross_matrix(u):
    return np.array([[0.0, -u[2], u[1]],
                     [u[2], 0.0, -u[0]],
                     [-u[1], u[0], 0.0]])


def sample_perturbation(magnitude: float, corr_length: float, seed: int,
                        r_min: float = 2.0, r_max: float = 12.0,
                        n_nodes: int = 512) -> VelocityProfile:
    """Draw a perturbed velocity profile, deterministic in the seed.

    g(r) is tabulated on ``n_nodes`` radii with squared-exponential
    covariance exp(-(r - r')^2 / (2 l^2)) and unit marginal variance.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    if corr_length <= 0:
        raise ValueError("corr_length must be > 0")
    rs = np.linspace(r_min, r_max, n_nodes)
    d = rs[:, None] - rs[None, :]
    cov = np.exp(-d**2 / (2.0 * corr_length**2))
    cov[np.diag_indices_from(cov)] += 1e-10
    chol = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    g = chol @ rng.standard_normal(n_nodes)
    if magnitude == 0.0:
        g = np.zeros(n_nodes)
    return VelocityProfile(kind="perturbed", magnitude=float(magnitude),
                           corr_length=float(corr_length), seed=int(seed),
                           grid_r=rs, grid_g=g)
