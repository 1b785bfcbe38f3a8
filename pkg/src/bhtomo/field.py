"""Emission-field representations and their gradient contracts.

Three interchangeable representations feed the renderer:

* ``MlpEmission`` -- canonical-time coordinate MLP evaluated at flow-warped
  positions (the primary representation),
* ``VoxelEmission`` -- discrete trilinear voxel grid (optionally optimizable
  through softplus pre-activations),
* ``Mlp4dEmission`` -- spatiotemporal MLP with no flow model.

Gradients are closed-world reverse-mode: each representation implements its
own forward-with-cache and backward pass over the fixed operation set
(encode, matmul, ReLU, softplus, trilinear gather).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec

CHECKPOINT_MAGIC = b"BHCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PositionalEncoding:
    """Sinusoids with exponentially increasing frequencies.

    ``input_scale`` maps domain coordinates into the encoding argument; the
    default scaling puts one base-frequency cycle across the grid cube.
    Output layout interleaves sin/cos per component: the zero vector encodes
    to [0, 1, 0, 1, ...].
    """

    degree: int = 3
    input_scale: float = np.pi / 10.0
    dims: int = 3

    @property
    def out_dim(self) -> int:
        return 2 * self.dims * self.degree

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(v)
        freqs = 2.0 ** np.arange(self.degree) * self.input_scale
        ang = v[:, None, :] * freqs[None, :, None]      # (n, L, d)
        out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
        return out.reshape(v.shape[0], self.out_dim)

    def with_grad(self, v: np.ndarray):
        """Encoding plus d(enc)/d(v): (n, out_dim) and (n, d, out_dim)."""
        v = np.atleast_2d(v)
        n, d = v.shape
        freqs = 2.0 ** np.arange(self.degree) * self.input_scale
        ang = v[:, None, :] * freqs[None, :, None]
        s, c = np.sin(ang), np.cos(ang)
        enc = np.stack([s, c], axis=-1).reshape(n, self.out_dim)
        dd = np.stack([c, -s], axis=-1) * freqs[None, :, None, None]
        # dd[n, L, d, 2] is d(enc component)/d v_d; scatter to (n, d, out)
        grad = np.zeros((n, d, self.out_dim))
        idx = np.arange(self.out_dim).reshape(self.degree, d, 2)
        for j in range(d):
            grad[:, j, idx[:, j, :].ravel()] = dd[:, :, j, :].reshape(n, -1)
        return enc, grad


def scale_for_extent(half_extent: float) -> float:
    """Input scale mapping [-half_extent, half_extent] onto [-pi, pi]."""
    return np.pi / half_extent


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def init_mlp_params(in_dim: int, seed: int, hidden: int = 128,
                    layers: int = 4):
    """He-style uniform fan-in initialization, zero biases, seeded.

    The output layer starts small with a negative bias so the initial
    emission is dim but unsaturated; a bright start pushes the fit into
    the all-dark softplus plateau it cannot leave.
    """
    rng = np.random.default_rng(seed)
    dims = [in_dim] + [hidden] * layers + [1]
    params = []
    for a, b in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / a)
        params.append(rng.uniform(-lim, lim, size=(a, b)))
        params.append(np.zeros(b))
    params[-2] *= 0.05
    params[-1] = params[-1] - 4.0
    return params


class _MlpCore:
    """Shared forward/backward machinery for the 3D and 4D MLP fields."""

    def __init__(self, encoding: PositionalEncoding, params=None, seed=0):
        self.encoding = encoding
        if params is None:
            params = init_mlp_params(encoding.out_dim, seed)
        self.params = [np.asarray(p, dtype=float) for p in params]
        n_layers = len(self.params) // 2 - 1
        if self.params[0].shape[0] != encoding.out_dim:
            raise ValueError("first layer width does not match encoding")
        self.n_hidden = n_layers

    def forward(self, v, need_input_grad=False):
        """Emission at encoded inputs v (n, dims); returns (values, cache)."""
        if need_input_grad:
            enc, denc = self.encoding.with_grad(v)
        else:
            enc, denc = self.encoding(v), None
        h = enc
        acts = [enc]
        pre = []
        nl = self.n_hidden
        for i in range(nl):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        zout = (h @ self.params[2 * nl] + self.params[2 * nl + 1])[:, 0]
        out = _softplus(zout)
        cache = (acts, pre, zout, denc)
        return out, cache

    def backward(self, cache, upstream):
        """Gradients of sum(upstream * output) w.r.t. params and inputs.

        Returns (param_grads, input_grads); input_grads is None unless the
        forward pass requested input gradients.
        """
        acts, pre, zout, denc = cache
        nl = self.n_hidden
        g = (upstream * _sigmoid(zout))[:, None]
        grads = [None] * len(self.params)
        grads[2 * nl] = acts[-1].T @ g
        grads[2 * nl + 1] = g.sum(axis=0)
        d = g @ self.params[2 * nl].T
        for i in range(nl - 1, -1, -1):
            d = d * (pre[i] > 0)
            grads[2 * i] = acts[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ self.params[2 * i].T
        input_grads = None
        if denc is not None:
            input_grads = np.einsum("nk,njk->nj", d, denc)
        return grads, input_grads


class MlpEmission:
    """Canonical t = 0 emission as a coordinate MLP (nonnegative output)."""

    uses_flow = True
    kind = "bh-nerf"

    def __init__(self, half_extent: float = 10.0, seed: int = 0,
                 encoding: PositionalEncoding | None = None, params=None):
        if encoding is None:
            encoding = PositionalEncoding(
                degree=3, input_scale=scale_for_extent(half_extent), dims=3)
        self.half_extent = half_extent
        self.core = _MlpCore(encoding, params=params, seed=seed)

    @property
    def encoding(self):
        return self.core.encoding

    @property
    def params(self):
        return self.core.params

    @params.setter
    def params(self, value):
        self.core.params = [np.asarray(p, dtype=float) for p in value]

    def eval_canonical(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out, _ = self.core.forward(np.atleast_2d(x))
        return float(out[0]) if single else out

    def forward(self, x, need_input_grad=False):
        return self.core.forward(x, need_input_grad=need_input_grad)

    def backward(self, cache, upstream):
        return self.core.backward(cache, upstream)

    def metadata(self):
        return {"kind": self.kind, "half_extent": self.half_extent,
                "degree": self.encoding.degree,
                "input_scale": self.encoding.input_scale,
                "dims": self.encoding.dims}


class Mlp4dEmission:
    """Spatiotemporal MLP baseline: 4D input (t, x), no flow model."""

    uses_flow = False
    kind = "mlp-4d"

    def __init__(self, half_extent: float = 10.0, duration: float = 1.0,
                 seed: int = 0, params=None):
        encoding = PositionalEncoding(
            degree=3, input_scale=scale_for_extent(half_extent), dims=4)
        self.half_extent = half_extent
        self.duration = max(duration, 1e-12)
        self.core = _MlpCore(encoding, params=params, seed=seed)

    @property
    def encoding(self):
        return self.core.encoding

    @property
    def params(self):
        return self.core.params

    @params.setter
    def params(self, value):
        self.core.params = [np.asarray(p, dtype=float) for p in value]

    def _lift(self, t, x):
        xs = np.atleast_2d(np.asarray(x, dtype=float))
        # map [0, duration] onto the same [-he, he] span the spatial axes use
        tc = (2.0 * t / self.duration - 1.0) * self.half_extent
        tcol = np.full((xs.shape[0], 1), tc)
        return np.concatenate([tcol, xs], axis=1)

    def eval_spacetime(self, t, x):
        out, _ = self.core.forward(self._lift(t, x))
        return out

    def forward(self, t, x):
        return self.core.forward(self._lift(t, x))

    def backward(self, cache, upstream):
        grads, _ = self.core.backward(cache, upstream)
        return grads, None

    def metadata(self):
        return {"kind": self.kind, "half_extent": self.half_extent,
                "duration": self.duration,
                "degree": self.encoding.degree,
                "input_scale": self.encoding.input_scale,
                "dims": self.encoding.dims}


class VoxelEmission:
    """Nonnegative voxel grid with trilinear interpolation.

    ``optimizable=True`` parameterizes softplus pre-activations so values
    stay nonnegative under unconstrained updates; otherwise the stored
    values are used directly.
    """

    uses_flow = True
    kind = "voxel-grid"

    def __init__(self, grid: GridSpec, values=None, pre_values=None):
        self.grid = grid
        n = grid.resolution
        if pre_values is not None:
            self.pre_values = np.asarray(pre_values, dtype=float).reshape(n, n, n)
            self.optimizable = True
        else:
            if values is None:
                values = np.zeros((n, n, n))
            values = np.asarray(values, dtype=float).reshape(n, n, n)
            if np.any(values < 0):
                raise ValueError("voxel values must be nonnegative")
            self._values = values
            self.optimizable = False

    @property
    def values(self):
        if self.optimizable:
            return _softplus(self.pre_values)
        return self._values

    @property
    def params(self):
        if not self.optimizable:
            raise ValueError("direct-valued voxel grid has no free parameters")
        return [self.pre_values]

    @params.setter
    def params(self, value):
        self.pre_values = np.asarray(value[0], dtype=float)

    @property
    def half_extent(self):
        return self.grid.half_extent

    def _gather(self, x):
        """Trilinear corner indices and weights; zero outside the grid."""
        g = self.grid
        xs = np.atleast_2d(np.asarray(x, dtype=float))
        u = (xs + g.half_extent) / g.spacing - 0.5
        i0 = np.floor(u).astype(np.int64)
        frac = u - i0
        return xs, i0, frac

    def eval_canonical(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out, _ = self.forward(x)
        return float(out[0]) if single else out

    def forward(self, x, need_input_grad=False):
        xs, i0, frac = self._gather(x)
        n = self.grid.resolution
        vals = self.values
        out = np.zeros(xs.shape[0])
        dinput = np.zeros_like(xs) if need_input_grad else None
        corners = []
        for dx in (0, 1):
            wx = frac[:, 0] if dx else 1 - frac[:, 0]
            for dy in (0, 1):
                wy = frac[:, 1] if dy else 1 - frac[:, 1]
                for dz in (0, 1):
                    wz = frac[:, 2] if dz else 1 - frac[:, 2]
                    ii = i0 + np.array([dx, dy, dz])
                    ok = np.all((ii >= 0) & (ii < n), axis=1)
                    v = np.zeros(xs.shape[0])
                    v[ok] = vals[ii[ok, 0], ii[ok, 1], ii[ok, 2]]
                    w = wx * wy * wz
                    out += w * v
                    corners.append((ii, ok, w))
                    if need_input_grad:
                        sx = (1.0 if dx else -1.0) / self.grid.spacing
                        sy = (1.0 if dy else -1.0) / self.grid.spacing
                        sz = (1.0 if dz else -1.0) / self.grid.spacing
                        dinput[:, 0] += sx * wy * wz * v
                        dinput[:, 1] += sy * wx * wz * v
                        dinput[:, 2] += sz * wx * wy * v
        cache = (xs, i0, frac, corners, dinput)
        return out, cache

    def backward(self, cache, upstream):
        if not self.optimizable:
            raise ValueError("gradients require an optimizable voxel grid")
        xs, i0, frac, corners, dinput = cache
        n = self.grid.resolution
        grad = np.zeros((n, n, n))
        for ii, ok, w in corners:
            np.add.at(grad, (ii[ok, 0], ii[ok, 1], ii[ok, 2]),
                      (upstream * w)[ok])
        grad *= _sigmoid(self.pre_values)
        input_grads = None
        if dinput is not None:
            input_grads = dinput * upstream[:, None]
        return [grad], input_grads

    def metadata(self):
        return {"kind": self.kind, "resolution": self.grid.resolution,
                "half_extent": self.grid.half_extent,
                "optimizable": self.optimizable}


def eval_at_time(field, axis, profile, t, x):
    """Emission at observation time t and position(s) x.

    Flow-based fields evaluate the canonical field at warped coordinates;
    the 4D MLP evaluates directly at the spacetime point.
    """
    from .dynamics import warp_point
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if field.uses_flow:
        out = field.eval_canonical(warp_point(axis, profile, t, xs))
    else:
        out = field.eval_spacetime(t, xs)
    return float(out[0]) if single else out


def grad_params(field, queries, weights=None, t=None):
    """Gradient of sum(weights * field(queries)) w.r.t. every parameter.

    ``queries`` is (n, 3) for spatial fields; 4D fields also need ``t``.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if weights is None:
        weights = np.ones(queries.shape[0])
    weights = np.asarray(weights, dtype=float)
    if isinstance(field, Mlp4dEmission):
        _, cache = field.forward(0.0 if t is None else t, queries)
    else:
        _, cache = field.forward(queries)
    grads, _ = field.backward(cache, weights)
    return grads


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, field, extra=None):
    """Write parameters and architecture metadata to a BHCK file."""
    meta = field.metadata()
    if extra:
        meta = {**meta, "extra": extra}
    if isinstance(field, VoxelEmission) and not field.optimizable:
        tensors = [field.values]
    else:
        tensors = field.params
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    mjson = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(mjson)))
    buf.write(mjson)
    buf.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        t = np.asarray(t, dtype="<f8")
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.tobytes())
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())


def load_checkpoint(path):
    """Read a BHCK file; returns (field, extra_metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    payload, digest = blob[:-32], blob[-32:]
    if payload[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError("checkpoint checksum mismatch")
    buf = io.BytesIO(payload)
    buf.read(4)
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(mlen))
    (ntens,) = struct.unpack("<I", buf.read(4))
    tensors = []
    for _ in range(ntens):
        (ndim,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        cnt = int(np.prod(shape)) if ndim else 1
        tensors.append(np.frombuffer(buf.read(8 * cnt), dtype="<f8")
                       .reshape(shape).copy())
    kind = meta["kind"]
    if kind == "bh-nerf":
        enc = PositionalEncoding(degree=meta["degree"],
                                 input_scale=meta["input_scale"],
                                 dims=meta["dims"])
        field = MlpEmission(half_extent=meta["half_extent"], encoding=enc,
                            params=tensors)
    elif kind == "mlp-4d":
        field = Mlp4dEmission(half_extent=meta["half_extent"],
                              duration=meta["duration"], params=tensors)
    elif kind == "voxel-grid":
        grid = GridSpec(meta["resolution"], meta["half_extent"])
        if meta["optimizable"]:
            field = VoxelEmission(grid, pre_values=tensors[0])
        else:
            field = VoxelEmission(grid, values=tensors[0])
    else:
        raise ValueError(f"unknown field kind {kind!r}")
    return field, meta.get("extra")
