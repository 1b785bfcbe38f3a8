"""Image formation: emission integrated along precomputed curved rays.

Each pixel is the weighted sum of emission samples along its ray,
p_n = sum_i e(t, x_i) ds_i.  Emission is zeroed inside the horizon guard
(curved bundles only) and outside the field's grid domain.  The adjoint
pass propagates per-pixel upstream weights to field parameters and, for
flow-based fields, to the raw rotation-axis vector through the warp.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dynamics import warp_point, warp_with_grads
from .geodesics import RayBundle


class BundleFieldMismatch(ValueError):
    pass


@dataclass
class ImageFrame:
    """Rendered lensed image: pixel vector (row-major) at one time."""

    timestamp: float
    pixels: np.ndarray
    camera: object

    @property
    def n_side(self) -> int:
        return self.camera.image_pixels

    def as_image(self) -> np.ndarray:
        n = self.n_side
        return self.pixels.reshape(n, n)


def _sample_mask(bundle: RayBundle, pos, half_extent):
    inside_cube = np.all(np.abs(pos) <= half_extent, axis=1)
    if bundle.kind == "euclidean":
        return inside_cube
    r = np.linalg.norm(pos, axis=1)
    return inside_cube & (r > bundle.settings.capture_radius)


def _check_domain(bundle: RayBundle, field):
    roi = bundle.settings.region_of_interest
    if roi > field.half_extent + 2.0 + 1e-9:
        raise BundleFieldMismatch(
            f"bundle region of interest {roi} exceeds field domain "
            f"(half_extent {field.half_extent} + 2)")


def _forward(bundle, field, axis, profile, t, need_grad):
    _check_domain(bundle, field)
    pos, wts, idx = bundle.stacked()
    mask = _sample_mask(bundle, pos, field.half_extent)
    pos, wts, idx = pos[mask], wts[mask], idx[mask]
    dy_draw = None
    if field.uses_flow:
        if t == 0.0:
            # identity warp (and zero axis sensitivity) regardless of radius
            y = pos
            if need_grad:
                dy_draw = np.zeros((pos.shape[0], 3, 3))
        elif need_grad:
            y, dy_draw, _ = warp_with_grads(axis, profile, t, pos)
        else:
            y = warp_point(axis, profile, t, pos)
        e, cache = field.forward(y, need_input_grad=need_grad)
    else:
        e, cache = field.forward(t, pos)
    pixels = np.bincount(idx, weights=e * wts, minlength=bundle.n_pixels)
    ctx = (cache, dy_draw, wts, idx)
    return pixels, ctx


def render_frame(bundle: RayBundle, field, axis, profile, t) -> ImageFrame:
    """Render one lensed frame at geometric time t."""
    pixels, _ = _forward(bundle, field, axis, profile, t, need_grad=False)
    return ImageFrame(timestamp=float(t), pixels=pixels, camera=bundle.camera)


def render_with_cache(bundle, field, axis, profile, t):
    """Forward pass keeping the context needed by render_backward."""
    pixels, ctx = _forward(bundle, field, axis, profile, t, need_grad=True)
    frame = ImageFrame(timestamp=float(t), pixels=pixels, camera=bundle.camera)
    return frame, ctx


def render_backward(field, ctx, upstream):
    """Adjoint of render_frame for per-pixel upstream weights.

    Returns (param_grads, axis_raw_grad); the axis gradient is None for
    representations without a flow model.
    """
    cache, dy_draw, wts, idx = ctx
    up_sample = np.asarray(upstream)[idx] * wts
    param_grads, input_grads = field.backward(cache, up_sample)
    axis_grad = None
    if dy_draw is not None:
        axis_grad = np.einsum("njk,nk->j", dy_draw, input_grads)
    return param_grads, axis_grad


def grad_render(bundle, field, axis, profile, t, upstream):
    """One-shot gradient of sum(upstream * pixels) w.r.t. params and axis."""
    _, ctx = _forward(bundle, field, axis, profile, t, need_grad=True)
    return render_backward(field, ctx, upstream)


def render_sequence(bundle, field, axis, profile, timestamps) -> list:
    """Independent frames at sorted ascending timestamps."""
    ts = np.asarray(timestamps, dtype=float)
    if np.any(np.diff(ts) < 0):
        raise ValueError("timestamps must be sorted ascending")
    return [render_frame(bundle, field, axis, profile, t) for t in ts]


def export_frame_binary(frame: ImageFrame, path):
    """Flat float64 dump with a (timestamp, N) header."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<dI", frame.timestamp, frame.n_side))
        fh.write(frame.pixels.astype("<f8").tobytes())


def load_frame_binary(path):
    with open(path, "rb") as fh:
        t, n = struct.unpack("<dI", fh.read(12))
        pixels = np.frombuffer(fh.read(8 * n * n), dtype="<f8").copy()
    return t, pixels


def export_frame_png(frame: ImageFrame, path, vmax=None):
    """8-bit grayscale export, peak-normalized unless vmax is given."""
    from PIL import Image
    img = frame.as_image()
    scale = vmax if vmax else (img.max() if img.max() > 0 else 1.0)
    arr = np.clip(img / scale * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
