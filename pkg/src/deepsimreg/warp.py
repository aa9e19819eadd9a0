"""Dense warping, affine fields and Jacobian analysis of 2-D transformations.

A displacement field ``u`` has shape ``(N, 2, H, W)`` in pixel units, channel 0
the x (column) displacement and channel 1 the y (row) displacement. The
transformation is ``phi(p) = p + u(p)`` and warping ``I`` by ``u`` produces
``I(phi(p))`` at every pixel ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import Tensor, as_tensor


def _grid(h: int, w: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return xs, ys


def _field_array(field) -> np.ndarray:
    data = field.data if isinstance(field, Tensor) else np.asarray(field)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4 or data.shape[1] != 2:
        raise ValueError(f"displacement field must have shape (N, 2, H, W), got {data.shape}")
    return data


def _bilinear_setup(u: np.ndarray):
    n, _, h, w = u.shape
    gx, gy = _grid(h, w, u.dtype)
    xs = gx + u[:, 0]
    ys = gy + u[:, 1]
    in_x = (xs >= 0) & (xs <= w - 1)
    in_y = (ys >= 0) & (ys <= h - 1)
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.clip(np.floor(xs), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xs - x0).astype(u.dtype)
    wy = (ys - y0).astype(u.dtype)
    return x0, x1, y0, y1, wx, wy, in_x, in_y


def warp_bilinear(source, field) -> Tensor:
    """Sample ``source`` at ``p + u(p)`` with bilinear interpolation.

    Sample points outside the image are clamped to the border. The result is
    differentiable with respect to both the intensities and the displacement.

    Args:
        source: ``(N, C, H, W)`` tensor.
        field: ``(N, 2, H, W)`` displacement tensor (or array) in pixels.
    """
    source = as_tensor(source)
    field = as_tensor(field) if not isinstance(field, Tensor) else field
    if source.ndim != 4 or field.ndim != 4 or field.shape[1] != 2:
        raise ValueError(f"expected source (N, C, H, W) and field (N, 2, H, W), got {source.shape} and {field.shape}")
    n, c, h, w = source.shape
    if field.shape[0] != n or field.shape[2:] != (h, w):
        raise ValueError(f"field shape {field.shape} does not match source shape {source.shape}")

    u = field.data.astype(source.dtype, copy=False)
    x0, x1, y0, y1, wx, wy, in_x, in_y = _bilinear_setup(u)
    hw = h * w
    flat = source.data.reshape(n, c, hw)

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(n, 1, hw)
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, hw)), axis=2).reshape(n, c, h, w)

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    wx_, wy_ = wx[:, None], wy[:, None]
    w00 = (1 - wx_) * (1 - wy_)
    w01 = wx_ * (1 - wy_)
    w10 = (1 - wx_) * wy_
    w11 = wx_ * wy_
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def backward(g):
        gsrc = None
        if source.requires_grad:
            base = (np.arange(n * c) * hw).reshape(n, c, 1)
            idx = []
            wts = []
            for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                idx.append((base + (yy * w + xx).reshape(n, 1, hw)).ravel())
                wts.append((g * ww).ravel())
            gsrc = np.bincount(np.concatenate(idx), weights=np.concatenate(wts), minlength=n * c * hw)
            gsrc = gsrc.reshape(source.shape).astype(source.dtype, copy=False)
        gu = None
        if field.requires_grad:
            dx = (1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)
            dy = (1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)
            gx = (g * dx).sum(axis=1) * in_x
            gy = (g * dy).sum(axis=1) * in_y
            gu = np.stack([gx, gy], axis=1).astype(field.dtype, copy=False)
        return gsrc, gu

    return Tensor._from_op(out.astype(source.dtype, copy=False), (source, field), backward, "warp_bilinear")


def warp_nearest(labels: np.ndarray, field) -> np.ndarray:
    """Warp a discrete label map ``(N, H, W)`` (or ``(H, W)``) by nearest-neighbour lookup."""
    labels = np.asarray(labels)
    squeeze = labels.ndim == 2
    if squeeze:
        labels = labels[None]
    u = _field_array(field).astype(np.float64)
    n, h, w = labels.shape
    if u.shape[0] != n or u.shape[2:] != (h, w):
        raise ValueError(f"field shape {u.shape} does not match label shape {labels.shape}")
    gx, gy = _grid(h, w)
    xs = np.clip(np.rint(gx + u[:, 0]), 0, w - 1).astype(np.int64)
    ys = np.clip(np.rint(gy + u[:, 1]), 0, h - 1).astype(np.int64)
    out = labels[np.arange(n)[:, None, None], ys, xs]
    return out[0] if squeeze else out


def _forward_diff(a: np.ndarray, axis: int) -> np.ndarray:
    # forward differences, trailing border repeats the last (backward) difference
    d = np.diff(a, axis=axis)
    last = np.take(d, [-1], axis=axis)
    return np.concatenate([d, last], axis=axis)


def jacobian_determinant(field) -> np.ndarray:
    """Per-pixel ``det(I + grad u)`` as an ``(N, 1, H, W)`` array (analysis only)."""
    u = _field_array(field).astype(np.float64)
    if u.shape[2] < 2 or u.shape[3] < 2:
        raise ValueError("jacobian_determinant needs H, W >= 2")
    dux_dx = _forward_diff(u[:, 0], 2)
    dux_dy = _forward_diff(u[:, 0], 1)
    duy_dx = _forward_diff(u[:, 1], 2)
    duy_dy = _forward_diff(u[:, 1], 1)
    det = (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx
    return det[:, None]


def interior(a: np.ndarray) -> np.ndarray:
    """Drop a one-pixel border from the two trailing axes."""
    return a[..., 1:-1, 1:-1]


@dataclass
class AffineParams:
    """Affine map ``p -> A (p - c) + c + t`` about the image centre ``c``.

    ``matrix`` is the 2x2 linear part acting on ``(x, y)``; ``translation`` is in pixels.
    """

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 2)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(2)

    @classmethod
    def identity(cls) -> AffineParams:
        return cls(np.eye(2), np.zeros(2))


@dataclass(frozen=True)
class AffineRanges:
    """Sampling ranges for random augmentation."""

    rotation_deg: float = 10.0
    scale: tuple[float, float] = (0.9, 1.1)
    shear: float = 0.05
    translation: float = 3.0


def random_affine(rng: np.random.Generator, ranges: AffineRanges = AffineRanges()) -> AffineParams:
    """Draw an orientation-preserving affine transformation."""
    theta = np.deg2rad(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
    sx, sy = rng.uniform(ranges.scale[0], ranges.scale[1], size=2)
    shear = rng.uniform(-ranges.shear, ranges.shear)
    t = rng.uniform(-ranges.translation, ranges.translation, size=2)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    matrix = rot @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([sx, sy])
    return AffineParams(matrix, t)


def affine_to_field(params: AffineParams, h: int, w: int) -> np.ndarray:
    """Dense ``(1, 2, H, W)`` displacement reproducing the affine map exactly."""
    gx, gy = _grid(h, w)
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    px, py = gx - c[0], gy - c[1]
    a = params.matrix
    tx, ty = params.translation
    ux = a[0, 0] * px + a[0, 1] * py + c[0] + tx - gx
    uy = a[1, 0] * px + a[1, 1] * py + c[1] + ty - gy
    return np.stack([ux, uy])[None]


def random_smooth_field(rng: np.random.Generator, h: int, w: int, amplitude: float, sigma: float) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled so the largest displacement norm is ``amplitude``."""
    if amplitude < 0 or sigma <= 0:
        raise ValueError("need amplitude >= 0 and sigma > 0")
    noise = rng.standard_normal((2, h, w))
    smooth = np.stack([gaussian_filter(ch, sigma, mode="reflect", truncate=3.0) for ch in noise])
    peak = np.sqrt((smooth ** 2).sum(axis=0)).max()
    if amplitude == 0 or peak == 0:
        return np.zeros((1, 2, h, w))
    return (smooth * (amplitude / peak))[None]


def compose_fields(outer, inner) -> np.ndarray:
    """Displacement of ``p -> outer_phi(inner_phi(p))`` (both ``(N, 2, H, W)``).

    Warping by the result equals warping by ``outer`` first and then by
    ``inner``: ``I(outer_phi(inner_phi(p)))``.
    """
    a = _field_array(outer).astype(np.float64)
    b = _field_array(inner).astype(np.float64)
    sampled = warp_bilinear(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    return b + sampled


def invert_field(field, iterations: int = 30) -> np.ndarray:
    """Approximate inverse displacement by fixed-point iteration ``v = -u(p + v)``."""
    u = Tensor(_field_array(field).astype(np.float64), dtype=np.float64)
    v = -u.data.copy()
    for _ in range(iterations):
        v = -warp_bilinear(u, Tensor(v, dtype=np.float64)).data
    return v
