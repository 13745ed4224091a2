"""Flow and mask rendering: the standard optical-flow color wheel with
magnitude normalized by the 99th-percentile radius, and grayscale masks
(white = visible)."""

from __future__ import annotations

import numpy as np
from PIL import Image

from ..tensor import ShapeError, Tensor

__all__ = ["make_colorwheel", "flow_to_rgb", "render_flow_png", "render_mask_png"]


def make_colorwheel() -> np.ndarray:
    """55-entry RGB wheel (RY/YG/GC/CB/BM/MR segments)."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    ncols = ry + yg + gc + cb + bm + mr
    wheel = np.zeros((ncols, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def flow_to_rgb(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Color-code a flow field; magnitudes normalized by the 99th percentile."""
    rad = np.sqrt(u * u + v * v)
    norm = np.percentile(rad, 99)
    if norm > 0:
        u = u / norm
        v = v / norm
        rad = rad / norm
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(u.shape + (3,), dtype=np.uint8)
    for ch in range(3):
        col0 = wheel[k0, ch] / 255.0
        col1 = wheel[k1, ch] / 255.0
        col = (1 - f) * col0 + f * col1
        inside = rad <= 1
        col[inside] = 1 - rad[inside] * (1 - col[inside])
        col[~inside] = col[~inside] * 0.75
        img[..., ch] = np.floor(255 * col)
    return img


def _single_plane(t: Tensor, channels: int, what: str) -> np.ndarray:
    if t.shape[0] != 1 or t.shape[1] != channels:
        raise ShapeError(f"{what} must be (1,{channels},H,W), got {t.shape}")
    return t.data[0].astype(np.float64)

def render_flow_png(flow: Tensor, path) -> None:
    arr = _single_plane(flow, 2, "flow")
    if not np.isfinite(arr).all():
        raise ValueError("flow contains non-finite values")
    Image.fromarray(flow_to_rgb(arr[0], arr[1]), mode="RGB").save(path)


def render_mask_png(mask: Tensor, path) -> None:
    arr = _single_plane(mask, 1, "mask")[0]
    gray = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)
