"""Geometric and chromatic augmentation with consistent ground truth.

A global affine (flip, rotation, zoom, squeeze, translation) is applied to
both frames; the second frame gets an additional small relative transform.
Flow is recomputed as a vector field: a cropped pixel x traces back to
p = A^-1(x), and its new displacement is B(p + flow(p)) - x, so warp
consistency survives the transform.  Flow, occlusion, and validity are
resampled with valid-mask weighting.  A crop must lie entirely inside the
region where both inverse transforms stay in the source frame; if no such
window exists the zoom is escalated to the smallest workable degree
(zoom floor), and impossible requests are rejected.

Chromatic transforms (contrast, brightness, per-channel gain, saturation,
hue rotation, noise) touch images only and are applied identically to both
frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from ..tensor import Tensor
from .synth import SyntheticSample

__all__ = ["AugmentError", "AugmentParams", "augment"]

_ZOOM_ESCALATION = 1.05
_MAX_ZOOM_TRIES = 40


class AugmentError(ValueError):
    """Raised when no valid crop exists even at the zoom ceiling."""


@dataclass
class AugmentParams:
    """Sampling ranges; scalar entries denote symmetric ranges (see fields)."""

    flip_prob: float = 0.5
    squeeze: float = 0.9            # anisotropic factor in [squeeze, 1/squeeze]
    translation: float = 0.1        # fraction of size, per axis, in [-v, v]
    rel_translation: float = 0.025
    rotation: float = 17.0          # degrees in [-v, v]
    rel_rotation: float = 4.25
    zoom: tuple[float, float] = (0.9, 2.0)
    rel_zoom: float = 0.96          # factor in [rel_zoom, 1/rel_zoom]
    contrast: tuple[float, float] = (-0.4, 0.8)
    brightness: float = 0.1
    channel: tuple[float, float] = (0.8, 1.4)
    saturation: float = 0.5
    hue: float = 0.5                # radians in [-v, v]
    noise: float = 0.04             # gaussian sigma drawn from [0, v]
    crop: tuple[int, int] = (64, 64)  # (height, width)

    @classmethod
    def chairs_like(cls, crop=(64, 64)) -> "AugmentParams":
        return cls(crop=tuple(crop))

    @classmethod
    def sintel_like(cls, crop=(64, 64)) -> "AugmentParams":
        return cls(zoom=(0.9, 1.5), noise=0.0, crop=tuple(crop))

    @classmethod
    def kitti_like(cls, crop=(64, 64)) -> "AugmentParams":
        return cls(
            squeeze=0.95, translation=0.05, rel_translation=0.0125,
            rotation=5.0, rel_rotation=1.25, zoom=(0.95, 1.25), rel_zoom=0.98,
            contrast=(-0.2, 0.4), brightness=0.05, channel=(0.9, 1.2),
            saturation=0.25, hue=0.1, noise=0.02, crop=tuple(crop),
        )

    @classmethod
    def identity(cls, crop: tuple[int, int]) -> "AugmentParams":
        return cls(
            flip_prob=0.0, squeeze=1.0, translation=0.0, rel_translation=0.0,
            rotation=0.0, rel_rotation=0.0, zoom=(1.0, 1.0), rel_zoom=1.0,
            contrast=(0.0, 0.0), brightness=0.0, channel=(1.0, 1.0),
            saturation=0.0, hue=0.0, noise=0.0, crop=tuple(crop),
        )

    @classmethod
    def profile(cls, name: str, crop=(64, 64)) -> "AugmentParams":
        table = {
            "chairs": cls.chairs_like, "sintel": cls.sintel_like,
            "kitti": cls.kitti_like, "identity": cls.identity,
        }
        if name not in table:
            raise ValueError(f"unknown augmentation profile {name!r}; known: {sorted(table)}")
        return table[name](crop=crop)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentParams":
        d = dict(d)
        for k in ("zoom", "contrast", "channel", "crop"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class _Affine:
    """y = M (x - c_src) + c_dst + t on (x, y) column points."""

    m: np.ndarray
    c_src: np.ndarray
    c_dst: np.ndarray
    t: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.c_src) @ self.m.T + self.c_dst + self.t

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        minv = np.linalg.inv(self.m)
        return (pts - self.c_dst - self.t) @ minv.T + self.c_src


def _rot(deg: float) -> np.ndarray:
    r = math.radians(deg)
    return np.array([[math.cos(r), -math.sin(r)], [math.sin(r), math.cos(r)]])


def _sample_geometry(p: AugmentParams, rng: np.random.Generator):
    flip = rng.random() < p.flip_prob
    squeeze = math.exp(rng.uniform(math.log(p.squeeze), math.log(1.0 / p.squeeze))) \
        if p.squeeze != 1.0 else 1.0
    trans = rng.uniform(-p.translation, p.translation, size=2) if p.translation else np.zeros(2)
    rot = rng.uniform(-p.rotation, p.rotation) if p.rotation else 0.0
    zoom = rng.uniform(p.zoom[0], p.zoom[1]) if p.zoom[0] != p.zoom[1] else p.zoom[0]
    rel_t = rng.uniform(-p.rel_translation, p.rel_translation, size=2) \
        if p.rel_translation else np.zeros(2)
    rel_rot = rng.uniform(-p.rel_rotation, p.rel_rotation) if p.rel_rotation else 0.0
    rel_zoom = math.exp(rng.uniform(math.log(p.rel_zoom), math.log(1.0 / p.rel_zoom))) \
        if p.rel_zoom != 1.0 else 1.0
    return flip, squeeze, trans, rot, zoom, rel_t, rel_rot, rel_zoom


def _bilerp(img: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Clamp-to-edge bilinear sampling of (H,W,C) at (N,2) points."""
    h, w = img.shape[:2]
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.ceil(x).astype(np.int64) - 1, 0, max(w - 2, 0))
    y0 = np.clip(np.ceil(y).astype(np.int64) - 1, 0, max(h - 2, 0))
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
            + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)


def _bilerp_weighted(img: np.ndarray, weight: np.ndarray, pts: np.ndarray):
    """Valid-weighted bilinear resampling of (H,W,C) ground truth.

    Corner contributions are weighted by the validity plane; returns the
    normalized values and the plain-interpolated validity (0 where every
    corner is invalid).
    """
    h, w = img.shape[:2]
    x = np.clip(pts[:, 0], 0.0, w - 1.0)
    y = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.ceil(x).astype(np.int64) - 1, 0, max(w - 2, 0))
    y0 = np.clip(np.ceil(y).astype(np.int64) - 1, 0, max(h - 2, 0))
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ws = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    corners = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
    num = np.zeros((pts.shape[0], img.shape[2]))
    den = np.zeros((pts.shape[0], 1))
    plain = np.zeros((pts.shape[0], img.shape[2]))
    for wgt, (cy, cx) in zip(ws, corners):
        v = weight[cy, cx][:, None]
        num += img[cy, cx] * wgt * v
        den += wgt * v
        plain += img[cy, cx] * wgt
    safe = np.where(den > 0, den, 1.0)
    # fully-invalid support falls back to the unweighted interpolation so
    # invalid pixels keep a best-effort value
    vals = np.where(den > 0, num / safe, plain)
    return vals, den[:, 0]


def _chromatic(images: list[np.ndarray], p: AugmentParams, rng: np.random.Generator):
    """Shared photometric transform; images are (H,W,3) in [0,1]."""
    c = rng.uniform(p.contrast[0], p.contrast[1]) if p.contrast != (0.0, 0.0) else 0.0
    b = rng.uniform(-p.brightness, p.brightness) if p.brightness else 0.0
    gains = rng.uniform(p.channel[0], p.channel[1], size=3) if p.channel != (1.0, 1.0) \
        else np.ones(3)
    sat = 1.0 + (rng.uniform(-p.saturation, p.saturation) if p.saturation else 0.0)
    hue = rng.uniform(-p.hue, p.hue) if p.hue else 0.0
    sigma = rng.uniform(0.0, p.noise) if p.noise else 0.0
    noise = rng.normal(0.0, 1.0, size=images[0].shape) * sigma if sigma > 0 else None

    rot = _hue_matrix(hue)
    lum = np.array([0.299, 0.587, 0.114])
    out = []
    for img in images:
        a = img
        if not np.all(gains == 1.0):
            a = a * gains
        if sat != 1.0:
            gray = (a @ lum)[..., None]
            a = gray + sat * (a - gray)
        if hue != 0.0:
            a = a @ rot.T
        if c != 0.0 or b != 0.0:
            a = (a - 0.5) * (1.0 + c) + 0.5 + b
        if noise is not None:
            a = a + noise
        out.append(np.clip(a, 0.0, 1.0))
    return out


def _hue_matrix(angle: float) -> np.ndarray:
    if angle == 0.0:
        return np.eye(3)
    v = np.ones(3) / math.sqrt(3.0)
    k = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) * math.cos(angle) + math.sin(angle) * k \
        + (1 - math.cos(angle)) * np.outer(v, v)


def _find_crop(valid: np.ndarray, ch: int, cw: int, rng: np.random.Generator):
    """Uniformly pick an origin whose (ch, cw) window is fully valid."""
    h, w = valid.shape
    if ch > h or cw > w:
        return None
    ii = np.zeros((h + 1, w + 1), dtype=np.int64)
    ii[1:, 1:] = np.cumsum(np.cumsum(valid.astype(np.int64), axis=0), axis=1)
    sums = (ii[ch:, cw:] - ii[:-ch, cw:] - ii[ch:, :-cw] + ii[:-ch, :-cw])
    ok = np.argwhere(sums == ch * cw)
    if len(ok) == 0:
        return None
    oy, ox = ok[rng.integers(len(ok))]
    return int(ox), int(oy)


def augment(sample: SyntheticSample, params: AugmentParams,
            rng: np.random.Generator) -> SyntheticSample:
    h, w = sample.height, sample.width
    ch, cw = params.crop
    if ch > h or cw > w:
        raise AugmentError(
            f"crop {ch}x{cw} exceeds the {h}x{w} source; no zoom can create a valid crop"
        )
    flip, squeeze, trans, rot_deg, zoom, rel_t, rel_rot, rel_zoom = \
        _sample_geometry(params, rng)

    img1 = sample.image1.data[0].transpose(1, 2, 0).astype(np.float64)
    img2 = sample.image2.data[0].transpose(1, 2, 0).astype(np.float64)
    flow = sample.flow.data[0].transpose(1, 2, 0).astype(np.float64)
    occ = sample.occlusion.data[0, 0].astype(np.float64)
    val = sample.valid.data[0, 0].astype(np.float64)

    c_img = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    t_px = trans * np.array([w, h])
    rel_t_px = rel_t * np.array([w, h])

    chosen = None
    z = zoom
    for _ in range(_MAX_ZOOM_TRIES):
        m = _rot(rot_deg) @ np.diag([z * squeeze, z / squeeze])
        if flip:
            m = np.diag([-1.0, 1.0]) @ m
        fwd = _Affine(m, c_img, c_img, t_px)
        mrel = _rot(rel_rot) * rel_zoom
        rel = _Affine(mrel, c_img, c_img, rel_t_px)

        xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        canvas = np.stack([xs.ravel(), ys.ravel()], axis=1)
        p1 = fwd.inverse(canvas)
        p2 = rel.inverse(canvas)
        p2 = fwd.inverse(p2)
        in1 = ((p1[:, 0] >= 0) & (p1[:, 0] <= w - 1)
               & (p1[:, 1] >= 0) & (p1[:, 1] <= h - 1))
        in2 = ((p2[:, 0] >= 0) & (p2[:, 0] <= w - 1)
               & (p2[:, 1] >= 0) & (p2[:, 1] <= h - 1))
        region = (in1 & in2).reshape(h, w)
        origin = _find_crop(region, ch, cw, rng)
        if origin is not None:
            chosen = (fwd, rel, origin)
            break
        z *= _ZOOM_ESCALATION
    if chosen is None:
        raise AugmentError(
            f"no valid {ch}x{cw} crop exists for this transform even after raising "
            f"zoom from {zoom:.3g} to the floor {z:.3g}; reduce the crop or rotation"
        )
    fwd, rel, (ox, oy) = chosen

    xs, ys = np.meshgrid(np.arange(cw, dtype=np.float64) + ox,
                         np.arange(ch, dtype=np.float64) + oy)
    canvas = np.stack([xs.ravel(), ys.ravel()], axis=1)
    p1 = fwd.inverse(canvas)
    p2 = fwd.inverse(rel.inverse(canvas))

    new1 = _bilerp(img1, p1).reshape(ch, cw, 3)
    new2 = _bilerp(img2, p2).reshape(ch, cw, 3)

    f_src, f_valid = _bilerp_weighted(flow, val, p1)
    targets = rel.apply(fwd.apply(p1 + f_src))
    new_flow = (targets - canvas).reshape(ch, cw, 2)

    occ_src, _ = _bilerp_weighted(occ[..., None], val, p1)
    new_occ = occ_src.reshape(ch, cw) >= 0.5
    new_val = (f_valid > 0.5).reshape(ch, cw)
    # targets leaving the crop are ill-posed, like frame-leaving flow at generation
    in_crop = ((targets[:, 0] >= ox) & (targets[:, 0] <= ox + cw - 1)
               & (targets[:, 1] >= oy) & (targets[:, 1] <= oy + ch - 1)).reshape(ch, cw)
    new_val &= in_crop
    new_occ |= ~in_crop
    new_occ = np.where(new_val, new_occ, True).astype(np.float64)
    new_val = new_val.astype(np.float64)

    new1, new2 = _chromatic([new1, new2], params, rng)

    def t(a, chn):
        return Tensor(np.ascontiguousarray(a, dtype=np.float32).reshape(1, chn, ch, cw))

    return SyntheticSample(
        image1=t(new1.transpose(2, 0, 1), 3),
        image2=t(new2.transpose(2, 0, 1), 3),
        flow=t(new_flow.transpose(2, 0, 1), 2),
        occlusion=t(new_occ, 1),
        valid=t(new_val, 1),
        meta=dict(sample.meta, augmented=True),
    )
