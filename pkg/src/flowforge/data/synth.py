"""Layered synthetic scenes with analytic flow and occlusion ground truth.

A scene is a textured background plus rigid textured shapes, each moving by
its own translation (and optional rotation about its center).  Shapes are
ordered front to back; the background sits behind everything.  Flow is the
visible layer's rigid motion; a pixel is occluded when its motion target is
covered by a strictly nearer layer in the second frame or leaves the frame
(out-of-frame pixels are also marked invalid).

Textures are bilinearly interpolated random color grids (piecewise-constant
color patches joined smoothly) plus low-frequency gradients, evaluated
analytically at arbitrary coordinates so both frames render the same
surface exactly.  Pixel (row, col) sits at coordinates (x=col, y=row).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from ..tensor import Tensor

__all__ = ["SceneConfig", "SyntheticSample", "gen_sample", "gen_batch", "sample_seed"]


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    n_shapes: int = 3
    max_disp: float = 8.0          # per-axis shape translation bound, pixels
    background_disp: float = 0.0   # per-axis background translation bound
    max_rotation: float = 0.0      # shape rotation bound, degrees
    min_shape_size: float = 10.0   # shape diameter range, pixels
    max_shape_size: float = 28.0
    texture_cell: int = 8          # color patch pitch, pixels
    gradient_strength: float = 0.25
    integer_motion: bool = False   # round all translations to whole pixels

    def __post_init__(self):
        lim = min(self.height, self.width) / 4.0
        if not (0 <= self.max_disp < lim):
            raise ValueError(
                f"max_disp must satisfy 0 <= max_disp < min(H, W)/4 = {lim}, got {self.max_disp}"
            )
        if self.background_disp < 0 or self.background_disp >= lim:
            raise ValueError(f"background_disp must be in [0, {lim}), got {self.background_disp}")
        if self.n_shapes < 0:
            raise ValueError("n_shapes must be >= 0")
        if self.min_shape_size <= 2 or self.max_shape_size < self.min_shape_size:
            raise ValueError("shape size range must satisfy 2 < min <= max")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class SyntheticSample:
    """Image pair with dense ground truth.

    ``flow`` maps frame-1 pixels to frame 2 (u, v in pixels); ``occlusion``
    is 1 where the frame-1 pixel is hidden or out of frame in frame 2;
    ``valid`` is 0 only where the target leaves the frame.
    """

    image1: Tensor
    image2: Tensor
    flow: Tensor
    occlusion: Tensor
    valid: Tensor
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.image1.shape[2]

    @property
    def width(self) -> int:
        return self.image1.shape[3]


class _Texture:
    """Color grid with bilinear interpolation plus a linear ramp."""

    def __init__(self, rng: np.random.Generator, h: int, w: int, cell: int, grad: float):
        self.cell = cell
        gh = h // cell + 3
        gw = w // cell + 3
        self.grid = rng.uniform(0.08, 0.92, size=(gh, gw, 3))
        self.base = rng.uniform(-grad, grad, size=(2, 3))  # per-axis ramp per channel
        self.h, self.w = h, w

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        gx = np.clip(x / self.cell + 1.0, 0.0, self.grid.shape[1] - 1.001)
        gy = np.clip(y / self.cell + 1.0, 0.0, self.grid.shape[0] - 1.001)
        x0 = np.floor(gx).astype(np.int64)
        y0 = np.floor(gy).astype(np.int64)
        fx = (gx - x0)[..., None]
        fy = (gy - y0)[..., None]
        g = self.grid
        c = (g[y0, x0] * (1 - fx) * (1 - fy) + g[y0, x0 + 1] * fx * (1 - fy)
             + g[y0 + 1, x0] * (1 - fx) * fy + g[y0 + 1, x0 + 1] * fx * fy)
        ramp = (x[..., None] / self.w - 0.5) * self.base[0] + (y[..., None] / self.h - 0.5) * self.base[1]
        return np.clip(c + ramp, 0.0, 1.0)


class _Layer:
    """Rigid layer: support region in frame 1 plus motion to frame 2."""

    def __init__(self, kind, center, half, angle, translation, rotation, tex):
        self.kind = kind            # 'bg' | 'rect' | 'disc'
        self.center = np.asarray(center, dtype=np.float64)
        self.half = half            # (hx, hy) for rect, radius for disc
        self.angle = angle
        self.t = np.asarray(translation, dtype=np.float64)
        self.rot = rotation
        self.tex = tex

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Support membership in frame-1 coordinates."""
        if self.kind == "bg":
            return np.ones_like(x, dtype=bool)
        dx = x - self.center[0]
        dy = y - self.center[1]
        if self.kind == "disc":
            return dx * dx + dy * dy <= self.half * self.half
        ca, sa = math.cos(-self.angle), math.sin(-self.angle)
        qx = ca * dx - sa * dy
        qy = sa * dx + ca * dy
        return (np.abs(qx) <= self.half[0]) & (np.abs(qy) <= self.half[1])

    def fwd(self, x: np.ndarray, y: np.ndarray):
        """Frame-1 point -> frame-2 point."""
        ca, sa = math.cos(self.rot), math.sin(self.rot)
        dx = x - self.center[0]
        dy = y - self.center[1]
        return (ca * dx - sa * dy + self.center[0] + self.t[0],
                sa * dx + ca * dy + self.center[1] + self.t[1])

    def inv(self, x: np.ndarray, y: np.ndarray):
        """Frame-2 point -> frame-1 point."""
        ca, sa = math.cos(-self.rot), math.sin(-self.rot)
        dx = x - self.center[0] - self.t[0]
        dy = y - self.center[1] - self.t[1]
        return (ca * dx - sa * dy + self.center[0],
                sa * dx + ca * dy + self.center[1])

    def contains2(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Support membership in frame-2 coordinates."""
        px, py = self.inv(x, y)
        return self.contains(px, py)


def _build_layers(rng: np.random.Generator, cfg: SceneConfig) -> list[_Layer]:
    h, w = cfg.height, cfg.width
    layers = []
    for _ in range(cfg.n_shapes):
        kind = "rect" if rng.random() < 0.5 else "disc"
        size = rng.uniform(cfg.min_shape_size, cfg.max_shape_size)
        margin = size / 2 + 1
        cx = rng.uniform(margin, w - margin)
        cy = rng.uniform(margin, h - margin)
        t = rng.uniform(-cfg.max_disp, cfg.max_disp, size=2)
        rot = math.radians(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
        if cfg.integer_motion:
            t = np.round(t)
            rot = 0.0
        if kind == "disc":
            half = size / 2.0
            angle = 0.0
        else:
            half = (size / 2.0, size / 2.0 * rng.uniform(0.6, 1.0))
            angle = rng.uniform(0, math.pi)
        tex = _Texture(rng, h, w, cfg.texture_cell, cfg.gradient_strength)
        layers.append(_Layer(kind, (cx, cy), half, angle, t, rot, tex))
    bg_t = rng.uniform(-cfg.background_disp, cfg.background_disp, size=2) \
        if cfg.background_disp > 0 else np.zeros(2)
    if cfg.integer_motion:
        bg_t = np.round(bg_t)
    bg_tex = _Texture(rng, h, w, cfg.texture_cell, cfg.gradient_strength)
    layers.append(_Layer("bg", (0.0, 0.0), None, 0.0, bg_t, 0.0, bg_tex))
    return layers


def gen_sample(seed: int, cfg: SceneConfig) -> SyntheticSample:
    """Deterministic sample for (seed, config)."""
    rng = np.random.default_rng(seed)
    layers = _build_layers(rng, cfg)
    h, w = cfg.height, cfg.width
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))

    member1 = np.stack([lay.contains(xs, ys) for lay in layers])
    vis1 = member1.argmax(axis=0)  # first True wins: shapes are ordered near to far
    member2 = np.stack([lay.contains2(xs, ys) for lay in layers])
    vis2 = member2.argmax(axis=0)

    image1 = np.zeros((h, w, 3))
    image2 = np.zeros((h, w, 3))
    flow = np.zeros((2, h, w))
    occluded = np.zeros((h, w), dtype=bool)
    valid = np.ones((h, w), dtype=bool)
    for li, lay in enumerate(layers):
        sel1 = vis1 == li
        if sel1.any():
            image1[sel1] = lay.tex(xs[sel1], ys[sel1])
            tx, ty = lay.fwd(xs[sel1], ys[sel1])
            flow[0][sel1] = tx - xs[sel1]
            flow[1][sel1] = ty - ys[sel1]
            inside = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
            covered = np.zeros(tx.shape, dtype=bool)
            for nearer in layers[:li]:
                covered |= nearer.contains2(tx, ty)
            occluded[sel1] = covered | ~inside
            valid[sel1] = inside
        sel2 = vis2 == li
        if sel2.any():
            px, py = lay.inv(xs[sel2], ys[sel2])
            image2[sel2] = lay.tex(px, py)

    def t(a, ch):
        return Tensor(np.ascontiguousarray(a, dtype=np.float32).reshape(1, ch, h, w))

    return SyntheticSample(
        image1=t(image1.transpose(2, 0, 1), 3),
        image2=t(image2.transpose(2, 0, 1), 3),
        flow=t(flow, 2),
        occlusion=t(occluded.astype(np.float32), 1),
        valid=t(valid.astype(np.float32), 1),
        meta={"seed": seed},
    )


def sample_seed(base_seed: int, index: int) -> int:
    """Splittable per-sample seed: independent streams for any index."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _workers() -> int:
    env = os.environ.get("FLOWFORGE_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def gen_batch(base_seed: int, start: int, count: int, cfg: SceneConfig) -> list[SyntheticSample]:
    """Samples ``start .. start+count-1`` of the stream rooted at ``base_seed``.

    The result is independent of worker count; FLOWFORGE_THREADS > 1 fans
    generation out over a thread pool.
    """
    seeds = [sample_seed(base_seed, start + i) for i in range(count)]
    nw = _workers()
    if nw <= 1 or count <= 1:
        return [gen_sample(s, cfg) for s in seeds]
    with ThreadPoolExecutor(max_workers=min(nw, count)) as pool:
        return list(pool.map(lambda s: gen_sample(s, cfg), seeds))
