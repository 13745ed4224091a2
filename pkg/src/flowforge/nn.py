"""Convolution kernels, bilinear upsampling, and the named parameter store.

Convolutions are im2col + one BLAS matmul per batch; the saved patch
matrix is reused by the backward pass.  Standard convolutions are 3x3,
transposed convolutions are 4x4/stride-2 (exact x2 upsampling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _fast_tensor, record_op

__all__ = [
    "ConvParams",
    "conv2d",
    "deconv2d",
    "upsample_bilinear",
    "upsample_bilinear_2x",
    "avgpool2x",
    "ParamStore",
    "kaiming_uniform",
]


@dataclass
class ConvParams:
    """Weights plus geometry for one (de)convolution layer.

    ``weight`` is (out_ch, in_ch, kh, kw); ``bias`` is (1, out_ch, 1, 1).
    ``leaky_slope`` is the slope of the activation that follows the layer
    (None for linear heads); the conv ops themselves never apply it.
    """

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 1
    dilation: int = 1
    leaky_slope: float | None = 0.1

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


def _pad_hw(xd: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return xd
    b, c, h, w = xd.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = xd
    return out


def _im2col(xd: np.ndarray, kh: int, kw: int, stride: int, pad: int, dil: int):
    """Return channel-major patches (B, C*kh*kw, OH*OW) plus output dims."""
    b, c, h, w = xd.shape
    eff_h = dil * (kh - 1) + 1
    eff_w = dil * (kw - 1) + 1
    oh = (h + 2 * pad - eff_h) // stride + 1
    ow = (w + 2 * pad - eff_w) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv geometry yields empty output: input {xd.shape}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {pad}, dilation {dil}"
        )
    xp = _pad_hw(xd, pad)
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xd.dtype)
    for iy in range(kh):
        ys = iy * dil
        for ix in range(kw):
            xs = ix * dil
            cols[:, :, iy, ix] = xp[:, :, ys : ys + stride * (oh - 1) + 1 : stride,
                                    xs : xs + stride * (ow - 1) + 1 : stride]
    return cols.reshape(b, c * kh * kw, oh * ow), oh, ow


def _col2im(gcols: np.ndarray, xshape, kh, kw, stride, pad, dil, oh, ow) -> np.ndarray:
    """Scatter patch gradients back to input layout (adjoint of _im2col)."""
    b, c, h, w = xshape
    g6 = gcols.reshape(b, c, kh, kw, oh, ow)
    gx = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for iy in range(kh):
        ys = iy * dil
        for ix in range(kw):
            xs = ix * dil
            gx[:, :, ys : ys + stride * oh : stride, xs : xs + stride * ow : stride] += g6[:, :, iy, ix]
    if pad:
        gx = np.ascontiguousarray(gx[:, :, pad:-pad, pad:-pad])
    return gx


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D convolution with bias, NCHW in/out."""
    o, c, kh, kw = p.weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {c}")
    b = x.shape[0]
    cols, oh, ow = _im2col(x.data, kh, kw, p.stride, p.padding, p.dilation)
    wmat = p.weight.data.reshape(o, c * kh * kw)
    y = np.matmul(wmat, cols).reshape(b, o, oh, ow)
    y += p.bias.data
    out = _fast_tensor(y, x.requires_grad or p.weight.requires_grad or p.bias.requires_grad)

    xshape, stride, pad, dil = x.shape, p.stride, p.padding, p.dilation
    need_x = x.requires_grad

    def bwd(g):
        gmat = g.reshape(b, o, oh * ow)
        gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, kh, kw)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
        gx = None
        if need_x:
            pad_t = dil * (kh - 1) - pad
            if stride == 1 and pad_t >= 0:
                # input grad = conv of g with the spatially flipped kernel
                wrot = np.ascontiguousarray(
                    p.weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                ).reshape(c, o * kh * kw)
                gc, gih, giw = _im2col(g, kh, kw, 1, pad_t, dil)
                gx = np.matmul(wrot, gc).reshape(b, c, gih, giw)
            else:
                gcols = np.matmul(wmat.T, gmat)
                gx = _col2im(gcols, xshape, kh, kw, stride, pad, dil, oh, ow)
        return gx, gw, gb

    return record_op(out, (x, p.weight, p.bias), bwd)


def deconv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Transposed convolution; restricted to the exact-doubling geometry.

    Requires kernel 4, stride 2, padding 1 so the output is (B, O, 2H, 2W);
    other parameterizations are rejected.  The input gradient is the plain
    forward convolution of the output gradient with the same weights.
    """
    o, c, kh, kw = p.weight.shape
    if not (kh == 4 and kw == 4 and p.stride == 2 and p.padding == 1):
        raise ShapeError(
            f"deconv2d requires kernel 4, stride 2, padding 1 (exact 2x); got "
            f"kernel {kh}x{kw}, stride {p.stride}, padding {p.padding}"
        )
    if x.shape[1] != c:
        raise ShapeError(f"deconv2d: input has {x.shape[1]} channels, weight expects {c}")
    b, _, h, w = x.shape
    wd, xd = p.weight.data, x.data
    wfull = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(o * 16, c)
    tmp = np.matmul(wfull, xd.reshape(b, c, h * w)).reshape(b, o, 4, 4, h, w)
    buf = np.zeros((b, o, 2 * h + 2, 2 * w + 2), dtype=xd.dtype)
    for ky in range(4):
        for kx in range(4):
            buf[:, :, ky : ky + 2 * h : 2, kx : kx + 2 * w : 2] += tmp[:, :, ky, kx]
    y = np.ascontiguousarray(buf[:, :, 1 : 1 + 2 * h, 1 : 1 + 2 * w])
    y += p.bias.data
    out = _fast_tensor(y, x.requires_grad or p.weight.requires_grad or p.bias.requires_grad)

    def bwd(g):
        # grad wrt input: conv of g with the same weights (stride 2, pad 1)
        gcols, goh, gow = _im2col(g, 4, 4, 2, 1, 1)  # (B, O*16, H*W)
        gx = None
        if x.requires_grad:
            gx = np.matmul(wfull.T, gcols).reshape(b, c, goh, gow)
        xmat = xd.reshape(b, c, h * w).transpose(0, 2, 1)
        gw = np.matmul(gcols, xmat).sum(axis=0).reshape(o, 4, 4, c).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
        return gx, np.ascontiguousarray(gw), gb

    return record_op(out, (x, p.weight, p.bias), bwd)


# ---------------------------------------------------------------------------
# Bilinear resampling on the regular grid
# ---------------------------------------------------------------------------

_LERP_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _upsample_matrix(n: int, factor: int, dtype) -> np.ndarray:
    """(factor*n, n) interpolation matrix, align-corners=false, edge clamp."""
    key = (n, factor, np.dtype(dtype).str)
    mat = _LERP_CACHE.get(key)
    if mat is None:
        m = factor * n
        src = (np.arange(m, dtype=np.float64) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, n - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n - 1)
        w1 = src - i0
        mat = np.zeros((m, n), dtype=np.float64)
        mat[np.arange(m), i0] += 1.0 - w1
        mat[np.arange(m), i1] += w1
        mat = mat.astype(dtype)
        _LERP_CACHE[key] = mat
    return mat


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (align-corners=false)."""
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    b, c, h, w = x.shape
    ah = _upsample_matrix(h, factor, x.dtype)
    aw = _upsample_matrix(w, factor, x.dtype)
    flat = x.data.reshape(b * c, h, w)
    y = ah @ flat @ aw.T
    out = Tensor(y.reshape(b, c, factor * h, factor * w), requires_grad=x.requires_grad)

    def bwd(g):
        gf = g.reshape(b * c, factor * h, factor * w)
        gx = ah.T @ gf @ aw
        return (np.ascontiguousarray(gx.reshape(b, c, h, w)),)

    return record_op(out, (x,), bwd)


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    return upsample_bilinear(x, 2)


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 average pooling (the bilinear-average downscale used on ground truth)."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x needs even spatial dims, got {h}x{w}")
    y = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx.astype(x.dtype, copy=False),)

    return record_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.1, dtype=np.float32) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Named parameter registry in canonical (creation) order.

    Checkpoints serialize parameters in this order; freezing flips
    ``requires_grad`` off for a whole name prefix (e.g. ``stage1.``).
    """

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data.astype(self.dtype, copy=False), requires_grad=True)
        self._params[name] = t
        return t

    def conv(self, name: str, in_ch: int, out_ch: int, k: int = 3,
             stride: int = 1, padding: int | None = None, dilation: int = 1,
             slope: float | None = 0.1, init_scale: float = 1.0) -> ConvParams:
        if padding is None:
            padding = dilation * (k - 1) // 2
        fan_in = in_ch * k * k
        w = kaiming_uniform(self.rng, (out_ch, in_ch, k, k), fan_in, dtype=self.dtype)
        if init_scale != 1.0:
            w = w * np.asarray(init_scale, dtype=self.dtype)
        w = self.add(f"{name}.weight", w)
        b = self.add(f"{name}.bias", np.zeros((1, out_ch, 1, 1), dtype=self.dtype))
        return ConvParams(w, b, stride=stride, padding=padding, dilation=dilation, leaky_slope=slope)

    def deconv(self, name: str, in_ch: int, out_ch: int, slope: float | None = 0.1) -> ConvParams:
        fan_in = in_ch * 16
        w = self.add(f"{name}.weight",
                     kaiming_uniform(self.rng, (out_ch, in_ch, 4, 4), fan_in, dtype=self.dtype))
        b = self.add(f"{name}.bias", np.zeros((1, out_ch, 1, 1), dtype=self.dtype))
        return ConvParams(w, b, stride=2, padding=1, leaky_slope=slope)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def freeze(self, prefix: str = "") -> None:
        for n, t in self._params.items():
            if n.startswith(prefix):
                t.requires_grad = False

    def frozen_names(self) -> list[str]:
        return [n for n, t in self._params.items() if not t.requires_grad]

    def param_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = [n for n in self._params if n not in arrays]
        extra = [n for n in arrays if n not in self._params]
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={missing[:4]} extra={extra[:4]}")
        for n, t in self._params.items():
            a = arrays[n]
            if tuple(a.shape) != t.shape:
                raise ValueError(f"shape mismatch for {n!r}: checkpoint {a.shape} vs model {t.shape}")
            t.data = np.ascontiguousarray(a.astype(self.dtype, copy=False))
