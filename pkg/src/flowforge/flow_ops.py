"""Differentiable matching primitives: warp, correlation, flow-displaced
deformable convolution, and the multiplicative mask with additive trade-off.

Conventions shared by every op here:

* flow fields are (B, 2, H, W); channel 0 is the horizontal displacement u
  (+x, rightward), channel 1 the vertical displacement v (+y, downward),
  in pixels at the map's own resolution;
* samples outside the frame read as zero (zero padding);
* bilinear sampling differentiates w.r.t. coordinates with the
  piecewise-constant spatial derivative, taking the left cell at exact
  integer coordinates.
"""

from __future__ import annotations

import numpy as np

from .nn import ConvParams
from .tensor import ShapeError, Tensor, record_op

__all__ = ["warp", "correlate", "deform_conv", "mask_tradeoff"]


def _check_flow(f: Tensor, flow: Tensor, op: str) -> None:
    fb, _, fh, fw = f.shape
    if flow.shape != (fb, 2, fh, fw):
        raise ShapeError(
            f"{op}: flow must be ({fb}, 2, {fh}, {fw}) to match features {f.shape}, "
            f"got {flow.shape}"
        )


def _gather_corners(fd: np.ndarray, sx: np.ndarray, sy: np.ndarray):
    """Bilinear samples of ``fd`` (B,C,H,W) at coords (B,K,H,W).

    Returns (values (B,C,K,H,W), ctx) where ctx carries what the backward
    passes need.  ceil-1 indexing puts exact integer coordinates in the
    left/upper cell.
    """
    b, c, h, w = fd.shape
    k = sx.shape[1]
    n = k * h * w
    x0 = np.ceil(sx) - 1.0
    y0 = np.ceil(sy) - 1.0
    fx = (sx - x0).reshape(b, 1, n)
    fy = (sy - y0).reshape(b, 1, n)
    x0 = x0.astype(np.int64).reshape(b, 1, n)
    y0 = y0.astype(np.int64).reshape(b, 1, n)

    fflat = fd.reshape(b, c, h * w)
    vals = []
    idxs = []
    weights = []
    for dy in (0, 1):
        yc = y0 + dy
        wy = fy if dy else 1.0 - fy
        yin = (yc >= 0) & (yc < h)
        for dx in (0, 1):
            xc = x0 + dx
            wx = fx if dx else 1.0 - fx
            ok = yin & (xc >= 0) & (xc < w)
            idx = np.where(ok, yc * w + xc, 0)
            v = np.take_along_axis(fflat, idx, axis=2)
            v *= ok
            vals.append(v)
            idxs.append((idx, ok))
            weights.append((wx * wy).astype(fd.dtype, copy=False))
    out = sum(v * wgt for v, wgt in zip(vals, weights))
    ctx = (vals, idxs, weights, fx, fy, (b, c, h, w, k, n))
    return out.reshape(b, c, k, h, w), ctx


def _corner_scatter(g: np.ndarray, ctx) -> np.ndarray:
    """Adjoint of the gather: route sample gradients back to the feature map."""
    vals, idxs, weights, _, _, (b, c, h, w, k, n) = ctx
    gflat = g.reshape(b, c, n)
    base = (np.arange(b, dtype=np.int64)[:, None, None] * c
            + np.arange(c, dtype=np.int64)[None, :, None]) * (h * w)
    acc = np.zeros(b * c * h * w, dtype=g.dtype)
    for (idx, ok), wgt in zip(idxs, weights):
        contrib = gflat * wgt * ok
        flat_idx = (base + idx).ravel()
        acc += np.bincount(flat_idx, weights=contrib.ravel(), minlength=acc.size).astype(
            g.dtype, copy=False
        )
    return acc.reshape(b, c, h, w)


def _coord_grads(g: np.ndarray, ctx):
    """Gradients w.r.t. the sample coordinates, summed over channels."""
    vals, _, _, fx, fy, (b, c, h, w, k, n) = ctx
    v00, v10, v01, v11 = vals  # order: (dy,dx) = (0,0),(0,1),(1,0),(1,1)
    dsx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
    dsy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10)
    gflat = g.reshape(b, c, n)
    gx = (gflat * dsx).sum(axis=1).reshape(b, k, h, w)
    gy = (gflat * dsy).sum(axis=1).reshape(b, k, h, w)
    return gx, gy


def _pixel_grid(b: int, h: int, w: int, k: int, dtype):
    gx = np.broadcast_to(np.arange(w, dtype=dtype), (b, k, h, w))
    gy = np.broadcast_to(np.arange(h, dtype=dtype)[:, None], (b, k, h, w))
    return gx, gy


def warp(f: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp ``f`` along ``flow``: out(x) = f(x + flow(x)).

    Bilinear sampling, zero outside the frame; differentiable w.r.t. both
    the features and the flow.
    """
    _check_flow(f, flow, "warp")
    b, c, h, w = f.shape
    gx, gy = _pixel_grid(b, h, w, 1, f.dtype)
    sx = gx + flow.data[:, 0:1]
    sy = gy + flow.data[:, 1:2]
    vals, ctx = _gather_corners(f.data, sx, sy)
    out = Tensor(vals.reshape(b, c, h, w), requires_grad=f.requires_grad or flow.requires_grad)

    def bwd(g):
        g = g.reshape(b, c, 1, h, w)
        gf = _corner_scatter(g, ctx) if f.requires_grad else None
        gflow = None
        if flow.requires_grad:
            gu, gv = _coord_grads(g, ctx)
            gflow = np.concatenate([gu, gv], axis=1)
        return gf, gflow

    return record_op(out, (f, flow), bwd)


def correlate(f1: Tensor, f2: Tensor, d: int) -> Tensor:
    """Local correlation cost volume within displacement radius ``d``.

    Channel k = (dy+d)*(2d+1) + (dx+d) holds the channel-normalized dot
    product between f1 at (y, x) and f2 at (y+dy, x+dx); out-of-frame f2
    samples read as zero.  Output has (2d+1)^2 channels.
    """
    d = int(d)
    if d < 0:
        raise ShapeError(f"correlate: maximum displacement must be >= 0, got {d}")
    if f1.shape != f2.shape:
        raise ShapeError(f"correlate: feature shapes differ: {f1.shape} vs {f2.shape}")
    b, c, h, w = f1.shape
    side = 2 * d + 1
    f2p = np.pad(f2.data, ((0, 0), (0, 0), (d, d), (d, d)))
    inv_c = 1.0 / c
    out_data = np.empty((b, side * side, h, w), dtype=f1.dtype)
    k = 0
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            sl = f2p[:, :, dy + d : dy + d + h, dx + d : dx + d + w]
            out_data[:, k] = (f1.data * sl).sum(axis=1) * inv_c
            k += 1
    out = Tensor(out_data, requires_grad=f1.requires_grad or f2.requires_grad)
    f1d = f1.data

    def bwd(g):
        g1 = np.zeros_like(f1d) if f1.requires_grad else None
        g2p = np.zeros_like(f2p) if f2.requires_grad else None
        k = 0
        for dy in range(-d, d + 1):
            for dx in range(-d, d + 1):
                gk = g[:, k : k + 1] * inv_c
                if g1 is not None:
                    g1 += gk * f2p[:, :, dy + d : dy + d + h, dx + d : dx + d + w]
                if g2p is not None:
                    g2p[:, :, dy + d : dy + d + h, dx + d : dx + d + w] += gk * f1d
                k += 1
        g2 = None
        if g2p is not None:
            g2 = g2p[:, :, d : d + h, d : d + w] if d else g2p
            g2 = np.ascontiguousarray(g2)
        return g1, g2

    return record_op(out, (f1, f2), bwd)


def deform_conv(f: Tensor, flow: Tensor, p: ConvParams) -> Tensor:
    """3x3 convolution whose taps ride the center pixel's flow.

    out(x) = sum_k w_k . f(x + k + flow(x)) + bias: every tap shares the
    displacement at the kernel center and samples the *unwarped* map
    bilinearly, so interpolation happens before the weighted sum.
    """
    o, c, kh, kw = p.weight.shape
    if kh != 3 or kw != 3 or p.stride != 1 or p.padding != 1:
        raise ShapeError(
            f"deform_conv requires a 3x3 kernel, stride 1, padding 1; got "
            f"kernel {kh}x{kw}, stride {p.stride}, padding {p.padding}"
        )
    if f.shape[1] != c:
        raise ShapeError(f"deform_conv: input has {f.shape[1]} channels, weight expects {c}")
    _check_flow(f, flow, "deform_conv")
    b, _, h, w = f.shape
    gx, gy = _pixel_grid(b, h, w, 9, f.dtype)
    offs = np.array([(ky - 1, kx - 1) for ky in range(3) for kx in range(3)], dtype=f.dtype)
    sx = gx + offs[:, 1][None, :, None, None] + flow.data[:, 0:1]
    sy = gy + offs[:, 0][None, :, None, None] + flow.data[:, 1:2]
    samples, ctx = _gather_corners(f.data, sx, sy)  # (B,C,9,H,W)
    smat = samples.reshape(b, c * 9, h * w)
    wmat = p.weight.data.reshape(o, c * 9)
    y = np.matmul(wmat, smat).reshape(b, o, h, w) + p.bias.data
    out = Tensor(
        y,
        requires_grad=f.requires_grad or flow.requires_grad
        or p.weight.requires_grad or p.bias.requires_grad,
    )

    def bwd(g):
        gmat = g.reshape(b, o, h * w)
        gw = np.matmul(gmat, smat.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 3, 3)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1)
        gf = gflow = None
        if f.requires_grad or flow.requires_grad:
            gs = np.matmul(wmat.T, gmat).reshape(b, c, 9, h, w)
            if f.requires_grad:
                gf = _corner_scatter(gs, ctx)
            if flow.requires_grad:
                gu, gv = _coord_grads(gs, ctx)
                gflow = np.concatenate([gu.sum(axis=1, keepdims=True),
                                        gv.sum(axis=1, keepdims=True)], axis=1)
        return gf, gflow, gw, gb

    return record_op(out, (f, flow, p.weight, p.bias), bwd)


def mask_tradeoff(warped: Tensor, theta: Tensor, mu: Tensor) -> Tensor:
    """Occlusion-gated features: warped (x) theta (+) mu, theta broadcast
    across channels."""
    if warped.shape != mu.shape:
        raise ShapeError(f"mask_tradeoff: warped {warped.shape} and mu {mu.shape} must match")
    b, c, h, w = warped.shape
    if theta.shape != (b, 1, h, w):
        raise ShapeError(
            f"mask_tradeoff: theta must be ({b}, 1, {h}, {w}) to broadcast over channels, "
            f"got {theta.shape}"
        )
    out_data = warped.data * theta.data + mu.data
    out = Tensor(out_data, requires_grad=warped.requires_grad or theta.requires_grad or mu.requires_grad)

    def bwd(g):
        gw = g * theta.data if warped.requires_grad else None
        gt = (g * warped.data).sum(axis=1, keepdims=True) if theta.requires_grad else None
        gm = g if mu.requires_grad else None
        return gw, gt, gm

    return record_op(out, (warped, theta, mu), bwd)
