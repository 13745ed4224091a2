"""Central finite-difference gradient verification.

Each registered check builds small f64 inputs, reduces the op through a
fixed random projection to a scalar, and compares tape gradients against
central differences.  Inputs that sit on non-differentiable points
(leaky-relu kink, bilinear integer lattice) are nudged away per check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flow_ops, nn
from .tensor import Tape, Tensor, mul, sum_all, tensor

__all__ = ["finite_diff", "relative_errors", "run_check", "registered_ops", "GradReport"]

DEFAULT_H = 1e-5


@dataclass
class GradReport:
    op: str
    max_rel_err: float
    per_input: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_err < tol


def finite_diff(fn, arrays: list[np.ndarray], h: float = DEFAULT_H) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``fn(arrays)`` per array element."""
    grads = []
    for ai, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(arrays)
            flat[i] = orig - h
            fm = fn(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max relative error where the reference gradient magnitude exceeds ``floor``."""
    denom = np.maximum(np.abs(numeric), np.abs(analytic))
    mask = denom > floor
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric)[mask] / denom[mask]).max())


def _projection(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _scalar_loss(out: Tensor, proj: np.ndarray) -> Tensor:
    return sum_all(mul(out, tensor(proj)))


def _off_lattice_flow(rng: np.random.Generator, shape, lo=-1.6, hi=1.6, margin=0.15) -> np.ndarray:
    """Random flow whose coordinates stay >= margin away from integers."""
    base = rng.integers(int(np.floor(lo)), int(np.ceil(hi)), size=shape).astype(np.float64)
    frac = rng.uniform(margin, 1.0 - margin, size=shape)
    return base + frac


def _check(fn_build, seed: int, h: float) -> tuple[float, dict[str, float]]:
    """fn_build(rng) -> (named arrays, forward(tensors)->Tensor)."""
    rng = np.random.default_rng(seed)
    named, forward = fn_build(rng)
    names = list(named)
    tensors = {n: tensor(named[n], requires_grad=True) for n in names}

    with Tape() as tape:
        out = forward(tensors)
        proj = _projection(np.random.default_rng(seed + 1), out.shape)
        loss = _scalar_loss(out, proj)
    analytic = tape.gradients(loss, [tensors[n] for n in names])

    def scalar_fn(arrays):
        local = {n: tensor(a) for n, a in zip(names, arrays)}
        o = forward(local)
        return float((o.data * proj).sum())

    numeric = finite_diff(scalar_fn, [named[n].copy() for n in names], h=h)
    per = {n: relative_errors(a, g) for n, a, g in zip(names, analytic, numeric)}
    return max(per.values()), per


# --- individual op builders -------------------------------------------------


def _build_conv2d(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal((1, 4, 1, 1)) * 0.1
    p = lambda ts: nn.ConvParams(ts["weight"], ts["bias"], stride=1, padding=1)
    return {"x": x, "weight": w, "bias": b}, lambda ts: nn.conv2d(ts["x"], p(ts))


def _build_conv2d_stride2(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal((1, 4, 1, 1)) * 0.1
    p = lambda ts: nn.ConvParams(ts["weight"], ts["bias"], stride=2, padding=1)
    return {"x": x, "weight": w, "bias": b}, lambda ts: nn.conv2d(ts["x"], p(ts))


def _build_deconv2d(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((2, 3, 4, 4)) * 0.5
    b = rng.standard_normal((1, 2, 1, 1)) * 0.1
    p = lambda ts: nn.ConvParams(ts["weight"], ts["bias"], stride=2, padding=1)
    return {"x": x, "weight": w, "bias": b}, lambda ts: nn.deconv2d(ts["x"], p(ts))


def _build_leaky_relu(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    x += np.sign(x) * 0.1  # keep clear of the kink
    from .tensor import leaky_relu

    return {"x": x}, lambda ts: leaky_relu(ts["x"], 0.1)


def _build_sigmoid(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    from .tensor import sigmoid

    return {"x": x}, lambda ts: sigmoid(ts["x"])


def _build_upsample(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    return {"x": x}, lambda ts: nn.upsample_bilinear_2x(ts["x"])


def _build_warp(rng):
    f = rng.standard_normal((1, 3, 6, 6))
    flow = _off_lattice_flow(rng, (1, 2, 6, 6))
    return {"f": f, "flow": flow}, lambda ts: flow_ops.warp(ts["f"], ts["flow"])


def _build_correlate(rng):
    f1 = rng.standard_normal((1, 3, 6, 6))
    f2 = rng.standard_normal((1, 3, 6, 6))
    return {"f1": f1, "f2": f2}, lambda ts: flow_ops.correlate(ts["f1"], ts["f2"], 2)


def _build_deform_conv(rng):
    f = rng.standard_normal((1, 3, 6, 6))
    flow = _off_lattice_flow(rng, (1, 2, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal((1, 4, 1, 1)) * 0.1
    p = lambda ts: nn.ConvParams(ts["weight"], ts["bias"], stride=1, padding=1)
    return {"f": f, "flow": flow, "weight": w, "bias": b}, lambda ts: flow_ops.deform_conv(
        ts["f"], ts["flow"], p(ts)
    )


def _build_mask_tradeoff(rng):
    warped = rng.standard_normal((2, 3, 4, 4))
    theta = rng.uniform(0.05, 0.95, (2, 1, 4, 4))
    mu = rng.standard_normal((2, 3, 4, 4))
    return {"warped": warped, "theta": theta, "mu": mu}, lambda ts: flow_ops.mask_tradeoff(
        ts["warped"], ts["theta"], ts["mu"]
    )


def _build_decoder(rng):
    # Composed per-level decoder: dense conv block + flow/theta heads, as a
    # model-shaped integration check on small widths.
    from .model import DecoderLevel, ModelConfig

    cfg = ModelConfig(
        pyramid_channels=(4, 4, 4, 4, 4, 4),
        decoder_widths=(6, 6, 5, 4, 3),
        context_widths=(6, 6, 6, 5, 4, 3),
        upfeat_channels=3,
        max_displacement=1,
    )
    store = nn.ParamStore(np.random.default_rng(7), dtype=np.float64)
    dec = DecoderLevel(store, "dec", level=3, cfg=cfg, stage=1, cost_channels=9)
    cost = rng.standard_normal((1, 9, 4, 4)) * 0.5
    feat1 = rng.standard_normal((1, 4, 4, 4)) * 0.5
    up_flow = _off_lattice_flow(rng, (1, 2, 4, 4)) * 0.1
    up_mu = rng.standard_normal((1, 4, 4, 4)) * 0.5

    def forward(ts):
        res = dec.decode(ts["cost"], ts["feat1"], ts["up_flow"], ts["up_mu"])
        from .tensor import concat_channels

        return concat_channels([res.flow, res.theta_logits])

    return {
        "cost": cost,
        "feat1": feat1,
        "up_flow": up_flow,
        "up_mu": up_mu,
    }, forward


_REGISTRY = {
    "conv2d": _build_conv2d,
    "conv2d_stride2": _build_conv2d_stride2,
    "deconv2d": _build_deconv2d,
    "leaky_relu": _build_leaky_relu,
    "sigmoid": _build_sigmoid,
    "upsample_bilinear_2x": _build_upsample,
    "warp": _build_warp,
    "correlate": _build_correlate,
    "deform_conv": _build_deform_conv,
    "mask_tradeoff": _build_mask_tradeoff,
    "decoder": _build_decoder,
}


def registered_ops() -> list[str]:
    return list(_REGISTRY)


def run_check(op: str, seed: int = 0, h: float = DEFAULT_H) -> GradReport:
    if op not in _REGISTRY:
        raise KeyError(f"unknown op {op!r}; known: {', '.join(_REGISTRY)}")
    worst, per = _check(_REGISTRY[op], seed, h)
    return GradReport(op=op, max_rel_err=worst, per_input=per)
