"""Training objectives and evaluation metrics.

The multi-scale loss compares decoder outputs (network units: per-level
pixels divided by the flow scale) against ground truth downscaled to each
level; AEPE and the outlier percentage operate on full-resolution flows in
real pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    abs_,
    add_scalar,
    l2norm_channels,
    mul,
    pow_scalar,
    scale,
    sub,
    sum_all,
    sum_channels,
    tensor,
)

__all__ = [
    "LossConfig",
    "downscale_targets",
    "multiscale_epe",
    "aepe",
    "fl_all",
    "format_metrics_line",
]


@dataclass
class LossConfig:
    """Per-level weights for levels 2..6 plus the robust-loss knobs."""

    weights: tuple[float, ...] = (0.005, 0.01, 0.02, 0.08, 0.32)
    robust: bool = False
    q: float = 0.4
    eps: float = 0.01
    flow_scale: float = 20.0

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ValueError("loss weights must be non-negative")
        if not (0.0 < self.q <= 1.0):
            raise ValueError(f"robust exponent q must be in (0, 1], got {self.q}")
        if self.eps <= 0:
            raise ValueError(f"robust epsilon must be > 0, got {self.eps}")

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "robust": self.robust, "q": self.q,
                "eps": self.eps, "flow_scale": self.flow_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = tuple(d["weights"])
        return cls(**d)


def _avgpool2x_np(a: np.ndarray) -> np.ndarray:
    b, c, h, w = a.shape
    return a.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def downscale_targets(gt: np.ndarray, valid: np.ndarray, flow_scale: float,
                      levels=range(2, 7)):
    """Ground truth per level: validity-weighted 2x2 average pooling, flow
    values halved per level (pixel units follow the resolution) and divided
    by the flow scale.  Returns [(gt_level, valid_level), ...] in ``levels``
    order; fully-invalid cells get flow 0 and weight 0.
    """
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=np.float64)
    out = []
    gv = gt * valid
    v = valid
    max_level = max(levels)
    per_level = {}
    for lvl in range(1, max_level + 1):
        gv = _avgpool2x_np(gv)
        v = _avgpool2x_np(v)
        if lvl in levels:
            safe = np.where(v > 0, v, 1.0)
            gt_l = (gv / safe) * 0.5 ** lvl / flow_scale
            per_level[lvl] = (gt_l, v.copy())
    for lvl in levels:
        out.append(per_level[lvl])
    return out


def multiscale_epe(preds: list[Tensor], gt: Tensor, valid: Tensor,
                   cfg: LossConfig) -> Tensor:
    """Weighted sum over levels 2..6 of the mean per-pixel flow error.

    ``preds`` is ordered fine to coarse (level 2 first), in network units;
    ``gt``/``valid`` are full-resolution.  Non-robust uses the L2 norm; the
    robust variant uses (L1 + eps)^q per pixel.  Means are weighted by the
    downscaled valid mask.
    """
    if len(preds) != len(cfg.weights):
        raise ShapeError(
            f"multiscale_epe: got {len(preds)} level predictions for "
            f"{len(cfg.weights)} weights"
        )
    targets = downscale_targets(gt.data, valid.data, cfg.flow_scale,
                                levels=range(2, 2 + len(preds)))
    total: Tensor | None = None
    for pred, w, (gt_l, v_l) in zip(preds, cfg.weights, targets):
        if pred.shape[2:] != gt_l.shape[2:]:
            raise ShapeError(
                f"multiscale_epe: prediction {pred.shape} does not match "
                f"downscaled target {gt_l.shape}"
            )
        diff = sub(pred, tensor(gt_l.astype(pred.dtype, copy=False)))
        if cfg.robust:
            per_px = pow_scalar(add_scalar(sum_channels(abs_(diff)), cfg.eps), cfg.q)
        else:
            per_px = l2norm_channels(diff)
        vsum = float(v_l.sum())
        if vsum <= 0:
            continue
        weighted = mul(per_px, tensor(v_l.astype(pred.dtype, copy=False)))
        term = scale(sum_all(weighted), w / vsum)
        total = term if total is None else _add_scalars(total, term)
    if total is None:
        raise ShapeError("multiscale_epe: no valid pixels at any level")
    return total


def _add_scalars(a: Tensor, b: Tensor) -> Tensor:
    from .tensor import add

    return add(a, b)


def _metric_inputs(pred, gt, valid):
    pd = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    gd = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    vd = valid.data if isinstance(valid, Tensor) else np.asarray(valid)
    if pd.shape != gd.shape or pd.ndim != 4 or pd.shape[1] != 2:
        raise ShapeError(f"flow metric: pred {pd.shape} / gt {gd.shape} must be equal (B,2,H,W)")
    if vd.shape != (pd.shape[0], 1, pd.shape[2], pd.shape[3]):
        raise ShapeError(f"flow metric: valid mask {vd.shape} does not match flows {pd.shape}")
    mask = vd[:, 0] > 0.5
    if not mask.any():
        raise ValueError("no valid pixels")
    return pd.astype(np.float64), gd.astype(np.float64), mask


def aepe(pred, gt, valid) -> float:
    """Average end-point error over valid pixels, in pixels."""
    pd, gd, mask = _metric_inputs(pred, gt, valid)
    err = np.sqrt(((pd - gd) ** 2).sum(axis=1))
    return float(err[mask].mean())


def fl_all(pred, gt, valid) -> float:
    """Percentage of valid pixels whose error exceeds 3 px and 5% of the
    ground-truth magnitude."""
    pd, gd, mask = _metric_inputs(pred, gt, valid)
    err = np.sqrt(((pd - gd) ** 2).sum(axis=1))
    mag = np.sqrt((gd ** 2).sum(axis=1))
    outlier = (err > 3.0) & (err > 0.05 * mag)
    return float(outlier[mask].mean() * 100.0)


def format_metrics_line(step: int, loss: float, aepe_val: float, fl_val: float) -> str:
    return f"step={step} loss={loss:.6g} aepe={aepe_val:.6g} fl_all={fl_val:.6g}"
