"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

__all__ = ["check_image_pairs", "check_flow_targets", "check_valid_masks"]


def check_image_pairs(X) -> np.ndarray:
    """Coerce to (N, 2, 3, H, W) float32 in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5 or X.shape[1] != 2 or X.shape[2] != 3:
        raise ValueError(
            f"X must be (n_samples, 2, 3, H, W) image pairs, got shape {X.shape}"
        )
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if X.min() < -1e-6 or X.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_flow_targets(y, n_samples: int, hw: tuple[int, int]) -> np.ndarray:
    """Coerce to (N, 2, H, W) float32 matching the images."""
    y = np.asarray(y, dtype=np.float32)
    if y.ndim != 4 or y.shape[1] != 2:
        raise ValueError(f"y must be (n_samples, 2, H, W) flow fields, got shape {y.shape}")
    if y.shape[0] != n_samples or y.shape[2:] != hw:
        raise ValueError(
            f"y shape {y.shape} does not match X: expected ({n_samples}, 2, {hw[0]}, {hw[1]})"
        )
    if not np.isfinite(y).all():
        raise ValueError("y contains non-finite values")
    return y


def check_valid_masks(valid, n_samples: int, hw: tuple[int, int]) -> np.ndarray:
    """Coerce to a binary (N, 1, H, W) float32 mask (default: all valid)."""
    if valid is None:
        return np.ones((n_samples, 1, *hw), dtype=np.float32)
    valid = np.asarray(valid, dtype=np.float32)
    if valid.ndim == 3:
        valid = valid[:, None]
    if valid.shape != (n_samples, 1, *hw):
        raise ValueError(
            f"valid mask shape {valid.shape} does not match ({n_samples}, 1, {hw[0]}, {hw[1]})"
        )
    uniq = np.unique(valid)
    if not np.isin(uniq, (0.0, 1.0)).all():
        raise ValueError("valid mask must be binary")
    return valid
