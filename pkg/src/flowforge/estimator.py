"""Scikit-learn style estimator around the flow networks.

``FlowEstimator`` is a supervised regressor: ``fit(X, y)`` takes image
pairs (N, 2, 3, H, W) and dense flow targets (N, 2, H, W); ``predict``
returns flows in pixels.  Hyperparameters follow sklearn conventions
(``get_params`` / ``set_params`` / ``clone`` all work), and ``score``
returns the negative average end-point error so that greater is better.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .config import OptimizerConfig
from .losses import LossConfig, aepe, multiscale_epe
from .model import ModelConfig, build_model
from .tensor import Tape, Tensor
from .train import Adam, pad_to_multiple
from .validation import check_flow_targets, check_image_pairs, check_valid_masks

__all__ = ["FlowEstimator"]


class FlowEstimator(RegressorMixin, BaseEstimator):
    """Coarse-to-fine optical flow regressor with a learnable occlusion mask.

    Parameters mirror the run-config fields; ``stage=2`` trains the
    cascaded refinement on top of a frozen copy of the stage-1 weights
    (provide them via ``stage1_params``).
    """

    def __init__(self, stage=1, variant="asym-ofmm",
                 pyramid_channels=(8, 8, 8, 8, 8, 8), pyramid_convs=2,
                 decoder_widths=(24, 24, 16, 16, 8),
                 context_widths=(16, 16, 16, 16, 8, 8), upfeat_channels=8,
                 use_mask=True, use_tradeoff=True,
                 lr=2e-3, iterations=500, batch_size=4, decay_steps=(), decay_factor=0.5,
                 robust_loss=False, seed=0, stage1_params=None):
        self.stage = stage
        self.variant = variant
        self.pyramid_channels = pyramid_channels
        self.pyramid_convs = pyramid_convs
        self.decoder_widths = decoder_widths
        self.context_widths = context_widths
        self.upfeat_channels = upfeat_channels
        self.use_mask = use_mask
        self.use_tradeoff = use_tradeoff
        self.lr = lr
        self.iterations = iterations
        self.batch_size = batch_size
        self.decay_steps = decay_steps
        self.decay_factor = decay_factor
        self.robust_loss = robust_loss
        self.seed = seed
        self.stage1_params = stage1_params

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            pyramid_channels=tuple(self.pyramid_channels),
            pyramid_convs=self.pyramid_convs,
            decoder_widths=tuple(self.decoder_widths),
            context_widths=tuple(self.context_widths),
            upfeat_channels=self.upfeat_channels,
            variant=self.variant,
            use_mask=self.use_mask,
            use_tradeoff=self.use_tradeoff,
            stage=self.stage,
        )

    def fit(self, X, y, valid=None):
        X = check_image_pairs(X)
        n, hw = X.shape[0], X.shape[3:]
        y = check_flow_targets(y, n, hw)
        valid = check_valid_masks(valid, n, hw)
        if hw[0] % 64 or hw[1] % 64:
            raise ValueError(f"training images must have sides divisible by 64, got {hw}")

        cfg = self._model_config()
        model = build_model(cfg, seed=self.seed)
        if self.stage == 2:
            if self.stage1_params is None:
                raise ValueError("stage=2 requires stage1_params (a fitted stage-1 "
                                 "FlowEstimator's params_)")
            model.load_stage1(self.stage1_params)
            model.freeze_stage1()

        loss_cfg = LossConfig(robust=self.robust_loss)
        opt = OptimizerConfig(lr=self.lr, batch_size=self.batch_size,
                              iterations=self.iterations,
                              decay_steps=tuple(self.decay_steps),
                              decay_factor=self.decay_factor)
        trainable = [t for _, t in model.store.trainable()]
        adam = Adam(trainable)
        rng = np.random.default_rng(self.seed)
        self.loss_curve_ = []
        for step in range(self.iterations):
            idx = rng.integers(0, n, size=min(self.batch_size, n))
            img1 = Tensor(X[idx, 0])
            img2 = Tensor(X[idx, 1])
            gt = Tensor(y[idx])
            vm = Tensor(valid[idx])
            with Tape() as tape:
                result = model.forward(img1, img2)
                loss = multiscale_epe(result.level_flows(), gt, vm, loss_cfg)
            adam.step(tape.gradients(loss, trainable), opt.lr_at(step))
            self.loss_curve_.append(loss.item())

        self.model_ = model
        self.params_ = {name: t.data.copy() for name, t in model.store.items()}
        self.n_iter_ = self.iterations
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this FlowEstimator is not fitted yet; call fit first")

    def _forward_batch(self, X):
        self._check_fitted()
        X = check_image_pairs(X)
        flows, masks = [], []
        for i in range(X.shape[0]):
            h, w = X.shape[3:]
            x1, _, _ = pad_to_multiple(X[i, 0][None])
            x2, _, _ = pad_to_multiple(X[i, 1][None])
            res = self.model_.forward(Tensor(x1), Tensor(x2))
            flows.append(res.flow.data[0, :, :h, :w])
            masks.append(res.mask.data[0, :, :h, :w] if res.mask is not None else None)
        return np.stack(flows), masks

    def predict(self, X) -> np.ndarray:
        """Flow fields (N, 2, H, W) in pixels."""
        flows, _ = self._forward_batch(X)
        return flows

    def predict_mask(self, X) -> np.ndarray:
        """Visibility masks (N, 1, H, W) in [0, 1]; 1 = visible."""
        flows, masks = self._forward_batch(X)
        if any(m is None for m in masks):
            raise ValueError(f"variant {self.variant!r} with use_mask={self.use_mask} "
                             "produces no occlusion mask")
        return np.stack(masks)

    def score(self, X, y, valid=None) -> float:
        """Negative AEPE (greater is better)."""
        X = check_image_pairs(X)
        y = check_flow_targets(y, X.shape[0], X.shape[3:])
        valid = check_valid_masks(valid, X.shape[0], X.shape[3:])
        pred = self.predict(X)
        return -aepe(pred, y, valid)
