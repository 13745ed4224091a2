"""Training loop (Adam + step decay), evaluation, and single-pair inference."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import DatasetConfig, RunConfig
from .data import AugmentParams, augment, gen_batch
from .data.synth import SceneConfig, SyntheticSample, sample_seed
from .losses import aepe, fl_all, format_metrics_line, multiscale_epe
from .model import CoarseToFineFlowNet, DualPyramidFlowNet, ModelConfig, build_model
from .tensor import ShapeError, Tape, Tensor

__all__ = ["Adam", "train_run", "evaluate", "predict_pair", "make_eval_set",
           "batch_tensors", "TrainResult"]


class Adam:
    """Adam over a fixed parameter list; no weight decay."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def batch_tensors(samples: list[SyntheticSample]):
    """Stack samples into batch tensors (image1, image2, flow, occ, valid)."""
    cat = lambda key: Tensor(np.concatenate([getattr(s, key).data for s in samples], axis=0))
    return cat("image1"), cat("image2"), cat("flow"), cat("occlusion"), cat("valid")


def _augmenter(ds: DatasetConfig):
    if ds.augment_profile is None:
        return None
    crop = (ds.scene.height, ds.scene.width)
    return AugmentParams.profile(ds.augment_profile, crop=crop)


def make_batch(ds: DatasetConfig, base_seed: int, start: int, count: int):
    samples = gen_batch(base_seed, start, count, ds.scene)
    aug = _augmenter(ds)
    if aug is not None:
        samples = [
            augment(s, aug, np.random.default_rng(sample_seed(base_seed ^ 0x5A5A, start + i)))
            for i, s in enumerate(samples)
        ]
    return samples


def make_eval_set(ds: DatasetConfig) -> list[SyntheticSample]:
    """Held-out samples from a stream disjoint from training seeds."""
    return gen_batch(ds.eval_seed, 0, ds.eval_count, ds.scene)


@dataclass
class TrainResult:
    checkpoint: str
    metrics_log: str
    steps: int
    losses: list[float] = field(default_factory=list)
    final_eval: dict = field(default_factory=dict)


def _checkpoint_header(cfg: RunConfig) -> dict:
    return {"model": cfg.model.to_dict(), "flow_scale": cfg.loss.flow_scale}


def load_model(path, dtype=np.float32):
    """Rebuild the model recorded in a checkpoint and load its weights."""
    header, params = load_checkpoint(path)
    if "model" not in header:
        raise CheckpointError(f"{path}: no model config embedded in checkpoint header")
    cfg = ModelConfig.from_dict(header["model"])
    model = build_model(cfg, dtype=dtype)
    model.store.load_arrays(params)
    return model, cfg


def train_run(cfg: RunConfig, out_dir, log=None, eval_each_checkpoint: bool = False) -> TrainResult:
    """Deterministic training run; writes metrics.log, periodic checkpoints,
    and final.ffwt under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    opt_cfg = cfg.optimizer
    model = build_model(cfg.model, seed=cfg.seed)
    if cfg.model.stage == 2:
        if not cfg.stage1_checkpoint:
            raise ValueError(
                "stage-2 training requires a stage-1 checkpoint (stage1_checkpoint)"
            )
        header, arrays = load_checkpoint(cfg.stage1_checkpoint)
        s1_cfg = ModelConfig.from_dict(header.get("model", {}))
        if s1_cfg.stage == 2:
            arrays = {k[len("stage1."):]: v for k, v in arrays.items()
                      if k.startswith("stage1.")}
        model.load_stage1(arrays)
        model.freeze_stage1()

    trainable = [t for _, t in model.store.trainable()]
    adam = Adam(trainable, beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps)

    metrics_path = out / "metrics.log"
    losses: list[float] = []
    t0 = time.time()
    with open(metrics_path, "w") as metrics:
        for step in range(opt_cfg.iterations):
            samples = make_batch(cfg.dataset, cfg.seed, step * opt_cfg.batch_size,
                                 opt_cfg.batch_size)
            img1, img2, gt, _, valid = batch_tensors(samples)
            with Tape() as tape:
                result = model.forward(img1, img2)
                loss = multiscale_epe(result.level_flows(), gt, valid, cfg.loss)
            grads = tape.gradients(loss, trainable)
            adam.step(grads, opt_cfg.lr_at(step))

            lval = loss.item()
            losses.append(lval)
            line = format_metrics_line(step, lval, aepe(result.flow, gt, valid),
                                       fl_all(result.flow, gt, valid))
            metrics.write(line + "\n")
            if log is not None and (step % 100 == 0 or step == opt_cfg.iterations - 1):
                log(f"{line} lr={opt_cfg.lr_at(step):.2e} elapsed={time.time() - t0:.0f}s")

            if opt_cfg.checkpoint_every and (step + 1) % opt_cfg.checkpoint_every == 0:
                _save(model, cfg, out / f"step{step + 1:06d}.ffwt")

    final = out / "final.ffwt"
    _save(model, cfg, final)
    result = TrainResult(checkpoint=str(final), metrics_log=str(metrics_path),
                         steps=opt_cfg.iterations, losses=losses)
    result.final_eval = evaluate(model, cfg.dataset)
    (out / "eval.json").write_text(_eval_json(result.final_eval))
    return result


def _eval_json(d: dict) -> str:
    import json

    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def _save(model, cfg: RunConfig, path) -> None:
    params = {name: t.data for name, t in model.store.items()}
    save_checkpoint(path, params, header=_checkpoint_header(cfg))


def evaluate(model, ds: DatasetConfig, samples: list[SyntheticSample] | None = None) -> dict:
    """Pooled AEPE / Fl-all over the held-out set, plus the zero-flow baseline."""
    if samples is None:
        samples = make_eval_set(ds)
    img1, img2, gt, _, valid = batch_tensors(samples)
    result = model.forward(img1, img2)
    zeros = Tensor(np.zeros_like(gt.data))
    return {
        "aepe": aepe(result.flow, gt, valid),
        "fl_all": fl_all(result.flow, gt, valid),
        "zero_flow_aepe": aepe(zeros, gt, valid),
        "samples": len(samples),
    }


def pad_to_multiple(arr: np.ndarray, multiple: int = 64) -> tuple[np.ndarray, int, int]:
    """Edge-pad (B,C,H,W) on the bottom/right to a size multiple."""
    b, c, h, w = arr.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, h, w
    return np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge"), h, w


def predict_pair(model, img1: np.ndarray, img2: np.ndarray):
    """Flow + visibility mask for one image pair of arbitrary size.

    Inputs are (H,W,3) arrays in [0,1]; images are padded to a multiple of
    64 internally and outputs cropped back to (2,H,W) / (1,H,W).
    """
    if img1.shape != img2.shape:
        raise ShapeError(f"image sizes differ: {img1.shape} vs {img2.shape}")
    if img1.ndim != 3 or img1.shape[2] != 3:
        raise ShapeError(f"expected (H,W,3) images, got {img1.shape}")
    h, w = img1.shape[:2]
    stack = lambda a: a.transpose(2, 0, 1)[None].astype(np.float32)
    x1, _, _ = pad_to_multiple(stack(img1))
    x2, _, _ = pad_to_multiple(stack(img2))
    result = model.forward(Tensor(x1), Tensor(x2))
    flow = result.flow.data[:, :, :h, :w]
    mask = result.mask.data[:, :, :h, :w] if result.mask is not None else None
    return flow, mask
