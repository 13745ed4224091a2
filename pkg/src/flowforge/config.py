"""Run configuration: one JSON document describing model, loss, optimizer,
dataset, and seed.

Schema (all keys optional in files; missing keys take these defaults)::

    {
      "seed": 0,
      "stage1_checkpoint": null,        # required when model.stage == 2
      "model": {
        "variant": "asym-ofmm",         # fmm | ofmm | asym-ofmm | asym-conv
        "stage": 1,                     # 1 | 2
        "pyramid_channels": [16, 32, 64, 96, 128, 196],
        "pyramid_convs": 3,
        "decoder_widths": [128, 128, 96, 64, 32],
        "context_widths": [128, 128, 128, 96, 64, 32],
        "upfeat_channels": 16,
        "max_displacement": 4,          # stage-1 correlation radius
        "max_displacement2": 2,         # stage-2 correlation radius
        "flow_scale": 20.0,
        "leaky_slope": 0.1,
        "use_mask": true,
        "use_tradeoff": true
      },
      "loss": {
        "weights": [0.005, 0.01, 0.02, 0.08, 0.32],   # levels 2..6
        "robust": false, "q": 0.4, "eps": 0.01, "flow_scale": 20.0
      },
      "optimizer": {
        "lr": 0.002, "beta1": 0.9, "beta2": 0.999, "eps": 1e-08,
        "batch_size": 4, "iterations": 2000,
        "decay_steps": [1200, 1700], "decay_factor": 0.5,
        "checkpoint_every": 500
      },
      "dataset": {
        "scene": { ... SceneConfig fields ... },
        "augment_profile": null,        # chairs | sintel | kitti | identity | null
        "eval_count": 16, "eval_seed": 9999
      }
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .data.synth import SceneConfig
from .losses import LossConfig
from .model import ModelConfig

__all__ = ["OptimizerConfig", "DatasetConfig", "RunConfig", "smoke_config", "default_config"]


@dataclass
class OptimizerConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    iterations: int = 2000
    decay_steps: tuple[int, ...] = (1200, 1700)
    decay_factor: float = 0.5
    checkpoint_every: int = 500

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        if "decay_steps" in d:
            d["decay_steps"] = tuple(d["decay_steps"])
        return cls(**d)

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for s in self.decay_steps:
            if step >= s:
                lr *= self.decay_factor
        return lr


@dataclass
class DatasetConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    augment_profile: str | None = None
    eval_count: int = 16
    eval_seed: int = 9999

    def to_dict(self) -> dict:
        return {"scene": self.scene.to_dict(), "augment_profile": self.augment_profile,
                "eval_count": self.eval_count, "eval_seed": self.eval_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "scene" in d:
            d["scene"] = SceneConfig.from_dict(d["scene"])
        return cls(**d)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    seed: int = 0
    stage1_checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "dataset": self.dataset.to_dict(),
            "seed": self.seed,
            "stage1_checkpoint": self.stage1_checkpoint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            loss=LossConfig.from_dict(d.get("loss", {})),
            optimizer=OptimizerConfig.from_dict(d.get("optimizer", {})),
            dataset=DatasetConfig.from_dict(d.get("dataset", {})),
            seed=d.get("seed", 0),
            stage1_checkpoint=d.get("stage1_checkpoint"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def smoke_config(stage: int = 1, seed: int = 0, variant: str = "asym-ofmm") -> RunConfig:
    """Desk-scale run: reduced channels, 64x64 translating shapes."""
    model = ModelConfig(
        pyramid_channels=(8, 8, 8, 8, 8, 8),
        pyramid_convs=2,
        decoder_widths=(24, 24, 16, 16, 8),
        context_widths=(16, 16, 16, 16, 8, 8),
        upfeat_channels=8,
        variant=variant,
        stage=stage,
    )
    scene = SceneConfig(height=64, width=64, n_shapes=3, max_disp=8.0, background_disp=3.0)
    opt = OptimizerConfig(iterations=2000 if stage == 1 else 1000,
                          decay_steps=(1200, 1700) if stage == 1 else (600, 850))
    return RunConfig(model=model, optimizer=opt,
                     dataset=DatasetConfig(scene=scene), seed=seed)


def default_config(stage: int = 1, seed: int = 0) -> RunConfig:
    """Full-size architecture (slow on CPU; intended as the config reference)."""
    return RunConfig(model=ModelConfig(stage=stage), seed=seed)
