"""Synthetic data generation, augmentation, flow-file I/O, and rendering."""

from .augment import AugmentError, AugmentParams, augment
from .flo import FloFormatError, read_flo, write_flo
from .synth import SceneConfig, SyntheticSample, gen_batch, gen_sample, sample_seed
from .viz import render_flow_png, render_mask_png

__all__ = [
    "AugmentError",
    "AugmentParams",
    "augment",
    "FloFormatError",
    "read_flo",
    "write_flo",
    "SceneConfig",
    "SyntheticSample",
    "gen_sample",
    "gen_batch",
    "sample_seed",
    "render_flow_png",
    "render_mask_png",
]
