"""Coarse-to-fine flow networks: shared feature pyramid, per-level decoders
with occlusion masking, and the cascaded dual-pyramid refinement stage.

Flow unit bookkeeping: decoders regress flow in *network units* (pixels at
the level's own resolution divided by ``flow_scale``).  Upsampling a flow
map to the next finer level doubles both its resolution and its values;
warping at a level multiplies by ``flow_scale`` to get pixels; the final
full-resolution output is converted back to real pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .flow_ops import correlate, deform_conv, mask_tradeoff, warp
from .nn import ConvParams, ParamStore, conv2d, deconv2d, upsample_bilinear, upsample_bilinear_2x
from .tensor import (
    ShapeError,
    Tensor,
    add,
    add_scalar,
    concat_channels,
    leaky_relu,
    mul,
    scale,
    sigmoid,
    zeros,
)

__all__ = [
    "ModelConfig",
    "LevelOutput",
    "StageResult",
    "FeaturePyramid",
    "DecoderLevel",
    "CoarseToFineFlowNet",
    "DualPyramidFlowNet",
    "occlusion_input",
    "build_model",
]

VARIANTS = ("fmm", "ofmm", "asym-ofmm", "asym-conv")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the full-size network."""

    pyramid_channels: tuple[int, ...] = (16, 32, 64, 96, 128, 196)
    pyramid_convs: int = 3  # convs per level, first one stride 2
    decoder_widths: tuple[int, ...] = (128, 128, 96, 64, 32)
    context_widths: tuple[int, ...] = (128, 128, 128, 96, 64, 32)
    upfeat_channels: int = 16
    max_displacement: int = 4
    max_displacement2: int = 2
    flow_scale: float = 20.0
    leaky_slope: float = 0.1
    variant: str = "asym-ofmm"
    head_init_scale: float = 0.1
    use_mask: bool = True
    use_tradeoff: bool = True
    stage: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.pyramid_channels) != 6:
            raise ValueError("pyramid_channels must list 6 levels")
        if len(self.decoder_widths) != 5:
            raise ValueError("decoder_widths must list 5 dense layers")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")

    @property
    def has_mask(self) -> bool:
        return self.use_mask and self.variant != "fmm"

    @property
    def has_tradeoff(self) -> bool:
        return self.use_tradeoff and self.variant != "fmm"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("pyramid_channels", "decoder_widths", "context_widths"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class LevelOutput:
    level: int
    flow: Tensor                      # network units at this level
    theta_logits: Tensor | None       # pre-sigmoid occlusion mask
    mu: Tensor | None                 # trade-off features for level-1, already upsampled


@dataclass
class StageResult:
    flow: Tensor                      # (B,2,H,W) real pixels at input resolution
    mask: Tensor | None               # (B,1,H,W) in [0,1]; 1 = visible
    levels: dict[int, LevelOutput] = field(default_factory=dict)
    stage1: "StageResult | None" = None

    def level_flows(self) -> list[Tensor]:
        """Per-level flows ordered fine to coarse (levels 2..6), network units."""
        return [self.levels[l].flow for l in range(2, 7)]


class FeaturePyramid:
    """Six-level feature stack; each level halves resolution via a stride-2
    conv followed by stride-1 convs, shared between both input images."""

    def __init__(self, store, prefix: str, in_ch: int, cfg: ModelConfig):
        self.levels: list[list[ConvParams]] = []
        prev = in_ch
        for li, ch in enumerate(cfg.pyramid_channels, start=1):
            convs = [store.conv(f"{prefix}.l{li}.c0", prev, ch, stride=2, slope=cfg.leaky_slope)]
            for j in range(1, cfg.pyramid_convs):
                convs.append(store.conv(f"{prefix}.l{li}.c{j}", ch, ch, slope=cfg.leaky_slope))
            self.levels.append(convs)
            prev = ch

    def __call__(self, image: Tensor) -> list[Tensor]:
        b, c, h, w = image.shape
        div = 1 << len(self.levels)
        if h % div or w % div:
            raise ShapeError(
                f"pyramid input spatial dims must be divisible by {div}, got {h}x{w}"
            )
        feats = []
        x = image
        for convs in self.levels:
            for p in convs:
                x = leaky_relu(conv2d(x, p), p.leaky_slope)
            feats.append(x)
        return feats


class _Matcher:
    """Per-level feature matching: produces the cost volume for one level.

    Owns the variant-specific parameters (deformable kernel or the extra
    conv applied after warping).
    """

    def __init__(self, store, prefix: str, ch: int, cfg: ModelConfig, d: int):
        self.cfg = cfg
        self.d = d
        self.transform: ConvParams | None = None
        if cfg.variant == "asym-ofmm":
            self.transform = store.conv(f"{prefix}.deform", ch, ch, slope=None)
        elif cfg.variant == "asym-conv":
            self.transform = store.conv(f"{prefix}.warped_conv", ch, ch, slope=None)

    def costs(self, f1: Tensor, f2: Tensor, flow_px: Tensor | None,
              theta: Tensor | None, mu: Tensor | None) -> Tensor:
        cfg = self.cfg
        if flow_px is None:
            matched = f2
            transformed = False
        elif cfg.variant == "asym-ofmm":
            matched = deform_conv(f2, flow_px, self.transform)
            transformed = True
        else:
            matched = warp(f2, flow_px)
            if cfg.variant == "asym-conv":
                matched = conv2d(matched, self.transform)
            transformed = cfg.variant != "fmm"
        if transformed:
            use_theta = cfg.has_mask and theta is not None
            use_mu = cfg.has_tradeoff and mu is not None
            if use_theta and use_mu:
                matched = mask_tradeoff(matched, theta, mu)
            elif use_theta:
                matched = mul(matched, theta)
            elif use_mu:
                matched = add(matched, mu)
            matched = leaky_relu(matched, cfg.leaky_slope)
        return leaky_relu(correlate(f1, matched, self.d), cfg.leaky_slope)


class DecoderLevel:
    """One pyramid level's decoder: densely connected conv block plus flow,
    mask-logit, and trade-off-feature heads."""

    def __init__(self, store, prefix: str, level: int, cfg: ModelConfig,
                 stage: int, cost_channels: int):
        self.level = level
        self.cfg = cfg
        ch = cfg.pyramid_channels[level - 1]
        in_ch = cost_channels + ch + 2          # cost volumes + feat1 + up_flow
        if level < 6:
            in_ch += ch                          # up_mu
        if stage == 2 and level < 6:
            in_ch += 2                           # first-stage flow at this level
        self.in_channels = in_ch

        slope = cfg.leaky_slope
        self.dense: list[ConvParams] = []
        total = in_ch
        for i, width in enumerate(cfg.decoder_widths):
            self.dense.append(store.conv(f"{prefix}.dense{i}", total, width, slope=slope))
            total += width
        self.flow_head = store.conv(f"{prefix}.flow", total, 2, slope=None,
                                    init_scale=cfg.head_init_scale)

        self.theta_head = None
        if level > 2 and cfg.has_mask:
            self.theta_head = store.conv(f"{prefix}.theta", total, 1, slope=None,
                                         init_scale=cfg.head_init_scale)

        self.upfeat = None
        self.mu_conv = None
        if level > 2:
            last_width = cfg.decoder_widths[-1]
            self.upfeat = store.deconv(f"{prefix}.upfeat", last_width, cfg.upfeat_channels,
                                       slope=slope)
            next_ch = cfg.pyramid_channels[level - 2]
            self.mu_conv = store.conv(f"{prefix}.mu", cfg.upfeat_channels, next_ch, slope=None)

        self.context: list[ConvParams] = []
        self.context_head = None
        if level == 2:
            dilations = (1, 2, 4, 8, 16, 1)
            prev = total
            for i, (width, dil) in enumerate(zip(cfg.context_widths, dilations)):
                self.context.append(store.conv(f"{prefix}.ctx{i}", prev, width,
                                               dilation=dil, slope=slope))
                prev = width
            self.context_head = store.conv(f"{prefix}.ctx_flow", prev, 2, slope=None,
                                           init_scale=cfg.head_init_scale)

    def decode(self, cost: Tensor, feat1: Tensor, up_flow: Tensor,
               up_mu: Tensor | None = None, extra: tuple[Tensor, ...] = (),
               base_flow: Tensor | None = None) -> LevelOutput:
        """Run the dense block and heads; flow is residual on ``base_flow``
        (defaults to ``up_flow``)."""
        parts = [cost, feat1, up_flow]
        if up_mu is not None:
            parts.append(up_mu)
        parts.extend(extra)
        ref = parts[0].shape
        for t in parts[1:]:
            if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
                raise ShapeError(
                    f"decode level {self.level}: input {t.shape} disagrees with {ref} "
                    f"on batch or resolution"
                )
        x = concat_channels(parts)
        if x.shape[1] != self.in_channels:
            raise ShapeError(
                f"decode level {self.level}: expected {self.in_channels} input channels, "
                f"got {x.shape[1]}"
            )
        slope = self.cfg.leaky_slope
        last = None
        for p in self.dense:
            last = leaky_relu(conv2d(x, p), slope)
            x = concat_channels([last, x])

        if base_flow is None:
            base_flow = up_flow
        flow = add(base_flow, conv2d(x, self.flow_head))
        if self.context_head is not None:
            c = x
            for p in self.context:
                c = leaky_relu(conv2d(c, p), slope)
            flow = add(flow, conv2d(c, self.context_head))

        theta_logits = conv2d(x, self.theta_head) if self.theta_head is not None else None

        mu = None
        if self.upfeat is not None:
            u = leaky_relu(deconv2d(last, self.upfeat), slope)
            mu = conv2d(u, self.mu_conv)
        return LevelOutput(self.level, flow, theta_logits, mu)


def occlusion_input(image: Tensor, mask: Tensor | None) -> Tensor:
    """4-channel input for the occlusion-aware pyramid: image plus the mask
    shifted to be zero-centered; the reference image carries a zero channel."""
    b, c, h, w = image.shape
    if mask is None:
        chan = zeros((b, 1, h, w), dtype=image.dtype)
    else:
        if mask.shape != (b, 1, h, w):
            raise ShapeError(f"occlusion mask must be ({b},1,{h},{w}), got {mask.shape}")
        chan = add_scalar(mask, -0.5)
    return concat_channels([image, chan])


class CoarseToFineFlowNet:
    """Single-stage network: shared pyramid, then level 6 -> 2 decoding with
    the configured matching module; level-2 flow is upsampled x4 to full
    resolution."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32, store=None):
        self.cfg = cfg
        if store is None:
            store = ParamStore(np.random.default_rng(seed), dtype=dtype)
        self._store = store
        nd = (2 * cfg.max_displacement + 1) ** 2
        self.pyramid = FeaturePyramid(store, "pyramid", 3, cfg)
        self.matchers: dict[int, _Matcher] = {}
        self.decoders: dict[int, DecoderLevel] = {}
        for level in range(6, 1, -1):
            ch = cfg.pyramid_channels[level - 1]
            if level < 6:
                self.matchers[level] = _Matcher(store, f"match.l{level}", ch, cfg,
                                                cfg.max_displacement)
            self.decoders[level] = DecoderLevel(store, f"decoder.l{level}", level, cfg,
                                                stage=1, cost_channels=nd)

    @property
    def store(self):
        return getattr(self._store, "base", self._store)

    def forward(self, image1: Tensor, image2: Tensor) -> StageResult:
        result, _, _ = self._forward(image1, image2)
        return result

    def _forward(self, image1: Tensor, image2: Tensor):
        if image1.shape != image2.shape:
            raise ShapeError(f"image shapes differ: {image1.shape} vs {image2.shape}")
        cfg = self.cfg
        feats1 = self.pyramid(image1)
        feats2 = self.pyramid(image2)
        b = image1.shape[0]

        levels: dict[int, LevelOutput] = {}
        up_flow = up_theta = up_mu = None
        theta_l2 = None
        for level in range(6, 1, -1):
            f1, f2 = feats1[level - 1], feats2[level - 1]
            if level == 6:
                cost = leaky_relu(correlate(f1, f2, cfg.max_displacement), cfg.leaky_slope)
                up_flow = zeros((b, 2, f1.shape[2], f1.shape[3]), dtype=image1.dtype)
            else:
                flow_px = scale(up_flow, cfg.flow_scale)
                cost = self.matchers[level].costs(f1, f2, flow_px, up_theta, up_mu)
            out = self.decoders[level].decode(cost, f1, up_flow, up_mu)
            levels[level] = out
            if level > 2:
                up_flow = scale(upsample_bilinear_2x(out.flow), 2.0)
                up_mu = out.mu
                if out.theta_logits is not None:
                    up_theta = upsample_bilinear_2x(sigmoid(out.theta_logits))
                    if level == 3:
                        theta_l2 = up_theta

        flow_full = scale(upsample_bilinear(levels[2].flow, 4), 4.0 * cfg.flow_scale)
        mask_full = upsample_bilinear(theta_l2, 4) if theta_l2 is not None else None
        return StageResult(flow=flow_full, mask=mask_full, levels=levels), feats1, feats2

    def param_count(self) -> int:
        return self.store.param_count()


class DualPyramidFlowNet:
    """Two-stage cascade: the first stage's flow warps the target image, a
    second occlusion-aware pyramid is built from (warped image, mask) and
    (reference image, zero mask), and stage-2 decoders refine the stage-1
    flow from both pyramids' cost volumes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        store = ParamStore(np.random.default_rng(seed), dtype=dtype)
        self._store = store
        self.stage1 = CoarseToFineFlowNet(cfg, store=_Scoped(store, "stage1"))
        s2 = _Scoped(store, "stage2")
        nd2 = (2 * cfg.max_displacement2 + 1) ** 2
        self.occ_pyramid = FeaturePyramid(s2, "occ_pyramid", 4, cfg)
        self.matchers: dict[int, _Matcher] = {}
        self.decoders: dict[int, DecoderLevel] = {}
        for level in range(6, 1, -1):
            ch = cfg.pyramid_channels[level - 1]
            self.matchers[level] = _Matcher(s2, f"match.l{level}", ch, cfg,
                                            cfg.max_displacement2)
            self.decoders[level] = DecoderLevel(s2, f"decoder.l{level}", level, cfg,
                                                stage=2, cost_channels=2 * nd2)

    @property
    def store(self) -> ParamStore:
        return self._store

    def freeze_stage1(self) -> None:
        self._store.freeze("stage1.")

    def load_stage1(self, arrays: dict[str, np.ndarray]) -> None:
        """Load a single-stage checkpoint's parameters into the first stage."""
        for name, arr in arrays.items():
            full = f"stage1.{name}"
            if full not in self._store:
                raise ValueError(f"stage-1 checkpoint has unknown parameter {name!r}")
            t = self._store[full]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {t.shape}")
            t.data = np.ascontiguousarray(arr.astype(self._store.dtype, copy=False))

    def forward(self, image1: Tensor, image2: Tensor) -> StageResult:
        cfg = self.cfg
        s1, feats1, feats2 = self.stage1._forward(image1, image2)

        warped2 = warp(image2, s1.flow)
        o1 = self.occ_pyramid(occlusion_input(image1, None))
        o2 = self.occ_pyramid(occlusion_input(warped2, s1.mask))

        levels: dict[int, LevelOutput] = {}
        up_flow = up_theta = up_mu = None
        for level in range(6, 1, -1):
            f1, f2 = feats1[level - 1], feats2[level - 1]
            s1_flow = s1.levels[level].flow
            if level == 6:
                up_flow = s1_flow
            flow_px = scale(up_flow, cfg.flow_scale)
            cost_a = self.matchers[level].costs(f1, f2, flow_px, up_theta, up_mu)
            cost_b = leaky_relu(
                correlate(o1[level - 1], o2[level - 1], cfg.max_displacement2),
                cfg.leaky_slope,
            )
            cost = concat_channels([cost_a, cost_b])
            extra = (s1_flow,) if level < 6 else ()
            out = self.decoders[level].decode(cost, f1, up_flow, up_mu, extra=extra,
                                              base_flow=s1_flow)
            levels[level] = out
            if level > 2:
                up_flow = scale(upsample_bilinear_2x(out.flow), 2.0)
                up_mu = out.mu
                if out.theta_logits is not None:
                    up_theta = upsample_bilinear_2x(sigmoid(out.theta_logits))

        flow_full = scale(upsample_bilinear(levels[2].flow, 4), 4.0 * cfg.flow_scale)
        return StageResult(flow=flow_full, mask=s1.mask, levels=levels, stage1=s1)

    def param_count(self) -> int:
        return self._store.param_count()


class _Scoped:
    """Prefix view over a ParamStore so submodels register namespaced params."""

    def __init__(self, base: ParamStore, prefix: str):
        self.base = base
        self.prefix = prefix
        self.rng = base.rng
        self.dtype = base.dtype

    def add(self, name, data):
        return self.base.add(f"{self.prefix}.{name}", data)

    def conv(self, name, *a, **kw):
        return self.base.conv(f"{self.prefix}.{name}", *a, **kw)

    def deconv(self, name, *a, **kw):
        return self.base.deconv(f"{self.prefix}.{name}", *a, **kw)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32):
    """Construct the network matching ``cfg.stage``."""
    if cfg.stage == 2:
        return DualPyramidFlowNet(cfg, seed=seed, dtype=dtype)
    return CoarseToFineFlowNet(cfg, seed=seed, dtype=dtype)
