"""Coarse-to-fine residual matching networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .correlation import (
    DEFAULT_SOFTARGMAX_TEMPERATURE,
    CorrelationVolume,
    global_correlation,
    local_correlation,
    pixel_grid,
    soft_argmax,
)
from .errors import ConfigurationError, UsageError
from .features import BackboneConfig, FeaturePyramid, conv_chw, uniform_init
from .tensor import Tensor


@dataclass
class MatcherConfig:
    radius: int = 4
    softargmax_temperature: float = DEFAULT_SOFTARGMAX_TEMPERATURE
    hidden_channels: tuple = (128, 128, 96, 64, 32)
    seed: int = 1
    concat_features: bool = False
    global_l2norm: bool = False

    def __post_init__(self):
        self.hidden_channels = tuple(int(c) for c in self.hidden_channels)
        if self.radius < 1 or self.softargmax_temperature <= 0:
            raise ConfigurationError("radius must be >= 1 and softargmax_temperature > 0")


@dataclass
class FlowField:
    """(2, H, W) displacement in pixels of its own grid, plus optional validity."""

    uv: np.ndarray
    mask: np.ndarray | None = None

    @property
    def shape(self):
        return self.uv.shape[1:]

    @property
    def u(self):
        return self.uv[0]

    @property
    def v(self):
        return self.uv[1]


class InferenceModule:
    """Five 3x3 conv+relu blocks and a zero-initialised linear 3x3 conv to 2 channels."""

    def __init__(self, in_channels: int, hidden=(128, 128, 96, 64, 32), rng=None, prefix="inference"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.params: dict[str, Tensor] = {}
        self.layers: list[tuple[str, str]] = []
        cin = in_channels
        for i, cout in enumerate(hidden):
            self._add(prefix, i, uniform_init(rng, (cout, cin, 3, 3), cin * 9), uniform_init(rng, (cout,), cin * 9))
            cin = cout
        self._add(prefix, len(hidden), np.zeros((2, cin, 3, 3), np.float32), np.zeros(2, np.float32))

    def _add(self, prefix, i, w, b):
        wn, bn = f"{prefix}.conv{i}.weight", f"{prefix}.conv{i}.bias"
        self.params[wn] = Tensor(w, requires_grad=True, name=wn)
        self.params[bn] = Tensor(b, requires_grad=True, name=bn)
        self.layers.append((wn, bn))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.in_channels:
            raise ConfigurationError(f"inference module expects {self.in_channels} input channels, got {x.shape[0]}")
        last = len(self.layers) - 1
        for i, (wn, bn) in enumerate(self.layers):
            x = conv_chw(x, self.params[wn], self.params[bn], stride=1, padding=1)
            if i != last:
                x = T.relu(x)
        return x


def infer_residual(volume: CorrelationVolume, module: InferenceModule, extra: Tensor | None = None) -> Tensor:
    """Residual flow from a correlation volume (zero while the last layer is zero)."""
    x = volume.scores if extra is None else T.concat_channels([volume.scores, extra])
    return module(x)


def compose_flow(residual: Tensor, softargmax_flow: Tensor, upsampled_prev: Tensor | None = None) -> Tensor:
    """residual + soft-argmax flow + upsampled coarser flow."""
    if residual.shape != softargmax_flow.shape:
        raise UsageError(f"resolution mismatch: residual {residual.shape} vs soft-argmax {softargmax_flow.shape}")
    out = residual + softargmax_flow
    if upsampled_prev is not None:
        if upsampled_prev.shape != out.shape:
            raise UsageError(f"resolution mismatch: guidance {upsampled_prev.shape} vs {out.shape}")
        out = out + upsampled_prev
    return out


def resize_flow(flow: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize with displacements rescaled to the new grid's pixels."""
    flow = T.as_tensor(flow)
    h, w = flow.shape[-2:]
    ho, wo = size
    up = T.upsample_bilinear(flow, (ho, wo))
    if (ho, wo) == (h, w):
        return up
    scale = np.array([wo / w, ho / h], dtype=flow.dtype).reshape(2, 1, 1)
    return up * scale


def upsample_flow(flow: Tensor, factor: int = 2) -> Tensor:
    if int(factor) != factor or factor < 2:
        raise ConfigurationError(f"upsample factor must be an integer >= 2, got {factor}")
    h, w = flow.shape[-2:]
    return resize_flow(flow, (h * factor, w * factor))


def warp_features(ds: Tensor, flow: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sample ``ds`` at grid + flow; returns the warped map and a validity mask."""
    h, w = flow.shape[-2:]
    coords = T.as_tensor(flow) + pixel_grid(h, w, flow.dtype)
    return T.bilinear_sample(ds, coords)


@dataclass
class MatchResult:
    flow: Tensor  # finest level, (2, H/4, W/4)
    level_flows: list = field(default_factory=list)
    softargmax_flows: list = field(default_factory=list)
    residuals: list = field(default_factory=list)


class Matcher:
    """Per-level inference modules (global at the coarsest level, local elsewhere)."""

    def __init__(self, config: MatcherConfig | None = None, backbone: BackboneConfig | None = None):
        self.config = config or MatcherConfig()
        self.backbone_config = backbone or BackboneConfig()
        cfg, bcfg = self.config, self.backbone_config
        rng = np.random.default_rng(cfg.seed)
        coarse = bcfg.reference_size // 16
        n_local = (2 * cfg.radius + 1) ** 2
        self.modules: list[InferenceModule] = []
        for lvl in range(bcfg.levels):
            width = coarse * coarse if lvl == 0 else n_local
            if cfg.concat_features:
                width += bcfg.channels[lvl]
            self.modules.append(InferenceModule(width, cfg.hidden_channels, rng, prefix=f"inference.{lvl}"))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for m in self.modules:
            out.update(m.params)
        return out

    def __call__(self, src: FeaturePyramid, tgt: FeaturePyramid) -> MatchResult:
        return match(src, tgt, self)


def match(src: FeaturePyramid, tgt: FeaturePyramid, params: Matcher) -> MatchResult:
    """Coarse-to-fine flow from source and target pyramids, finest level last."""
    cfg = params.config
    if len(src) != len(tgt) or len(src) != len(params.modules):
        raise ConfigurationError(f"pyramid levels {len(src)}/{len(tgt)} do not match {len(params.modules)} modules")
    result = MatchResult(flow=None)
    prev = None
    for lvl, (ds, dt, module) in enumerate(zip(src, tgt, params.modules)):
        if ds.shape[0] != dt.shape[0]:
            raise ConfigurationError(f"level {lvl}: channel mismatch {ds.shape} vs {dt.shape}")
        if lvl == 0:
            vol = global_correlation(ds, dt)
            guide = None
        else:
            guide = resize_flow(prev, dt.shape[1:])
            warped, _ = warp_features(ds, guide)
            vol = local_correlation(warped, dt, cfg.radius)
        sa = soft_argmax(vol, cfg.softargmax_temperature)
        infer_vol = vol
        if lvl == 0 and cfg.global_l2norm:
            infer_vol = CorrelationVolume(vol.kind, T.l2_normalize(vol.scores, axis=0), vol.radius, vol.source_shape)
        res = infer_residual(infer_vol, module, dt if cfg.concat_features else None)
        prev = compose_flow(res, sa, guide)
        result.level_flows.append(prev)
        result.softargmax_flows.append(sa)
        result.residuals.append(res)
    result.flow = prev
    return result
