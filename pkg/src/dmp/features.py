"""Feature pyramids: frozen backbone plus zero-initialised residual adaptation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, InputError
from .tensor import Tensor

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

ADAPT_KERNELS = (3, 5, 7, 9)
MIN_IMAGE_SIZE = 32


def preprocess(image) -> Tensor:
    """HxWx3 image with values in [0, 255] -> ImageNet-normalised (3, H, W) tensor."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"expected an RGB image of shape (H, W, 3), got {img.shape}")
    x = (img / 255.0 - IMAGENET_MEAN) / IMAGENET_STD
    return Tensor(x.transpose(2, 0, 1).astype(np.float32))


def downscale_to_reference(image, size: int = 256) -> Tensor:
    """Bilinearly resize a CHW image tensor to ``size`` x ``size``."""
    image = T.as_tensor(image)
    h, w = image.shape[-2:]
    if min(h, w) < MIN_IMAGE_SIZE:
        raise InputError(f"image {h}x{w} is smaller than {MIN_IMAGE_SIZE} px")
    return T.upsample_bilinear(image, (size, size))


def conv_chw(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """conv2d on a single CHW map."""
    out = T.conv2d(x.reshape((1,) + x.shape), weight, bias, stride, padding)
    return out.reshape(out.shape[1:])


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = np.sqrt(1.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(np.float32)


@dataclass
class BackboneConfig:
    """Desk-scale backbone.

    Levels are ordered coarse to fine.  The two coarse levels are computed on
    the image resized to ``reference_size`` (strides 16 and 8); the two fine
    levels on the original image (strides 8 and 4).
    """

    levels: int = 4
    channels: tuple = (64, 64, 32, 32)
    chain_channels: tuple = (16, 32, 64, 64)
    reference_size: int = 128
    weight_source: str = "random"
    seed: int = 0
    renormalize: bool = True
    center: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.chain_channels = tuple(int(c) for c in self.chain_channels)
        if self.levels != 4 or len(self.channels) != 4:
            raise ConfigurationError("the desk backbone has exactly 4 levels")
        if len(self.chain_channels) != 4:
            raise ConfigurationError("chain_channels needs 4 entries (strides 2, 4, 8, 16)")
        if self.reference_size % 16 or self.reference_size < MIN_IMAGE_SIZE:
            raise ConfigurationError("reference_size must be a multiple of 16 and >= 32")

    @property
    def downsampling(self) -> tuple:
        return (16, 8, 8, 4)

    # (uses reference image, chain stage index) per level
    @property
    def taps(self) -> tuple:
        return ((True, 3), (True, 2), (False, 2), (False, 1))

    def level_shapes(self, height: int, width: int) -> list[tuple[int, int]]:
        r = self.reference_size
        return [(r // 16, r // 16), (r // 8, r // 8), (height // 8, width // 8), (height // 4, width // 4)]


@dataclass
class FeaturePyramid:
    """Per-level (C, H, W) feature maps, coarse to fine."""

    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> Tensor:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    @property
    def shapes(self):
        return [t.shape for t in self.levels]


class Backbone:
    """Frozen stride-2 conv chain with one 3x3 tap conv per pyramid level."""

    def __init__(self, config: BackboneConfig | None = None, weights: dict | None = None):
        self.config = config or BackboneConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, Tensor] = {}
        cin = 3
        for k, cout in enumerate(cfg.chain_channels):
            self.params[f"backbone.chain.{k}.weight"] = Tensor(uniform_init(rng, (cout, cin, 4, 4), cin * 16))
            self.params[f"backbone.chain.{k}.bias"] = Tensor(np.zeros(cout, np.float32))
            cin = cout
        for lvl, ((_, stage), cout) in enumerate(zip(cfg.taps, cfg.channels)):
            c = cfg.chain_channels[stage]
            self.params[f"backbone.tap.{lvl}.weight"] = Tensor(uniform_init(rng, (cout, c, 3, 3), c * 9))
            self.params[f"backbone.tap.{lvl}.bias"] = Tensor(np.zeros(cout, np.float32))
        if weights is not None:
            self.load_state(weights)

    def load_state(self, weights: dict):
        for name, p in self.params.items():
            if name not in weights:
                raise ConfigurationError(f"backbone weight file lacks parameter '{name}'")
            arr = np.asarray(weights[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ConfigurationError(f"backbone parameter '{name}': file shape {arr.shape} != {p.shape}")
            self.params[name] = Tensor(arr.copy())

    def _chain(self, x: Tensor, depth: int) -> list[Tensor]:
        stages = []
        for k in range(depth):
            x = T.relu(conv_chw(x, self.params[f"backbone.chain.{k}.weight"],
                                self.params[f"backbone.chain.{k}.bias"], stride=2, padding=1))
            stages.append(x)
        return stages

    def __call__(self, image: Tensor, levels: Sequence[int] | None = None) -> dict[int, Tensor]:
        """L2-normalised backbone features for the requested levels."""
        cfg = self.config
        levels = range(cfg.levels) if levels is None else [lv % cfg.levels for lv in levels]
        need_ref = [lv for lv in levels if cfg.taps[lv][0]]
        need_orig = [lv for lv in levels if not cfg.taps[lv][0]]
        out = {}
        for use_ref, group in ((True, need_ref), (False, need_orig)):
            if not group:
                continue
            src = downscale_to_reference(image, cfg.reference_size) if use_ref else image
            stages = self._chain(src, max(cfg.taps[lv][1] for lv in group) + 1)
            for lv in group:
                stage = stages[cfg.taps[lv][1]]
                f = conv_chw(stage, self.params[f"backbone.tap.{lv}.weight"],
                             self.params[f"backbone.tap.{lv}.bias"], stride=1, padding=1)
                if cfg.center:
                    # random filters on relu inputs share a large common component
                    f = f - T.mean(f, axis=(1, 2), keepdims=True)
                out[lv] = T.l2_normalize(f)
        return out


class AdaptationLayers:
    """One zero-initialised residual conv per level (kernels 3, 5, 7, 9)."""

    def __init__(self, channels: Sequence[int], renormalize: bool = True):
        self.renormalize = renormalize
        self.params: dict[str, Tensor] = {}
        for lvl, (c, k) in enumerate(zip(channels, ADAPT_KERNELS)):
            self.params[f"adapt.{lvl}.weight"] = Tensor(np.zeros((c, c, k, k), np.float32), requires_grad=True,
                                                        name=f"adapt.{lvl}.weight")
            self.params[f"adapt.{lvl}.bias"] = Tensor(np.zeros(c, np.float32), requires_grad=True,
                                                      name=f"adapt.{lvl}.bias")

    @property
    def num_levels(self):
        return len(self.params) // 2

    def apply_level(self, lvl: int, x: Tensor) -> Tensor:
        w = self.params[f"adapt.{lvl}.weight"]
        if x.shape[0] != w.shape[1]:
            raise ConfigurationError(f"level {lvl}: features have {x.shape[0]} channels, layer expects {w.shape[1]}")
        k = w.shape[-1]
        y = x + conv_chw(x, w, self.params[f"adapt.{lvl}.bias"], stride=1, padding=k // 2)
        return T.l2_normalize(y) if self.renormalize else y


def adapt(pyramid: FeaturePyramid, layers: AdaptationLayers) -> FeaturePyramid:
    """Residual refinement of every level; identity while the layers are zero."""
    if len(pyramid) != layers.num_levels:
        raise ConfigurationError(f"pyramid has {len(pyramid)} levels, adaptation has {layers.num_levels}")
    return FeaturePyramid([layers.apply_level(i, f) for i, f in enumerate(pyramid)])


def extract_pyramid(image: Tensor, config: BackboneConfig | None = None, backbone: Backbone | None = None) -> FeaturePyramid:
    """Backbone pyramid of a preprocessed image, coarse to fine.

    Backbone weights never receive gradients.
    """
    backbone = backbone or Backbone(config)
    feats = backbone(image)
    return FeaturePyramid([feats[i] for i in range(backbone.config.levels)])


class FeatureNet:
    """Backbone plus adaptation layers; the adaptation weights are trainable."""

    def __init__(self, config: BackboneConfig | None = None, backbone_weights: dict | None = None):
        self.config = config or BackboneConfig()
        self.backbone = Backbone(self.config, backbone_weights)
        self.adaptation = AdaptationLayers(self.config.channels, self.config.renormalize)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.adaptation.params)

    def backbone_pyramid(self, image: Tensor) -> FeaturePyramid:
        with T.no_grad():
            return extract_pyramid(image, backbone=self.backbone)

    def __call__(self, image: Tensor, levels: Sequence[int] | None = None) -> dict[int, Tensor]:
        """Adapted features of ``image`` at ``levels`` (all by default)."""
        n = self.config.levels
        levels = list(range(n)) if levels is None else list(levels)
        raw = self.backbone(image, levels)
        return {lv: self.adaptation.apply_level(lv % n, raw[lv % n]) for lv in levels}
