"""Confidence-aware contrastive data term over randomly sampled positions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .correlation import pixel_grid
from .errors import ConfigurationError, DegenerateInputError
from .matcher import resize_flow
from .tensor import Tensor


@dataclass
class LossConfig:
    temperature: float = 0.1
    confidence: float = 0.01
    sample_count: int = 256
    rng_seed: int = 0
    levels: tuple = (-1,)
    similarity: str = "contrastive"  # "inner" is a diagnostic only

    def __post_init__(self):
        self.levels = tuple(int(v) for v in self.levels)
        if not self.temperature > 0:
            raise ConfigurationError("loss temperature must be positive")
        if not 0 <= self.confidence < 1:
            raise ConfigurationError("confidence must lie in [0, 1)")
        if self.sample_count < 1:
            raise ConfigurationError("sample_count must be >= 1")
        if self.similarity not in ("contrastive", "inner"):
            raise ConfigurationError(f"unknown similarity {self.similarity!r}")


def sample_rng(seed: int, iteration: int, stream: int = 0) -> np.random.Generator:
    """Generator fixed by (seed, iteration, stream)."""
    return np.random.default_rng([int(seed) & (2**63 - 1), int(iteration), int(stream)])


def sample_locations(valid_mask: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``m`` flat indices drawn uniformly without replacement from valid positions."""
    valid = np.flatnonzero(np.asarray(valid_mask).ravel())
    if valid.size == 0:
        raise DegenerateInputError("no valid positions to sample")
    if valid.size <= m:
        return valid
    return rng.choice(valid, size=m, replace=False)


def contrastive_similarity(d_warped: Tensor, d_target: Tensor, indices: np.ndarray, temperature: float) -> Tensor:
    """S_c at each sampled position; negatives are the other sampled target positions."""
    c = d_warped.shape[0]
    a = T.take(d_warped.reshape(c, -1), indices, axis=1)
    b = T.take(d_target.reshape(c, -1), indices, axis=1)
    logits = T.matmul(T.transpose(a), b) * (1.0 / temperature)
    return T.exp(T.diagonal(T.log_softmax(logits, axis=1)))


def confidence_gate(s, phi: float) -> Tensor:
    """``s`` where ``s >= phi``, else 1 with zero gradient."""
    s = T.as_tensor(s)
    keep = s.data >= phi
    out = np.where(keep, s.data, 1).astype(s.dtype)
    return T.make_op("confidence_gate", out, (s,), lambda g: (g * keep,))


def contrastive_loss(d_warped: Tensor, d_target: Tensor, valid: np.ndarray, config: LossConfig,
                     rng: np.random.Generator) -> Tensor:
    """mean over samples of -log gate(S_c, phi)."""
    idx = sample_locations(valid, config.sample_count, rng)
    if config.similarity == "inner":
        c = d_warped.shape[0]
        a = T.take(d_warped.reshape(c, -1), idx, axis=1)
        b = T.take(d_target.reshape(c, -1), idx, axis=1)
        return -T.mean(T.tsum(a * b, axis=0))
    s = contrastive_similarity(d_warped, d_target, idx, config.temperature)
    return T.mean(-T.log(confidence_gate(s, config.confidence)))


def pool_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """A cell of the coarser grid is valid only if all pixels it covers are."""
    h, w = mask.shape
    ho, wo = size
    if h % ho == 0 and w % wo == 0:
        return mask.reshape(ho, h // ho, wo, w // wo).all(axis=(1, 3))
    frac = T.resize_matrix(h, ho) @ mask.astype(np.float64) @ T.resize_matrix(w, wo).T
    return frac > 1 - 1e-6


def warp_source_image(image: Tensor, flow: Tensor) -> tuple[Tensor, np.ndarray]:
    """Warp a (3, H, W) image by a flow at any resolution (upsampled to H x W)."""
    h, w = image.shape[1:]
    full = resize_flow(flow, (h, w))
    coords = full + pixel_grid(h, w, full.dtype)
    return T.bilinear_sample(image, coords)


def data_loss(src_image: Tensor, flow: Tensor, tgt_image: Tensor | None, feature_fn: Callable,
              config: LossConfig, rng: np.random.Generator, target_features: dict | None = None) -> Tensor:
    """Contrastive loss between features of the warped source image and of the target.

    ``feature_fn(image, levels)`` returns ``{level: (C, h, w) tensor}``.  Pass
    ``target_features`` to reuse target features computed elsewhere.
    Positions whose warp leaves the source are excluded before sampling.
    Raises :class:`DegenerateInputError` when nothing valid remains.
    """
    warped, valid = warp_source_image(src_image, flow)
    levels = config.levels
    dw = feature_fn(warped, levels)
    dt = target_features if target_features is not None else feature_fn(tgt_image, levels)
    total = None
    for lv in levels:
        fw, ft = dw[lv], dt[lv]
        lvl_valid = pool_mask(valid, fw.shape[1:])
        term = contrastive_loss(fw, ft, lvl_valid, config, rng)
        total = term if total is None else total + term
    return total
