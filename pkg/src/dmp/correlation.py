"""Global and local correlation volumes and the soft-argmax flow readout.

Flow convention: a flow ``F`` is defined on the target grid and points to the
source sampling position, ``warped(i) = source(i + F(i))``.  Volumes are
therefore laid out with one channel per source candidate and the target grid
as spatial axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor

DEFAULT_SOFTARGMAX_TEMPERATURE = 0.02


@dataclass
class CorrelationVolume:
    kind: str  # "global" or "local"
    scores: Tensor  # (K, H, W)
    radius: int | None = None
    source_shape: tuple | None = None

    @property
    def shape(self):
        return self.scores.shape


def pixel_grid(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """(2, h, w) array of absolute (x, y) pixel coordinates."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs, ys]).astype(dtype)


def local_displacements(radius: int) -> np.ndarray:
    """(K, 2) displacement (dx, dy) of each local channel, K = (2r+1)^2."""
    n = 2 * radius + 1
    k = np.arange(n * n)
    return np.stack([k % n - radius, k // n - radius], axis=1)


def global_correlation(ds: Tensor, dt: Tensor) -> CorrelationVolume:
    """scores[j, y, x] = ds(j) . dt(y, x) for every source position j."""
    if ds.shape[0] != dt.shape[0]:
        raise ConfigurationError(f"channel mismatch: source {ds.shape[0]} vs target {dt.shape[0]}")
    c, hs, ws = ds.shape
    _, ht, wt = dt.shape
    a = T.transpose(ds.reshape(c, hs * ws))
    scores = T.matmul(a, dt.reshape(c, ht * wt)).reshape(hs * ws, ht, wt)
    return CorrelationVolume("global", scores, None, (hs, ws))


def local_correlation(ds_warped: Tensor, dt: Tensor, radius: int = 4) -> CorrelationVolume:
    """scores[k, i] = ds_warped(i + d_k) . dt(i) over a (2r+1)^2 window.

    Window samples that fall outside the map score 0.
    """
    ds_warped = T.as_tensor(ds_warped)
    dt = T.as_tensor(dt)
    if ds_warped.shape != dt.shape:
        raise ConfigurationError(f"local correlation needs equal shapes, got {ds_warped.shape} and {dt.shape}")
    c, h, w = dt.shape
    if radius < 0 or radius >= min(h, w):
        raise ConfigurationError(f"radius {radius} must be below min(H, W) = {min(h, w)}")
    r = radius
    disp = local_displacements(r)
    a = ds_warped.data
    b = dt.data
    ap = np.pad(a, ((0, 0), (r, r), (r, r)))
    out = np.empty((len(disp), h, w), dtype=np.result_type(a, b))
    for k, (dx, dy) in enumerate(disp):
        out[k] = (ap[:, r + dy:r + dy + h, r + dx:r + dx + w] * b).sum(axis=0)

    def bw(g):
        ga = gb = None
        if ds_warped.requires_grad:
            gap = np.zeros_like(ap)
            for k, (dx, dy) in enumerate(disp):
                gap[:, r + dy:r + dy + h, r + dx:r + dx + w] += g[k] * b
            ga = gap[:, r:r + h, r:r + w]
        if dt.requires_grad:
            gb = np.zeros_like(b)
            for k, (dx, dy) in enumerate(disp):
                gb += g[k] * ap[:, r + dy:r + dy + h, r + dx:r + dx + w]
        return ga, gb

    scores = T.make_op("local_correlation", out, (ds_warped, dt), bw)
    return CorrelationVolume("local", scores, r, (h, w))


def soft_argmax(volume: CorrelationVolume, temperature: float = DEFAULT_SOFTARGMAX_TEMPERATURE) -> Tensor:
    """Expected displacement under softmax(scores / temperature) per target position."""
    scores = volume.scores
    k, h, w = scores.shape
    p = T.softmax(scores, temperature, axis=0).reshape(k, h * w)
    dtype = scores.dtype
    if volume.kind == "global":
        hs, ws = volume.source_shape
        src = pixel_grid(hs, ws, dtype).reshape(2, hs * ws)
        flow = T.matmul(src, p).reshape(2, h, w) - pixel_grid(h, w, dtype)
    elif volume.kind == "local":
        disp = local_displacements(volume.radius).T.astype(dtype)
        flow = T.matmul(disp, p).reshape(2, h, w)
    else:
        raise ConfigurationError(f"unknown volume kind {volume.kind!r}")
    return flow
