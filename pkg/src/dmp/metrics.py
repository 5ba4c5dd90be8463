"""Average endpoint error and percentage of correct keypoints on dense flow."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UndefinedMetricError


@dataclass
class MetricReport:
    aee: float
    pck: dict = field(default_factory=dict)
    valid_pixel_count: int = 0
    config: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"aee": float(self.aee), "pck": {k: float(v) for k, v in self.pck.items()},
                "valid_pixel_count": int(self.valid_pixel_count), "config": self.config,
                "curves": self.curves}


def _uv(flow) -> np.ndarray:
    return np.asarray(getattr(flow, "uv", flow), dtype=np.float64)


def endpoint_error(est, gt) -> np.ndarray:
    e, g = _uv(est), _uv(gt)
    if e.shape != g.shape:
        raise ConfigurationError(f"flow resolutions differ: {e.shape} vs {g.shape}")
    return np.sqrt(((e - g) ** 2).sum(axis=0))


def _masked(est, gt, mask) -> np.ndarray:
    err = endpoint_error(est, gt)
    if mask is None:
        mask = np.ones(err.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != err.shape:
        raise ConfigurationError(f"mask shape {mask.shape} does not match flow {err.shape}")
    if not mask.any():
        raise UndefinedMetricError("mask selects no pixels")
    return err[mask]


def aee(est, gt, mask=None) -> float:
    """Mean Euclidean endpoint error over ``mask``."""
    return float(_masked(est, gt, mask).mean())


def pck(est, gt, mask=None, threshold: float = 5.0) -> float:
    """Percentage of masked pixels with endpoint error strictly below ``threshold``."""
    if not threshold > 0:
        raise ConfigurationError("pck threshold must be positive")
    err = _masked(est, gt, mask)
    return float(100.0 * np.count_nonzero(err < threshold) / err.size)


def parse_threshold(spec: str, height: int, width: int) -> float:
    """'5px' -> 5 pixels; '0.05a' -> 0.05 * max(H, W)."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:e-?\d+)?)\s*(px|a)?\s*", spec)
    if not m:
        raise ConfigurationError(f"cannot parse PCK threshold {spec!r}")
    value = float(m.group(1))
    return value * max(height, width) if m.group(2) == "a" else value


def evaluate(est, gt, mask=None, thresholds=("5px",)) -> MetricReport:
    e = _uv(est)
    h, w = e.shape[1:]
    m = np.ones((h, w), bool) if mask is None else np.asarray(mask, bool)
    report = MetricReport(aee=aee(est, gt, m), valid_pixel_count=int(m.sum()))
    for spec in thresholds:
        report.pck[spec] = pck(est, gt, m, parse_threshold(spec, h, w))
    return report
