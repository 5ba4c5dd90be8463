"""Parametric warps with analytic ground-truth flow, and synthetic test images.

A ``TransformSpec`` maps source pixels to target pixels (``T``).  Ground-truth
flow lives on the target grid: ``F(p) = T^-1(p) - p``, so sampling the source
at ``p + F(p)`` renders the target.  Thin-plate splines are parameterised by
their inverse map directly (target control points plus offsets into the
source), which is how they are used for rendering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .correlation import pixel_grid
from .errors import ConfigurationError, InputError
from .matcher import FlowField

KINDS = ("homography", "affine", "tps")


@dataclass
class TransformSpec:
    kind: str
    matrix: np.ndarray | None = None  # 3x3 homography or 2x3 affine, source -> target
    control_points: np.ndarray | None = None  # (K, 2) target-frame points, tps only
    offsets: np.ndarray | None = None  # (K, 2) source displacement at each control point
    tps_lambda: float = 1e-3
    size: tuple | None = None  # (H, W) the tps was defined on

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown transform kind {self.kind!r}")
        if self.kind == "homography":
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.shape != (3, 3):
                raise ConfigurationError("homography needs a 3x3 matrix")
            if abs(np.linalg.det(m)) <= 1e-8:
                raise ConfigurationError("homography matrix is singular")
            self.matrix = m / m[2, 2]
        elif self.kind == "affine":
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.shape != (2, 3):
                raise ConfigurationError("affine needs a 2x3 matrix")
            if abs(np.linalg.det(m[:, :2])) <= 1e-8:
                raise ConfigurationError("affine matrix is singular")
            self.matrix = m
        else:
            self.control_points = np.asarray(self.control_points, dtype=np.float64)
            self.offsets = np.asarray(self.offsets, dtype=np.float64)
            if self.control_points.shape != self.offsets.shape or self.control_points.shape[1] != 2:
                raise ConfigurationError("tps control points and offsets must both be (K, 2)")
            self._tps = _fit_tps(self.control_points, self.offsets, self.tps_lambda, self.size)

    def inverse_map(self, pts: np.ndarray) -> np.ndarray:
        """Source positions of target points ``pts`` (N, 2)."""
        pts = np.asarray(pts, dtype=np.float64)
        if self.kind == "homography":
            hinv = np.linalg.inv(self.matrix)
            q = np.c_[pts, np.ones(len(pts))] @ hinv.T
            return q[:, :2] / q[:, 2:3]
        if self.kind == "affine":
            a, t = self.matrix[:, :2], self.matrix[:, 2]
            return np.linalg.solve(a, (pts - t).T).T
        return pts + _eval_tps(self._tps, pts)

    def forward_map(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        if self.kind == "homography":
            q = np.c_[pts, np.ones(len(pts))] @ self.matrix.T
            return q[:, :2] / q[:, 2:3]
        if self.kind == "affine":
            return pts @ self.matrix[:, :2].T + self.matrix[:, 2]
        raise ConfigurationError("tps transforms are defined by their inverse map only")

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("homography", "affine"):
            d["matrix"] = self.matrix.tolist()
        else:
            d.update(control_points=self.control_points.tolist(), offsets=self.offsets.tolist(),
                     tps_lambda=self.tps_lambda, size=list(self.size) if self.size else None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        d = dict(d)
        if d.get("size") is not None:
            d["size"] = tuple(d["size"])
        return cls(**d)

    @classmethod
    def identity(cls, kind: str = "homography", size=(64, 64)) -> "TransformSpec":
        if kind == "homography":
            return cls("homography", np.eye(3))
        if kind == "affine":
            return cls("affine", np.eye(2, 3))
        cp = tps_control_grid(*size)
        return cls("tps", control_points=cp, offsets=np.zeros_like(cp), size=tuple(size))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "TransformSpec":
        return cls("affine", np.array([[1.0, 0, dx], [0, 1.0, dy]]))


def _tps_kernel(r2):
    # U(r) = r^2 log r = 0.5 r^2 log r^2, with U(0) = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r2 > 0, 0.5 * r2 * np.log(np.where(r2 > 0, r2, 1)), 0.0)


def _normalise(pts, size):
    h, w = size
    return np.stack([2 * pts[:, 0] / max(w - 1, 1) - 1, 2 * pts[:, 1] / max(h - 1, 1) - 1], axis=1)


def _fit_tps(cp, values, lam, size):
    if size is None:
        size = (cp[:, 1].max() + 1, cp[:, 0].max() + 1)
    c = _normalise(cp, size)
    k = len(c)
    d2 = ((c[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    p = np.c_[np.ones(k), c]
    a = np.zeros((k + 3, k + 3))
    a[:k, :k] = _tps_kernel(d2) + lam * np.eye(k)
    a[:k, k:] = p
    a[k:, :k] = p.T
    rhs = np.zeros((k + 3, 2))
    rhs[:k] = values
    try:
        coef = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("tps kernel system is singular") from exc
    return c, coef, size


def _eval_tps(model, pts):
    c, coef, size = model
    q = _normalise(pts, size)
    k = len(c)
    d2 = ((q[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    return _tps_kernel(d2) @ coef[:k] + np.c_[np.ones(len(q)), q] @ coef[k:]


def tps_control_grid(h: int, w: int, n: int = 3) -> np.ndarray:
    xs = np.linspace(0, w - 1, n)
    ys = np.linspace(0, h - 1, n)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Direct linear transform from 4+ point pairs."""
    rows = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, vt = np.linalg.svd(np.asarray(rows, dtype=np.float64))
    h = vt[-1].reshape(3, 3)
    return h / h[2, 2]


def flow_from_transform(t: TransformSpec, h: int, w: int) -> FlowField:
    """Analytic target-grid flow and validity mask of ``t``."""
    grid = pixel_grid(h, w, np.float64).reshape(2, -1).T
    src = t.inverse_map(grid)
    uv = (src - grid).T.reshape(2, h, w)
    mask = ((src[:, 0] >= 0) & (src[:, 0] <= w - 1) & (src[:, 1] >= 0) & (src[:, 1] <= h - 1)).reshape(h, w)
    return FlowField(uv.astype(np.float32), mask)


def warp_image(image: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Render ``image`` (H, W, 3) sampled at grid + flow; returns (image, valid)."""
    img = np.asarray(image, dtype=np.float32)
    h, w = flow.shape[1:]
    coords = flow.astype(np.float32) + pixel_grid(h, w)
    with T.no_grad():
        out, valid = T.bilinear_sample(T.Tensor(img.transpose(2, 0, 1)), T.Tensor(coords))
    return out.data.transpose(1, 2, 0), valid


def synth_pair(image: np.ndarray, t: TransformSpec, min_valid: float = 0.5):
    """(source, target, gt_flow) with the target rendered by inverse warping."""
    src = np.asarray(image, dtype=np.float32)
    h, w = src.shape[:2]
    gt = flow_from_transform(t, h, w)
    frac = gt.mask.mean()
    if frac < min_valid:
        raise InputError(f"transform leaves only {frac:.0%} of the target valid (need {min_valid:.0%})")
    target, _ = warp_image(src, gt.uv)
    return src, target, gt


def _disc(rng, radius, n):
    r = radius * np.sqrt(rng.uniform(0, 1, n))
    a = rng.uniform(0, 2 * np.pi, n)
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def random_transform(kind: str, magnitude: float, rng: np.random.Generator, size=(96, 96)) -> TransformSpec:
    """Seeded random warp; ``magnitude`` bounds the displacement in pixels.

    homography: each image corner moves at most ``magnitude``; affine: the
    largest corner displacement is at most ``magnitude``; tps: each of the
    3x3 control offsets has length at most ``magnitude``.  ``"mixed"`` picks
    one of the three uniformly.
    """
    if kind == "mixed":
        kind = KINDS[rng.integers(3)]
    h, w = size
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    if kind == "homography":
        if magnitude == 0:
            return TransformSpec.identity("homography")
        dst = corners + _disc(rng, magnitude, 4)
        return TransformSpec("homography", homography_from_points(corners, dst))
    if kind == "affine":
        if magnitude == 0:
            return TransformSpec.identity("affine")
        e = rng.uniform(-1, 1, (2, 3)) * np.array([[1 / w, 1 / h, 1], [1 / w, 1 / h, 1]])
        centred = corners - np.array([(w - 1) / 2, (h - 1) / 2])
        disp = centred @ e[:, :2].T + e[:, 2]
        scale = magnitude * rng.uniform(0, 1) / np.linalg.norm(disp, axis=1).max()
        e *= scale
        a = np.eye(2) + e[:, :2]
        # keep the image centre as the expansion point
        c = np.array([(w - 1) / 2, (h - 1) / 2])
        t = e[:, 2] + c - a @ c
        return TransformSpec("affine", np.c_[a, t])
    if kind == "tps":
        cp = tps_control_grid(h, w)
        off = _disc(rng, magnitude, len(cp)) if magnitude else np.zeros_like(cp)
        return TransformSpec("tps", control_points=cp, offsets=off, size=(h, w))
    raise ConfigurationError(f"unknown transform kind {kind!r}")


def textured_image(size=(96, 96), seed: int = 0, octaves=(24, 12, 6, 3)) -> np.ndarray:
    """Multi-octave colour value noise in [0, 255], shape (H, W, 3)."""
    rng = np.random.default_rng(seed)
    h, w = size
    acc = np.zeros((3, h, w))
    for i, cell in enumerate(octaves):
        gh, gw = max(2, h // cell + 1), max(2, w // cell + 1)
        grid = rng.standard_normal((3, gh, gw))
        acc += T.resize_matrix(gh, h) @ grid @ T.resize_matrix(gw, w).T * (0.8 ** i)
    lo = acc.min(axis=(1, 2), keepdims=True)
    hi = acc.max(axis=(1, 2), keepdims=True)
    return ((acc - lo) / (hi - lo) * 255).transpose(1, 2, 0).astype(np.float32)
