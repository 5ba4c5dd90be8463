"""Flow visualisation with the Middlebury colour wheel."""

from __future__ import annotations

import numpy as np

# segment lengths: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
WHEEL_SEGMENTS = (15, 6, 4, 11, 13, 6)


def make_colorwheel() -> np.ndarray:
    """(55, 3) RGB wheel in [0, 255]; entry 0 is pure red."""
    ry, yg, gc, cb, bm, mr = WHEEL_SEGMENTS
    wheel = np.zeros((sum(WHEEL_SEGMENTS), 3))
    col = 0
    for n, (chan_full, chan_ramp, rising) in zip(
            WHEEL_SEGMENTS, ((0, 1, True), (1, 0, False), (1, 2, True), (2, 1, False), (2, 0, True), (0, 2, False))):
        ramp = np.floor(255 * np.arange(n) / n)
        wheel[col:col + n, chan_full] = 255
        wheel[col:col + n, chan_ramp] = ramp if rising else 255 - ramp
        col += n
    return wheel


def flow_to_color(flow, max_magnitude: float | None = None) -> np.ndarray:
    """RGB uint8 rendering of a (2, H, W) flow.

    Hue follows ``atan2(v, u)`` around the wheel and saturation grows with
    magnitude / ``max_magnitude`` (the 99th percentile when omitted); zero
    flow is white.
    """
    uv = np.asarray(getattr(flow, "uv", flow), dtype=np.float64)
    u, v = uv[0], uv[1]
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99)) if mag.size else 0.0
    rad = np.clip(mag / max_magnitude, 0, 1) if max_magnitude > 0 else np.zeros_like(mag)

    wheel = make_colorwheel()
    n = len(wheel)
    theta = np.mod(np.arctan2(v, u), 2 * np.pi)
    fk = theta / (2 * np.pi) * n
    k0 = np.floor(fk).astype(np.int64) % n
    k1 = (k0 + 1) % n
    f = (fk - np.floor(fk))[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    col = 1 - rad[..., None] * (1 - col)
    return np.rint(255 * col).astype(np.uint8)
