"""Offline signal conditioning for command and response sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import savgol_filter


@dataclass(frozen=True)
class SavGolSpec:
    window: int = 21
    order: int = 2

    def __post_init__(self):
        if self.window % 2 != 1 or self.window < 1:
            raise ValueError(f"Savitzky-Golay window must be odd, got {self.window}")
        if not 0 <= self.order < self.window:
            raise ValueError(f"polynomial order must satisfy 0 <= order < window, got {self.order}")


def savgol_smooth(series, spec: SavGolSpec = SavGolSpec()) -> np.ndarray:
    """Centered (zero-phase) Savitzky-Golay smoothing along axis 0, mirror-padded.

    Works on a 1-D series or on ``(T, channels)`` arrays, one channel at a time.
    """
    x = np.asarray(series, dtype=float)
    if x.shape[0] < spec.window:
        raise ValueError(f"series of length {x.shape[0]} is shorter than window {spec.window}")
    return savgol_filter(x, spec.window, spec.order, axis=0, mode="mirror")


def spline_acceleration(velocity, dt: float | None = None, t=None) -> np.ndarray:
    """Derivative of a natural cubic spline through uniformly sampled velocities."""
    v = np.asarray(velocity, dtype=float)
    if v.shape[0] < 4:
        raise ValueError("spline acceleration needs at least 4 samples")
    if t is None:
        if dt is None or dt <= 0:
            raise ValueError("a positive sample interval is required")
        t = np.arange(v.shape[0]) * dt
    else:
        t = np.asarray(t, dtype=float)
        steps = np.diff(t)
        if t.shape[0] != v.shape[0] or np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(steps[0], 1.0):
            raise ValueError("sample times must be uniformly spaced and match the data")
    return CubicSpline(t, v, axis=0, bc_type="natural")(t, 1)
