"""Reconstruction quality scores: PSNR and Gaussian-windowed SSIM.

PSNR runs on whole volumes in float64 and returns +inf for identical
inputs.  SSIM uses a 3D Gaussian window (sigma 1.5, 11 voxels per side)
with the usual stabilizers C1 = (0.01 * peak)^2 and C2 = (0.03 * peak)^2;
only fully supported windows enter the mean, so each input axis must be at
least the window width.  A per-slice 2D variant is available for
cross-checking against 2D tooling.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import ndimage

from .volume import Volume3D

WINDOW = 11
SIGMA = 1.5
K1 = 0.01
K2 = 0.03


@dataclasses.dataclass(frozen=True)
class MetricReport:
    """Aggregate scores, with the optional per-slice SSIM breakdown."""

    psnr: float
    ssim: float
    ssim_slices: tuple = ()


def _as_data(v):
    return v.data if isinstance(v, Volume3D) else np.asarray(v)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE); identical inputs give +inf."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    x = _as_data(a).astype(np.float64)
    y = _as_data(b).astype(np.float64)
    _check_pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gauss_kernel():
    half = WINDOW // 2
    g = np.exp(-np.arange(-half, half + 1, dtype=np.float64) ** 2 / (2.0 * SIGMA**2))
    return g / g.sum()


def _window_mean(x, axes):
    """Separable Gaussian-weighted local mean, valid region only."""
    g = _gauss_kernel()
    half = WINDOW // 2
    out = x
    for axis in axes:
        out = ndimage.correlate1d(out, g, axis=axis, mode="constant")
    crop = tuple(
        slice(half, -half) if axis in axes else slice(None) for axis in range(x.ndim)
    )
    return out[crop]


def _ssim_mean(x, y, peak, axes):
    for axis in axes:
        if x.shape[axis] < WINDOW:
            raise ValueError(
                f"axis {axis} has {x.shape[axis]} voxels, below the {WINDOW} window"
            )
    c1 = (K1 * peak) ** 2
    c2 = (K2 * peak) ** 2
    mx = _window_mean(x, axes)
    my = _window_mean(y, axes)
    mxx = _window_mean(x * x, axes)
    myy = _window_mean(y * y, axes)
    mxy = _window_mean(x * y, axes)
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak=1.0, slice_axis=None):
    """Mean local SSIM over all fully supported windows.

    ``slice_axis`` switches to the 2D cross-check mode: each slice along
    that axis is scored with the 2D version of the same window and the
    slice scores are averaged.
    """
    if peak <= 0:
        raise ValueError("peak must be positive")
    x = _as_data(a).astype(np.float64)
    y = _as_data(b).astype(np.float64)
    _check_pair(x, y)
    if slice_axis is None:
        return _ssim_mean(x, y, peak, axes=(0, 1, 2))
    axes = tuple(ax for ax in range(3) if ax != slice_axis)
    scores = [
        _ssim_mean(np.take(x, i, slice_axis), np.take(y, i, slice_axis), peak, axes=(0, 1))
        for i in range(x.shape[slice_axis])
    ]
    return float(np.mean(scores))


def ssim_slices(a, b, peak=1.0, slice_axis=2):
    """Per-slice 2D SSIM scores along ``slice_axis``."""
    x = _as_data(a).astype(np.float64)
    y = _as_data(b).astype(np.float64)
    _check_pair(x, y)
    return tuple(
        _ssim_mean(np.take(x, i, slice_axis), np.take(y, i, slice_axis), peak, axes=(0, 1))
        for i in range(x.shape[slice_axis])
    )


def metric_report(a, b, peak=1.0, with_slices=False, slice_axis=2):
    """Bundle PSNR and SSIM (optionally per-slice) into one record."""
    return MetricReport(
        psnr=psnr(a, b, peak),
        ssim=ssim(a, b, peak),
        ssim_slices=ssim_slices(a, b, peak, slice_axis) if with_slices else (),
    )
