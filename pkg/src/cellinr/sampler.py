"""Blind-spot cube sampling around target voxels.

Training never shows a network the voxel it is asked to reconstruct.  For
each target voxel this module draws N coarse points uniformly from the
axis-aligned cube of half-width ``h`` voxels around it (clipped to the
volume domain), rejecting anything closer than ``d_ex`` voxels in the L-inf
sense.  A density network scores the coarse points, and N fine points are
resampled from them proportionally to density, each jittered inside a
sub-cube so fine sampling refines rather than repeats coarse locations.

Coordinates are normalized per axis: voxel i of n maps to 2i/(n-1) - 1, so
the volume spans [-1, 1]^3 regardless of resolution.  ``h`` and ``d_ex``
are quoted in voxels and converted per axis, which keeps the blind spot
one fixed voxel-neighborhood even on anisotropic grids.

Geometry is computed in float64 and stored as float32; acceptance tests
re-measure distances on the stored float32 values, so rejection decisions
are made on the rounded coordinates too.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import networks

log = logging.getLogger(__name__)

MAX_REJECTION_ATTEMPTS = 1000


class RejectionError(RuntimeError):
    """Rejection sampling failed to place a point outside the blind spot."""


def axis_steps(dims):
    """Normalized-coordinate width of one voxel per axis (inf-free)."""
    return np.array([2.0 / (n - 1) if n > 1 else 2.0 for n in dims], dtype=np.float64)


def axis_coords(n):
    """Normalized coordinates of all voxels along one axis of length n."""
    if n == 1:
        return np.zeros(1, dtype=np.float64)
    return 2.0 * np.arange(n, dtype=np.float64) / (n - 1) - 1.0


def voxel_to_norm(idx, dims):
    """Map integer voxel indices (..., 3) to normalized [-1,1]^3, float64."""
    idx = np.asarray(idx, dtype=np.float64)
    out = np.empty_like(idx)
    for a, n in enumerate(dims):
        out[..., a] = 0.0 if n == 1 else 2.0 * idx[..., a] / (n - 1) - 1.0
    return out


def voxel_linf(points, center, dims):
    """L-inf distance from center in voxel units, per point."""
    steps = axis_steps(dims)
    delta = np.abs(np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64))
    return (delta / steps).max(axis=-1)


def _cube_bounds(centers, dims, h):
    """Per-axis cube bounds around normalized centers, clipped to [-1, 1]."""
    steps = axis_steps(dims)
    half = h * steps
    lo = np.clip(centers - half, -1.0, 1.0)
    hi = np.clip(centers + half, -1.0, 1.0)
    fixed = np.array([n == 1 for n in dims])
    if fixed.any():
        lo[..., fixed] = 0.0
        hi[..., fixed] = 0.0
    return lo, hi


def _reject_into(points, centers, dims, lo, hi, d_ex, rng, jitter_centers=None, jitter_half=None):
    """Redraw points violating the blind spot until all clear or give up.

    ``points`` has shape (B, K, 3) float32 and is modified in place.
    When ``jitter_centers`` is given, redraws stay inside the jitter
    sub-cube around the matching anchor instead of the full cube.
    """
    for attempt in range(MAX_REJECTION_ATTEMPTS):
        dist = voxel_linf(points, centers[:, None, :], dims)
        bad = dist < d_ex
        if not bad.any():
            return
        where_b, where_k = np.nonzero(bad)
        if jitter_centers is None:
            new_lo = lo[where_b]
            new_hi = hi[where_b]
        else:
            anchors = jitter_centers[where_b, where_k]
            new_lo = np.maximum(anchors - jitter_half, lo[where_b])
            new_hi = np.minimum(anchors + jitter_half, hi[where_b])
        fresh = rng.uniform(new_lo, new_hi).astype(np.float32)
        np.clip(fresh, new_lo.astype(np.float32), new_hi.astype(np.float32), out=fresh)
        points[where_b, where_k] = fresh
    raise RejectionError(
        f"blind-spot rejection failed for {int(bad.sum())} points after "
        f"{MAX_REJECTION_ATTEMPTS} attempts (d_ex too close to h?)"
    )


def sample_coarse_batch(centers, dims, h, n_pts, d_ex, rng):
    """Uniform cube samples for a batch of normalized centers.

    Parameters
    ----------
    centers: (B, 3) normalized target coordinates.
    dims: volume dims, for voxel-unit conversion and domain clipping.
    h: cube half-width in voxels.  n_pts: samples per center.
    d_ex: blind-spot exclusion radius in voxels, 0 <= d_ex < h.
    rng: numpy Generator; the draw sequence is deterministic per stream.

    Returns (B, n_pts, 3) float32.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if not 0 <= d_ex < h:
        raise ValueError(f"need 0 <= d_ex < h, got d_ex={d_ex} h={h}")
    if n_pts < 1:
        raise ValueError("need at least one sample point")
    centers = np.asarray(centers, dtype=np.float64)
    squeeze = centers.ndim == 1
    if squeeze:
        centers = centers[None, :]
    lo, hi = _cube_bounds(centers, dims, h)
    pts = rng.uniform(lo[:, None, :], hi[:, None, :],
                      size=(centers.shape[0], n_pts, 3)).astype(np.float32)
    np.clip(pts, lo[:, None, :].astype(np.float32), hi[:, None, :].astype(np.float32), out=pts)
    _reject_into(pts, centers, dims, lo, hi, d_ex, rng)
    return pts[0] if squeeze else pts


def sample_coarse(center, h, n_pts, d_ex, rng, dims):
    """Single-center convenience wrapper around the batched sampler."""
    return sample_coarse_batch(np.asarray(center)[None, :], dims, h, n_pts, d_ex, rng)[0]


def resample_indices(densities, n_f, rng):
    """CDF-inversion draw of n_f indices per row, proportional to density.

    Rows that sum to zero fall back to the uniform distribution (logged).
    Returns (B, n_f) int indices into the rows.
    """
    dens = np.asarray(densities, dtype=np.float64)
    squeeze = dens.ndim == 1
    if squeeze:
        dens = dens[None, :]
    if (dens < 0).any():
        raise ValueError("densities must be nonnegative")
    totals = dens.sum(axis=1, keepdims=True)
    dead = totals[:, 0] == 0.0
    if dead.any():
        log.debug("uniform fallback for %d all-zero density rows", int(dead.sum()))
        dens = dens.copy()
        dens[dead] = 1.0
        totals = dens.sum(axis=1, keepdims=True)
    cdf = np.cumsum(dens, axis=1) / totals
    cdf[:, -1] = 1.0
    u = rng.random((dens.shape[0], n_f))
    idx = np.sum(u[:, :, None] >= cdf[:, None, :], axis=2)
    np.clip(idx, 0, dens.shape[1] - 1, out=idx)
    return idx[0] if squeeze else idx


def importance_resample_batch(coarse_pts, densities, n_f, rng, centers, dims, h, d_ex):
    """Density-guided fine points: pick coarse anchors by CDF, jitter locally.

    The jitter sub-cube half-width is ``h / ceil(N^(1/3))`` voxels (N being
    the coarse count), clipped to the sampling cube, with blind-spot
    rejection re-applied.  Returns (B, n_f, 3) float32.
    """
    coarse_pts = np.asarray(coarse_pts)
    squeeze = coarse_pts.ndim == 2
    if squeeze:
        coarse_pts = coarse_pts[None, ...]
        densities = np.asarray(densities)[None, ...]
    centers = np.asarray(centers, dtype=np.float64).reshape(coarse_pts.shape[0], 3)
    n_coarse = coarse_pts.shape[1]
    idx = resample_indices(densities, n_f, rng)
    anchors = np.take_along_axis(coarse_pts, idx[:, :, None], axis=1).astype(np.float64)
    steps = axis_steps(dims)
    sub_half = (h / np.ceil(n_coarse ** (1.0 / 3.0))) * steps
    lo, hi = _cube_bounds(centers, dims, h)
    jlo = np.maximum(anchors - sub_half, lo[:, None, :])
    jhi = np.minimum(anchors + sub_half, hi[:, None, :])
    fine = rng.uniform(jlo, jhi).astype(np.float32)
    np.clip(fine, jlo.astype(np.float32), jhi.astype(np.float32), out=fine)
    _reject_into(fine, centers, dims, lo, hi, d_ex, rng,
                 jitter_centers=anchors, jitter_half=sub_half)
    return fine[0] if squeeze else fine


def importance_resample(coarse_pts, densities, n_f, rng, *, center, dims, h, d_ex):
    """Single-center wrapper; see :func:`importance_resample_batch`."""
    return importance_resample_batch(coarse_pts, densities, n_f, rng,
                                     np.asarray(center)[None, :], dims, h, d_ex)[0]


@dataclasses.dataclass(frozen=True)
class SampleSet:
    """The 2N blind-spot points serving one target voxel."""

    center: np.ndarray      # (3,) float32 normalized coords
    coarse_pts: np.ndarray  # (N, 3) float32
    fine_pts: np.ndarray    # (N, 3) float32
    h: float                # cube half-width, voxels

    def all_points(self):
        """Merged (2N, 3) array, coarse first."""
        return np.concatenate([self.coarse_pts, self.fine_pts], axis=0)


def coarse_density(coarse_params, points, epsilon):
    """Density-net response for sample points; plain forward, no gradients."""
    flat = points.reshape(-1, 3)
    enc = networks.encode(flat.astype(np.float32), epsilon)
    dens = networks.mlp_forward(coarse_params, enc)[:, 0]
    return dens.reshape(points.shape[:-1])


def build_sample_batch(centers, dims, h, n_pts, d_ex, rng, coarse_params, epsilon):
    """Coarse + density-guided fine points for a batch of centers.

    Returns (B, 2N, 3) float32 with the coarse half first.  The density
    net steers only where fine points concentrate; its evaluation is not
    recorded for differentiation.
    """
    centers = np.asarray(centers, dtype=np.float64)
    coarse = sample_coarse_batch(centers, dims, h, n_pts, d_ex, rng)
    dens = coarse_density(coarse_params, coarse, epsilon)
    fine = importance_resample_batch(coarse, dens, n_pts, rng, centers, dims, h, d_ex)
    return np.concatenate([coarse, fine], axis=1)


def build_sample_set(center, dims, h, n_pts, d_ex, rng, coarse_params, epsilon):
    """Assemble one :class:`SampleSet` around a normalized center."""
    merged = build_sample_batch(np.asarray(center)[None, :], dims, h, n_pts, d_ex,
                                rng, coarse_params, epsilon)[0]
    return SampleSet(
        center=np.asarray(center, dtype=np.float32),
        coarse_pts=merged[:n_pts],
        fine_pts=merged[n_pts:],
        h=float(h),
    )
