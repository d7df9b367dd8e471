"""In-memory volume type, synthetic phantoms and the microscope noise model.

A ``Volume3D`` is always normalized: float32 voxels in [0, 1], axis order
(x, y, z), positive per-axis spacing.  The ``intensity_range`` records what
[0, 1] maps back to in the units of the source file so quantized round trips
stay interpretable; it is carried along, never applied.

Volumes are immutable after construction (the data buffer is marked
read-only).  Every operation that changes voxels returns a new instance.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import utils


@dataclasses.dataclass(frozen=True)
class Volume3D:
    """Normalized 3D scalar field plus physical metadata."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    intensity_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"degenerate dims {arr.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 or not np.isfinite(s) for s in sp):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        if arr.size and (not np.isfinite(arr).all()):
            raise ValueError("volume contains non-finite voxels")
        lo = float(arr.min()) if arr.size else 0.0
        hi = float(arr.max()) if arr.size else 0.0
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise ValueError(f"voxels outside [0,1]: min={lo} max={hi}")
        # tolerate float fuzz from upstream arithmetic, then freeze
        np.clip(arr, 0.0, 1.0, out=arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "intensity_range", tuple(float(r) for r in self.intensity_range))

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data):
        """Same metadata, new voxels."""
        return Volume3D(data, self.spacing, self.intensity_range)

    def fingerprint(self):
        return utils.volume_fingerprint(self)


@dataclasses.dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a synthetic membrane phantom.

    ``membrane_thickness`` is measured in voxels along the shell normal.
    ``artifact_amplitude`` scales the smooth background field so that its
    peak equals the amplitude; 0 disables it.  ``artifact_scale`` is the
    Gaussian blob sigma in voxels and controls how slowly the background
    varies.
    """

    dims: tuple = (64, 64, 64)
    cell_count: int = 2
    membrane_thickness: float = 1.5
    artifact_amplitude: float = 0.3
    artifact_scale: float = 12.0
    seed: int = 0

    def __post_init__(self):
        d = tuple(int(n) for n in self.dims)
        if len(d) != 3 or min(d) < 16:
            raise ValueError(f"phantom dims must be 3 ints >= 16, got {self.dims}")
        if self.cell_count < 1:
            raise ValueError("cell_count must be >= 1")
        if not 0.0 <= self.artifact_amplitude <= 1.0:
            raise ValueError("artifact_amplitude must lie in [0,1]")
        if self.artifact_scale <= 0 or self.membrane_thickness <= 0:
            raise ValueError("scales must be positive")
        object.__setattr__(self, "dims", d)


def make_phantom(spec):
    """Synthesize (clean, artifact) volumes from a ``PhantomSpec``.

    The clean volume holds ``cell_count`` ellipsoidal membrane shells with
    hard edges and per-cell intensity in [0.8, 1.0]; everything off the
    shells is exactly zero, so the histogram is two well-separated spikes.
    The artifact volume is a sum of a few broad Gaussian blobs rescaled to
    peak at ``artifact_amplitude``; its spectrum lives below the spatial
    frequency 1 / (2 * artifact_scale).

    Deterministic: same spec gives bit-identical outputs.
    """
    nx, ny, nz = spec.dims
    rng = utils.philox_gen(spec.seed, utils.PHANTOM)
    gx, gy, gz = np.ogrid[0:nx, 0:ny, 0:nz]
    gx = gx.astype(np.float64)
    gy = gy.astype(np.float64)
    gz = gz.astype(np.float64)

    clean = np.zeros(spec.dims, dtype=np.float64)
    centers = []
    for _ in range(spec.cell_count):
        axes = rng.uniform(0.17, 0.30, size=3) * min(spec.dims)
        center = None
        for _attempt in range(32):
            cand = np.array(
                [rng.uniform(0.28 * n, 0.72 * n) for n in spec.dims], dtype=np.float64
            )
            if all(np.linalg.norm(cand - c) > 0.9 * max(axes) for c in centers):
                center = cand
                break
        if center is None:
            center = cand  # crowded field, overlap allowed
        centers.append(center)
        intensity = rng.uniform(0.8, 1.0)
        # normalized radial coordinate: 1 on the ellipsoid surface
        f = np.sqrt(
            ((gx - center[0]) / axes[0]) ** 2
            + ((gy - center[1]) / axes[1]) ** 2
            + ((gz - center[2]) / axes[2]) ** 2
        )
        half = spec.membrane_thickness / (2.0 * float(np.mean(axes)))
        shell = np.abs(f - 1.0) <= half
        clean = np.where(shell, np.maximum(clean, intensity), clean)

    artifact = np.zeros(spec.dims, dtype=np.float64)
    if spec.artifact_amplitude > 0.0:
        for _ in range(4):
            c = np.array([rng.uniform(0, n - 1) for n in spec.dims])
            amp = rng.uniform(0.5, 1.0)
            artifact += amp * np.exp(
                -((gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2)
                / (2.0 * spec.artifact_scale**2)
            )
        peak = artifact.max()
        if peak > 0:
            artifact *= spec.artifact_amplitude / peak

    return (
        Volume3D(clean, (1.0, 1.0, 1.0), (0.0, 1.0)),
        Volume3D(artifact, (1.0, 1.0, 1.0), (0.0, 1.0)),
    )


def add_noise(volume, poisson_factor, gauss_sigma, seed):
    """Degrade a volume with scaled Poisson shot noise plus masked Gaussian.

    Shot noise: each voxel v is replaced by ``factor * Poisson(v / factor)``,
    so the mean is preserved and the variance scales with ``poisson_factor``.
    ``poisson_factor = 0`` skips the stage.

    Gaussian stage: ``gauss_sigma`` is quoted on the 0-255 display scale
    (so 20 means sigma 20/255 of full range).  Zero-mean noise of that
    strength is added only where the *input* volume is nonzero, mimicking
    read noise riding on signal while leaving true background empty.

    The result is clipped back to [0, 1].  Deterministic per seed.
    """
    if poisson_factor < 0 or gauss_sigma < 0:
        raise ValueError("noise magnitudes must be non-negative")
    rng = utils.philox_gen(seed, utils.NOISE)
    data = volume.data.astype(np.float64)
    if poisson_factor > 0:
        data = poisson_factor * rng.poisson(data / poisson_factor).astype(np.float64)
    if gauss_sigma > 0:
        support = volume.data != 0
        noise = rng.normal(0.0, gauss_sigma / 255.0, size=data.shape)
        data = np.where(support, data + noise, data)
    np.clip(data, 0.0, 1.0, out=data)
    return volume.with_data(data)
