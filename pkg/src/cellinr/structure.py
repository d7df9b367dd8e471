"""Structure amplification: Hessian eigenanalysis, enhancement, binarization.

The pipeline turns a raw volume into a binary structure mask in four steps:
optional Gaussian pre-smoothing, per-voxel 3x3 Hessian by central
differences, normalization of the largest-magnitude eigenvalue into an
enhanced image in [0, 1], and Otsu thresholding with a strict ``>``
comparison.  Thin bright sheets and tubes have one dominant curvature
direction, so ``|lambda_max|`` lights up exactly where membranes live.

Derivatives are taken in index space (unit voxel steps); anisotropic
spacing scales each axis' curvature accordingly and is deliberately not
compensated here.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

from .volume import Volume3D


@dataclasses.dataclass(frozen=True)
class HessianField:
    """Six unique second-derivative grids of one volume.

    Components are signed raw arrays, not normalized volumes.  The full
    symmetric matrix at voxel (i, j, k) is assembled by ``matrix_at``.
    """

    ixx: np.ndarray
    iyy: np.ndarray
    izz: np.ndarray
    ixy: np.ndarray
    ixz: np.ndarray
    iyz: np.ndarray
    sigma_s: float

    @property
    def dims(self):
        return self.ixx.shape

    def matrix_at(self, i, j, k):
        a, b, c = self.ixx[i, j, k], self.iyy[i, j, k], self.izz[i, j, k]
        d, e, f = self.ixy[i, j, k], self.ixz[i, j, k], self.iyz[i, j, k]
        return np.array([[a, d, e], [d, b, f], [e, f, c]], dtype=np.float64)


@dataclasses.dataclass(frozen=True)
class EigenTriple:
    """Eigenvalues ordered by |lambda| ascending, with matching columns."""

    values: np.ndarray  # (3,)
    vectors: np.ndarray  # (3, 3), column i pairs with values[i]


def _smooth(data, sigma_s):
    if sigma_s > 0:
        return ndimage.gaussian_filter(data, sigma_s, mode="nearest", truncate=3.0)
    return data


def hessian(vol, sigma_s):
    """Per-voxel second derivatives with replicate-padded central stencils."""
    if min(vol.dims) < 5:
        raise ValueError(f"hessian needs dims >= 5 per axis, got {vol.dims}")
    if sigma_s < 0:
        raise ValueError("sigma_s must be >= 0")
    v = _smooth(vol.data.astype(np.float64), float(sigma_s))
    p = np.pad(v, 1, mode="edge")
    c = p[1:-1, 1:-1, 1:-1]
    ixx = p[2:, 1:-1, 1:-1] - 2 * c + p[:-2, 1:-1, 1:-1]
    iyy = p[1:-1, 2:, 1:-1] - 2 * c + p[1:-1, :-2, 1:-1]
    izz = p[1:-1, 1:-1, 2:] - 2 * c + p[1:-1, 1:-1, :-2]
    # nested central differences, step 1: d2/dxdy = (v[+,+] - v[+,-] - v[-,+] + v[-,-]) / 4
    ixy = (p[2:, 2:, 1:-1] - p[2:, :-2, 1:-1] - p[:-2, 2:, 1:-1] + p[:-2, :-2, 1:-1]) / 4.0
    ixz = (p[2:, 1:-1, 2:] - p[2:, 1:-1, :-2] - p[:-2, 1:-1, 2:] + p[:-2, 1:-1, :-2]) / 4.0
    iyz = (p[1:-1, 2:, 2:] - p[1:-1, 2:, :-2] - p[1:-1, :-2, 2:] + p[1:-1, :-2, :-2]) / 4.0
    return HessianField(ixx, iyy, izz, ixy, ixz, iyz, float(sigma_s))


def _eigvals3(hxx, hyy, hzz, hxy, hxz, hyz):
    """Analytic eigenvalues of symmetric 3x3 matrices, elementwise over grids.

    Returns (e_hi, e_mid, e_lo) in descending algebraic order, float64.
    Uses the trigonometric solution of the characteristic cubic; the
    acos argument is clipped so roundoff cannot leave the real branch.
    """
    q = (hxx + hyy + hzz) / 3.0
    p1 = hxy**2 + hxz**2 + hyz**2
    p2 = (hxx - q) ** 2 + (hyy - q) ** 2 + (hzz - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0, p, 1.0)
    b00 = (hxx - q) / safe
    b11 = (hyy - q) / safe
    b22 = (hzz - q) / safe
    b01 = hxy / safe
    b02 = hxz / safe
    b12 = hyz / safe
    det_b = (
        b00 * (b11 * b22 - b12 * b12)
        - b01 * (b01 * b22 - b12 * b02)
        + b02 * (b01 * b12 - b11 * b02)
    )
    r = np.clip(det_b / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e_hi = q + 2.0 * p * np.cos(phi)
    e_lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e_mid = 3.0 * q - e_hi - e_lo
    flat = p2 == 0
    if np.any(flat):
        e_hi = np.where(flat, q, e_hi)
        e_mid = np.where(flat, q, e_mid)
        e_lo = np.where(flat, q, e_lo)
    return e_hi, e_mid, e_lo


def _jacobi3(a):
    """Cyclic Jacobi sweeps on a 3x3 symmetric matrix; (values, vectors)."""
    a = a.copy()
    v = np.eye(3)
    scale = max(1.0, np.abs(a).max())
    for _ in range(30):
        off = np.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= 1e-16 * scale:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if abs(apq) <= 1e-18 * scale:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
            if theta == 0.0:
                t = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    return np.diag(a).copy(), v


def eigen3_symmetric(h):
    """Decompose one symmetric 3x3 matrix; eigenpairs sorted by |lambda|.

    The analytic cubic solution provides the eigenvalues; Jacobi rotations
    polish them and supply orthonormal eigenvectors to machine precision.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {h.shape}")
    scale = max(1.0, np.abs(h).max())
    if np.abs(h - h.T).max() > 1e-9 * scale:
        raise ValueError("matrix is not symmetric within 1e-9")
    hs = (h + h.T) / 2.0
    analytic = np.sort(np.array(_eigvals3(*[hs[i, j] for i, j in
                                            ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))])))
    values, vectors = _jacobi3(hs)
    order = np.argsort(np.abs(values), kind="stable")
    values = values[order]
    vectors = vectors[:, order]
    # the closed form and the iterative polish must agree on the spectrum
    if np.abs(np.sort(values) - analytic).max() > 1e-8 * scale:
        raise AssertionError("analytic and iterative eigenvalues disagree")
    return EigenTriple(values, vectors)


def principal_abs_eigenvalue(field):
    """|lambda| of largest magnitude per voxel, vectorized over the field."""
    e_hi, _, e_lo = _eigvals3(field.ixx, field.iyy, field.izz,
                              field.ixy, field.ixz, field.iyz)
    return np.maximum(np.abs(e_hi), np.abs(e_lo))


def enhance(vol, sigma_s):
    """Largest-|eigenvalue| image normalized by its global maximum.

    Constant inputs have zero Hessian everywhere and enhance to all zeros;
    any other input attains an exact 1.0 at the argmax.  Invariant to
    adding a constant and to positive rescaling of the input.
    """
    field = hessian(vol, sigma_s)
    mag = principal_abs_eigenvalue(field)
    peak = mag.max()
    if peak == 0.0:
        return Volume3D(np.zeros(vol.dims, dtype=np.float32), vol.spacing, (0.0, 1.0))
    return Volume3D((mag / peak).astype(np.float32), vol.spacing, (0.0, 1.0))


def otsu_threshold(values, bins=256):
    """Histogram threshold maximizing between-class variance.

    ``values`` must lie in [0, 1]; the histogram uses ``bins`` equal cells
    over that range and candidate cuts sit on interior bin edges.  Classes
    are represented by bin midpoints.  Ties pick the lowest cut; constant
    input degenerates to the single occupied bin's upper edge.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    flat = np.asarray(values).reshape(-1)
    if flat.size == 0:
        raise ValueError("cannot threshold an empty grid")
    counts, edges = np.histogram(flat, bins=bins, range=(0.0, 1.0))
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(counts)
    total = w0[-1]
    moment = np.cumsum(counts * centers)
    head_w = w0[:-1].astype(np.float64)
    tail_w = (total - w0[:-1]).astype(np.float64)
    valid = (head_w > 0) & (tail_w > 0)
    if not valid.any():
        occupied = np.nonzero(counts)[0][0]
        return float(edges[occupied + 1])
    mu0 = np.where(valid, moment[:-1] / np.where(head_w > 0, head_w, 1.0), 0.0)
    mu1 = np.where(valid, (moment[-1] - moment[:-1]) / np.where(tail_w > 0, tail_w, 1.0), 0.0)
    between = np.where(valid, head_w * tail_w * (mu0 - mu1) ** 2, -1.0)
    return float(edges[int(np.argmax(between)) + 1])


def binarize(en, mu):
    """Strict mask: voxel = 1 where the enhanced value exceeds ``mu``."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"threshold {mu} outside [0,1]")
    mask = (en.data > np.float32(mu)).astype(np.float32)
    return Volume3D(mask, en.spacing, (0.0, 1.0))


def structure_mask(vol, sigma_s, bins=256):
    """Full amplification chain; returns (enhanced, threshold, mask)."""
    en = enhance(vol, sigma_s)
    mu = otsu_threshold(en.data, bins)
    return en, mu, binarize(en, mu)


def intensity_mask(vol, sigma_s, bins=256):
    """Binarization without curvature enhancement: Otsu directly on the
    smoothed intensities.  The de-enhanced counterpart of
    :func:`structure_mask`, used by the mask-ablation training variant.
    Returns (smoothed, threshold, mask)."""
    if sigma_s < 0:
        raise ValueError("sigma_s must be >= 0")
    sm = _smooth(vol.data.astype(np.float64), float(sigma_s))
    smoothed = Volume3D(sm.astype(np.float32), vol.spacing, (0.0, 1.0))
    mu = otsu_threshold(smoothed.data, bins)
    return smoothed, mu, binarize(smoothed, mu)
