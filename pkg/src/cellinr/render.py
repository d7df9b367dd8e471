"""Clean-value assembly: blind convolution in training, direct query after.

During training the reconstruction at a voxel is a softmax-weighted sum of
color predictions over its 2N blind-spot samples; the weights come from a
kernel network that sees each sample's encoded position plus the encoded
cube center.  At inference the kernel collapses to a unit weight at the
center, so rendering is a direct color-net query on a regular grid.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import networks
from .sampler import axis_coords
from .volume import Volume3D


@dataclasses.dataclass(frozen=True)
class Prediction:
    """One reconstructed value plus its per-sample provenance."""

    value: float
    colors: np.ndarray   # per-sample color predictions
    weights: np.ndarray  # softmax kernel weights, sum 1 (train mode)
    mode: str            # "train_blind" or "infer_center"


def _encode_pair(points, center, epsilon):
    """Encoded sample positions and the tiled encoded center."""
    pts = np.asarray(points, dtype=np.float32)
    enc_pts = networks.encode(pts, epsilon)
    enc_center = networks.encode(np.asarray(center, dtype=np.float32), epsilon)
    tiled = np.broadcast_to(enc_center, (pts.shape[0], enc_center.shape[-1]))
    return enc_pts, np.ascontiguousarray(tiled)


def predict_blind(sample_set, fine_params, kernel_params, epsilon):
    """Softmax blind convolution over one sample set, plain numpy.

    The kernel scores are shifted by their max before exponentiation;
    softmax is shift-invariant so the weights are unchanged and finite for
    any finite scores.  The returned value is the weighted color sum with
    float64 accumulation.
    """
    pts = sample_set.all_points()
    enc_pts, enc_center = _encode_pair(pts, sample_set.center, epsilon)
    colors = networks.mlp_forward(fine_params, enc_pts)[:, 0]
    scores = networks.mlp_forward(kernel_params, enc_pts, inject=enc_center)[:, 0]
    if not (np.isfinite(colors).all() and np.isfinite(scores).all()):
        raise FloatingPointError("non-finite network output in blind prediction")
    # softmax and the weighted sum run in float64 so the value is a convex
    # combination of the colors to full double precision
    s64 = scores.astype(np.float64)
    e = np.exp(s64 - s64.max())
    w64 = e / e.sum()
    value = float(colors.astype(np.float64) @ w64)
    return Prediction(value=value, colors=colors,
                      weights=w64.astype(scores.dtype), mode="train_blind")


def blind_values_taped(tape, fine, kernel, points, centers, epsilon):
    """Taped batched blind convolution.

    Parameters
    ----------
    tape: the recording Tape; fine/kernel: TapedMlp instances on it.
    points: (B, S, 3) sample coordinates (S = 2N), numpy.
    centers: (B, 3) cube centers, numpy.
    epsilon: encoding depth.

    Returns a Node of shape (B,) with the per-center reconstruction,
    differentiable w.r.t. both networks' parameters.
    """
    b, s, _ = points.shape
    # coordinates follow the parameter dtype: float32 in production, but a
    # float64 parameter set gets a float64 graph end to end
    dtype = fine.params.layers[0][0].dtype
    flat = points.reshape(b * s, 3).astype(dtype)
    enc_pts = networks.encode(flat, epsilon)
    enc_center = networks.encode(np.asarray(centers, dtype=dtype), epsilon)
    enc_center_rep = np.repeat(enc_center, s, axis=0)
    colors = fine.forward(enc_pts)                                # (B*S, 1)
    scores = kernel.forward(enc_pts, inject=enc_center_rep)       # (B*S, 1)
    colors = ad.reshape(colors, (b, s))
    scores = ad.reshape(scores, (b, s))
    weights = ad.softmax_rows(scores)
    return ad.reduce_sum(ad.mul(colors, weights), axis=1)


def predict_center(coord, fine_params, epsilon):
    """Direct color query at one coordinate; the inference path."""
    enc = networks.encode(np.asarray(coord, dtype=np.float32).reshape(1, 3), epsilon)
    return float(networks.mlp_forward(fine_params, enc)[0, 0])


def render_volume(fine_params, out_dims, epsilon, ref_dims, ref_spacing,
                  chunk=65536):
    """Evaluate the color net over a regular grid spanning the domain.

    ``out_dims`` may differ from the training resolution; the output
    spacing is rescaled by the dims ratio so physical extent is preserved.
    Evaluation is chunked to bound peak memory.
    """
    out_dims = tuple(int(n) for n in out_dims)
    if min(out_dims) < 1:
        raise ValueError(f"bad output dims {out_dims}")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    axes = [axis_coords(n).astype(np.float32) for n in out_dims]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(grid.shape[0], dtype=np.float32)
    for start in range(0, grid.shape[0], chunk):
        block = grid[start : start + chunk]
        enc = networks.encode(block, epsilon)
        out[start : start + chunk] = networks.mlp_forward(fine_params, enc)[:, 0]
    spacing = tuple(
        float(sp) * ref_dims[a] / out_dims[a] for a, sp in enumerate(ref_spacing)
    )
    return Volume3D(out.reshape(out_dims), spacing, (0.0, 1.0))
