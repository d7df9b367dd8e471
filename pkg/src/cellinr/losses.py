"""Training objective: signal reconstruction plus total-variation smoothness.

The signal term compares reconstructions against the raw volume under the
structure mask; three interpretations are selectable (see
:func:`signal_loss`).  The TV term penalizes the mean absolute difference
between each batch voxel's reconstruction and its +1-voxel neighbors along
the three axes, a stochastic estimate of grid total variation restricted
to the sampled batch.  Both terms are means, so the balance coefficient is
independent of batch size.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad

SIGNAL_MODES = ("masked", "literal", "zeroed_background")


@dataclasses.dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components for one step; total recomposed in float64."""

    signal: float
    tv: float
    lambda_tv: float
    n_signal_voxels: int
    total: float = dataclasses.field(init=False)

    def __post_init__(self):
        for name in ("signal", "tv"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} loss must be finite and >= 0, got {val}")
        object.__setattr__(self, "total", float(self.signal) + self.lambda_tv * float(self.tv))


def signal_target(raw, mask, mode):
    """Per-voxel regression target and weighting for a signal-loss mode.

    Returns (target, weight) numpy arrays.  Modes:

    ``masked``
        Fit raw intensities on mask voxels only; off-mask voxels carry
        zero weight and do not constrain the reconstruction.
    ``literal``
        Fit ``relu(raw - mask)`` everywhere.  With a {0,1} mask this
        zeroes the target *inside* the mask and keeps raw values outside
        it; kept selectable for ablation of the exact formula.
    ``zeroed_background``
        Fit ``mask * raw`` everywhere: raw values inside the mask, zero
        outside, so off-structure intensity is actively suppressed.
    """
    if mode not in SIGNAL_MODES:
        raise ValueError(f"unknown signal mode {mode!r}, expected one of {SIGNAL_MODES}")
    raw = np.asarray(raw)
    mask = np.asarray(mask)
    if raw.shape != mask.shape:
        raise ValueError(f"raw shape {raw.shape} != mask shape {mask.shape}")
    if mode == "masked":
        return raw, mask.astype(raw.dtype)
    if mode == "literal":
        return np.maximum(raw - mask, 0.0).astype(raw.dtype), np.ones_like(raw)
    return (mask * raw).astype(raw.dtype), np.ones_like(raw)


def signal_loss(pred, raw, mask, mode="masked"):
    """Weighted mean squared error of predictions against the mode target.

    ``pred`` is a tape Node of shape (B,); ``raw``/``mask`` are numpy
    arrays of the same length.  Returns a scalar Node.  A batch with zero
    total weight (masked mode, no signal voxels) contributes an exact 0.
    """
    raw = np.asarray(raw, dtype=np.asarray(pred.value).dtype)
    if pred.value.shape != raw.shape:
        raise ValueError(f"pred shape {pred.value.shape} != raw shape {raw.shape}")
    target, weight = signal_target(raw, mask, mode)
    denom = float(np.sum(weight, dtype=np.float64))
    if denom == 0.0:
        return pred.tape.leaf(np.asarray(0.0, dtype=pred.value.dtype))
    sq = ad.square(ad.sub(pred, target))
    weighted = ad.mul(sq, weight) if mode == "masked" else sq
    return ad.div(ad.reduce_sum(weighted), np.asarray(denom, dtype=pred.value.dtype))


def tv_loss(center_pred, neighbor_pred, present):
    """Mean |neighbor - center| over the present neighbor pairs.

    ``center_pred``: Node (B,).  ``neighbor_pred``: Node (3, B), the +1
    predictions along each axis.  ``present``: numpy {0,1} of shape
    (3, B); pairs whose neighbor falls outside the volume carry 0 and are
    excluded from both numerator and denominator.  No present pairs gives
    an exact 0.
    """
    present = np.asarray(present)
    if neighbor_pred.value.shape != present.shape:
        raise ValueError(
            f"neighbor shape {neighbor_pred.value.shape} != present shape {present.shape}"
        )
    count = float(np.sum(present, dtype=np.float64))
    if count == 0.0:
        return center_pred.tape.leaf(np.asarray(0.0, dtype=center_pred.value.dtype))
    diff = ad.absolute(ad.sub(neighbor_pred, ad.reshape(center_pred, (1, -1))))
    gated = ad.mul(diff, present.astype(center_pred.value.dtype))
    return ad.div(ad.reduce_sum(gated), np.asarray(count, dtype=center_pred.value.dtype))


def total_loss(signal, tv, lambda_tv):
    """signal + lambda * tv as a taped scalar."""
    if lambda_tv < 0:
        raise ValueError("lambda_tv must be >= 0")
    lam = np.asarray(lambda_tv, dtype=signal.value.dtype)
    return ad.add(signal, ad.mul(tv, lam))
