"""Per-volume optimization loop.

One model per input volume: preprocessing derives a structure mask, then
each iteration draws a seeded batch of target voxels, builds blind-spot
sample cubes around them and their +1 axis neighbors, runs the batched
prediction, and applies one Adam step on the combined signal +
smoothness objective.  Counter-based RNG streams keyed by the absolute
step number make an interrupted-and-resumed run bit-identical to an
uninterrupted one.

Variants:
  full       curvature-enhanced structure mask + blind-spot sampling +
             smoothness term
  no_struct  as full, but the mask comes from thresholding the smoothed
             intensities directly, skipping curvature enhancement
  baseline   direct coordinate regression of the color net on noisy
             values; no mask, no sampling cubes, no kernel net, no
             smoothness term
"""

from __future__ import annotations

import dataclasses
import gc
import logging
import math
import os
import time
from collections import deque

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import losses, render, sampler, structure
from .networks import TapedMlp, encode, init_mlp
from .optim import AdamState, NonFiniteGradientError, adam_step, lr_schedule
from .utils import INIT_COARSE, INIT_FINE, INIT_KERNEL, TRAIN_STEP, philox_gen
from .volume import Volume3D

log = logging.getLogger("cellinr.trainer")

VARIANTS = ("full", "no_struct", "baseline")
MAX_ITERS_CAP = 500_000


class EmptyMaskError(ValueError):
    """The structure mask found no signal voxels; training refuses to start."""


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """All knobs for one training run; serialized verbatim into checkpoints."""

    encoding_depth: int = 10
    cube_half_width: float = 1.0
    samples_per_cube: int = 64
    exclusion_radius: float = 0.25
    batch_size: int = 4096
    max_iters: int = 50_000
    lr_start: float = 2e-3
    lr_end: float = 2e-5
    weight_decay: float = 1e-6
    lambda_tv: float = 0.15
    smoothing_sigma: float = 1.0
    otsu_bins: int = 256
    seed: int = 0
    checkpoint_interval: int = 1000
    # zeroed_background makes the structure mask actively suppress the
    # low-frequency artifact: voxels outside the mask train toward zero
    signal_loss_mode: str = "zeroed_background"
    hidden_layers: int = 8
    hidden_width: int = 256
    variant: str = "full"
    log_interval: int = 100
    plateau_enabled: bool = False
    plateau_window: int = 2000
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if self.encoding_depth < 1:
            raise ValueError("encoding_depth must be >= 1")
        if self.cube_half_width <= 0:
            raise ValueError("cube_half_width must be positive")
        if not 0 <= self.exclusion_radius < self.cube_half_width:
            raise ValueError("exclusion_radius must lie in [0, cube_half_width)")
        if self.samples_per_cube < 1:
            raise ValueError("samples_per_cube must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.max_iters <= MAX_ITERS_CAP:
            raise ValueError(f"max_iters must lie in [0, {MAX_ITERS_CAP}]")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.weight_decay < 0 or self.lambda_tv < 0 or self.smoothing_sigma < 0:
            raise ValueError("weight_decay, lambda_tv, smoothing_sigma must be >= 0")
        if self.otsu_bins < 2:
            raise ValueError("otsu_bins must be >= 2")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.signal_loss_mode not in losses.SIGNAL_MODES:
            raise ValueError(f"unknown signal_loss_mode {self.signal_loss_mode!r}")
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("hidden_layers and hidden_width must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.plateau_window < 1 or self.plateau_tol < 0:
            raise ValueError("bad plateau settings")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclasses.dataclass(frozen=True)
class TrainRecord:
    """One loss-history entry.

    Holds only run-to-run reproducible quantities; wall-clock timing stays
    out so same-seed runs serialize to bit-identical checkpoints.
    """

    step: int
    lr: float
    breakdown: losses.LossBreakdown

    def as_tuple(self):
        b = self.breakdown
        return (self.step, self.lr, b.signal, b.tv, b.lambda_tv,
                b.n_signal_voxels)

    @classmethod
    def from_tuple(cls, t):
        step, lr, signal, tv, lam, n_vox = t
        return cls(int(step), lr,
                   losses.LossBreakdown(signal, tv, lam, int(n_vox)))


@dataclasses.dataclass
class TrainState:
    """Mutable optimization state carried across steps and checkpoints."""

    coarse: object
    fine: object
    kernel: object
    opt: AdamState
    step: int
    records: list


@dataclasses.dataclass(frozen=True)
class TrainReport:
    """Run summary: loss history plus provenance and the final state."""

    history: tuple
    wall_time_s: float
    final_checkpoint_path: str | None
    config: TrainConfig
    fingerprint: str
    final_step: int
    aborted_at: int | None = None
    state: TrainState | None = dataclasses.field(default=None, repr=False)


_MASK_CACHE: dict = {}


def preprocess(raw, cfg, kind="curvature"):
    """Binary mask for the volume, cached by content fingerprint.

    ``kind`` selects curvature-enhanced thresholding (the full pipeline)
    or plain intensity thresholding (the mask-ablation variant).
    """
    key = (raw.fingerprint(), float(cfg.smoothing_sigma), int(cfg.otsu_bins), kind)
    hit = _MASK_CACHE.get(key)
    if hit is not None:
        return hit
    build = structure.structure_mask if kind == "curvature" else structure.intensity_mask
    _, _, mask = build(raw, cfg.smoothing_sigma, cfg.otsu_bins)
    _MASK_CACHE[key] = mask
    return mask


def init_state(cfg):
    """Fresh networks and optimizer state from the seeded init streams."""
    in_dim = 6 * cfg.encoding_depth
    coarse = init_mlp(in_dim, cfg.hidden_layers, cfg.hidden_width, "softplus",
                      philox_gen(cfg.seed, INIT_COARSE))
    fine = init_mlp(in_dim, cfg.hidden_layers, cfg.hidden_width, "sigmoid",
                    philox_gen(cfg.seed, INIT_FINE))
    inject_layer = max(1, cfg.hidden_layers - 1)
    kernel = init_mlp(in_dim, cfg.hidden_layers, cfg.hidden_width, "linear",
                      philox_gen(cfg.seed, INIT_KERNEL),
                      inject_layer=inject_layer, inject_width=in_dim)
    state = TrainState(coarse=coarse, fine=fine, kernel=kernel,
                       opt=None, step=0, records=[])
    state.opt = AdamState.for_params(_trainable_arrays(state, cfg),
                                     weight_decay=cfg.weight_decay)
    return state


def _trainable_nets(state, cfg):
    # the density net only steers sampling; no loss term reaches it
    if cfg.variant == "baseline":
        return [state.fine]
    return [state.fine, state.kernel]


def _trainable_arrays(state, cfg):
    arrays = []
    for net in _trainable_nets(state, cfg):
        for w, b in net.layers:
            arrays.append(w)
            arrays.append(b)
    return arrays


def _mask_for(raw, cfg):
    if cfg.variant == "baseline":
        return raw.with_data(np.ones(raw.dims, dtype=np.float32))
    kind = "curvature" if cfg.variant == "full" else "intensity"
    mask = preprocess(raw, cfg, kind)
    if not np.any(mask.data > 0):
        raise EmptyMaskError(
            "mask is empty (no signal voxels above threshold); refusing to train"
        )
    return mask


def _batch_loss(tape, state, cfg, raw_data, mask_data, dims, step):
    """Forward pass for one iteration; returns (total, signal, tv, n_signal)."""
    rng = philox_gen(cfg.seed, TRAIN_STEP, step)
    b = cfg.batch_size
    idx = rng.integers(0, np.asarray(dims), size=(b, 3))
    raw_b = raw_data[idx[:, 0], idx[:, 1], idx[:, 2]]
    mask_b = mask_data[idx[:, 0], idx[:, 1], idx[:, 2]]
    _, weight = losses.signal_target(raw_b, mask_b, cfg.signal_loss_mode)
    n_signal = int(np.count_nonzero(weight))

    fine_t = TapedMlp(tape, state.fine)
    if cfg.variant == "baseline":
        centers = sampler.voxel_to_norm(idx, dims).astype(np.float32)
        pred = ad.reshape(fine_t.forward(encode(centers, cfg.encoding_depth)), (b,))
        sig = losses.signal_loss(pred, raw_b, mask_b, cfg.signal_loss_mode)
        tv = tape.leaf(np.asarray(0.0, dtype=np.float32))
        return losses.total_loss(sig, tv, 0.0), sig, tv, n_signal, [fine_t]

    kernel_t = TapedMlp(tape, state.kernel)
    offsets = np.eye(3, dtype=idx.dtype)
    neighbor_idx = np.concatenate(
        [np.minimum(idx + offsets[a], np.asarray(dims) - 1) for a in range(3)], axis=0
    )
    present = np.stack(
        [(idx[:, a] + 1 < dims[a]).astype(np.float32) for a in range(3)], axis=0
    )
    all_idx = np.concatenate([idx, neighbor_idx], axis=0)
    centers_norm = sampler.voxel_to_norm(all_idx, dims)
    points = sampler.build_sample_batch(
        centers_norm, dims, cfg.cube_half_width, cfg.samples_per_cube,
        cfg.exclusion_radius, rng, state.coarse, cfg.encoding_depth,
    )
    values = render.blind_values_taped(
        tape, fine_t, kernel_t, points,
        centers_norm.astype(np.float32), cfg.encoding_depth,
    )
    center_vals = ad.take_rows(values, 0, b)
    neighbor_vals = ad.reshape(ad.take_rows(values, b, 4 * b), (3, b))
    sig = losses.signal_loss(center_vals, raw_b, mask_b, cfg.signal_loss_mode)
    tv = losses.tv_loss(center_vals, neighbor_vals, present)
    return losses.total_loss(sig, tv, cfg.lambda_tv), sig, tv, n_signal, [fine_t, kernel_t]


def _write_checkpoint(out_dir, cfg, raw, fingerprint, state, records):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"ckpt-{state.step:06d}.cinr")
    nets = {"coarse": state.coarse, "fine": state.fine, "kernel": state.kernel}
    ckpt.save_checkpoint(path, cfg.to_dict(), fingerprint, raw.dims, raw.spacing,
                         state.step, nets, state.opt,
                         [r.as_tuple() for r in records])
    return path


def train(raw, cfg, out_dir=None, state=None, until_step=None):
    """Optimize the networks against one volume.

    ``until_step`` stops early at that absolute step (used to split a run
    into segments); checkpoints are written to ``out_dir`` when given.
    Passing ``state`` continues from restored state instead of a fresh
    initialization.
    """
    t0 = time.perf_counter()
    fingerprint = raw.fingerprint()
    mask = _mask_for(raw, cfg)
    if state is None:
        state = init_state(cfg)
    arrays = _trainable_arrays(state, cfg)
    if len(arrays) != len(state.opt.m):
        raise ValueError("optimizer state does not match the trainable arrays")
    stop = cfg.max_iters if until_step is None else min(until_step, cfg.max_iters)
    records = state.records
    raw_data, mask_data, dims = raw.data, mask.data, raw.dims
    final_path = None
    last_ckpt_step = state.step
    aborted_at = None
    plateau_trace = deque()

    while state.step < stop:
        step = state.step + 1
        tape = ad.Tape()
        total, sig, tv, n_signal, taped_nets = _batch_loss(
            tape, state, cfg, raw_data, mask_data, dims, step
        )
        total_val = float(total.value)
        if not math.isfinite(total_val):
            log.error("step %d produced non-finite loss %r; aborting", step, total_val)
            aborted_at = step
            break
        ad.backward(total)
        grads = []
        for taped in taped_nets:
            for gw, gb in taped.grads():
                grads.append(gw)
                grads.append(gb)
        lr = lr_schedule(step, cfg.max_iters, cfg.lr_start, cfg.lr_end)
        try:
            adam_step(arrays, grads, state.opt, lr)
        except NonFiniteGradientError:
            log.error("step %d produced non-finite gradients; aborting", step)
            aborted_at = step
            break
        state.step = step

        if step == 1 or step % cfg.log_interval == 0 or step == stop:
            breakdown = losses.LossBreakdown(
                signal=float(sig.value), tv=float(tv.value),
                lambda_tv=0.0 if cfg.variant == "baseline" else cfg.lambda_tv,
                n_signal_voxels=n_signal,
            )
            records.append(TrainRecord(step, lr, breakdown))
            log.info(
                "step=%d lr=%.6g signal=%.6g tv=%.6g total=%.6g wall_ms=%.1f",
                step, lr, breakdown.signal, breakdown.tv, breakdown.total,
                (time.perf_counter() - t0) * 1000.0,
            )
            if cfg.plateau_enabled:
                plateau_trace.append((step, breakdown.total))
                while plateau_trace[0][0] <= step - 2 * cfg.plateau_window:
                    plateau_trace.popleft()
                old = next(
                    (t for s, t in plateau_trace if s <= step - cfg.plateau_window),
                    None,
                )
                if old is not None and old > 0:
                    if (old - breakdown.total) / old < cfg.plateau_tol:
                        log.info("plateau rule fired at step %d", step)
                        if out_dir is not None:
                            final_path = _write_checkpoint(
                                out_dir, cfg, raw, fingerprint, state, records
                            )
                            last_ckpt_step = step
                        break

        if out_dir is not None and (
            step % cfg.checkpoint_interval == 0 or step == stop
        ):
            final_path = _write_checkpoint(out_dir, cfg, raw, fingerprint, state, records)
            last_ckpt_step = step

        # the step's graph is node<->tape reference cycles holding large
        # arrays; reclaim it now, the cyclic collector's heuristics lag
        # hundreds of MB behind at production batch sizes
        del tape, total, sig, tv, taped_nets, grads
        gc.collect()

    # always leave a checkpoint behind, even for a run of zero steps
    if (
        out_dir is not None
        and aborted_at is None
        and (state.step > last_ckpt_step or final_path is None)
    ):
        final_path = _write_checkpoint(out_dir, cfg, raw, fingerprint, state, records)

    return TrainReport(
        history=tuple(records),
        wall_time_s=time.perf_counter() - t0,
        final_checkpoint_path=final_path,
        config=cfg,
        fingerprint=fingerprint,
        final_step=state.step,
        aborted_at=aborted_at,
        state=state,
    )


def evaluate_loss(raw, cfg, state, probe_size=None, stream=0):
    """Loss of ``state`` on a deterministic probe batch; no parameter update.

    ``stream`` selects the RNG counter; training steps use counters >= 1,
    so the default 0 never collides with a training batch.
    """
    mask = _mask_for(raw, cfg)
    eval_cfg = cfg if probe_size is None else dataclasses.replace(
        cfg, batch_size=probe_size
    )
    tape = ad.Tape()
    total, sig, tv, n_signal, _ = _batch_loss(
        tape, state, eval_cfg, raw.data, mask.data, raw.dims, stream
    )
    breakdown = losses.LossBreakdown(
        signal=float(sig.value), tv=float(tv.value),
        lambda_tv=0.0 if cfg.variant == "baseline" else cfg.lambda_tv,
        n_signal_voxels=n_signal,
    )
    del tape, total, sig, tv
    gc.collect()
    return breakdown


def resume(checkpoint_path, raw, out_dir=None, until_step=None):
    """Continue a checkpointed run against the same volume.

    The stored volume fingerprint must match ``raw`` exactly; a trained
    model is meaningful only for the single volume it was fit to.
    """
    ck = ckpt.load_checkpoint(checkpoint_path)
    if ck.fingerprint != raw.fingerprint():
        raise ValueError(
            "checkpoint fingerprint does not match this volume; "
            "each model belongs to exactly one input"
        )
    cfg = TrainConfig.from_dict(ck.config)
    missing = {"coarse", "fine", "kernel"} - set(ck.nets)
    if missing:
        raise ckpt.CheckpointError(f"checkpoint missing networks: {sorted(missing)}")
    state = TrainState(
        coarse=ck.nets["coarse"], fine=ck.nets["fine"], kernel=ck.nets["kernel"],
        opt=ck.opt, step=ck.step,
        records=[TrainRecord.from_tuple(t) for t in ck.records],
    )
    return train(raw, cfg, out_dir=out_dir, state=state, until_step=until_step)
