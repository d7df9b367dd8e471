"""Command-line surface for the denoising pipeline.

Subcommands: enhance, train, render, synth, metrics, profile.  Every run
emits one JSON manifest recording the resolved configuration, input
content hashes, and output paths, so a run can be reproduced exactly.
Commands that write files put the manifest next to their output; metrics
prints it on stdout together with the scores.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
inconsistent inputs), 3 numeric failure (diverged or non-finite results).
Diagnostics go to stderr; machine-readable records go to stdout or files.

Seed precedence: --seed flag, then the config/spec file, then the
CELLINR_SEED environment variable, then 0.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime
import json
import logging
import os
import sys

import click
import numpy as np
import yaml

from . import __version__
from . import checkpoint as ckpt
from . import metrics as metrics_mod
from . import render as render_mod
from . import structure, trainer
from .formats import VolumeIOError, load_volume, save_volume
from .optim import NonFiniteGradientError
from .utils import file_sha256
from .volume import PhantomSpec, add_noise, make_phantom

log = logging.getLogger("cellinr.cli")


def _env_seed():
    """Seed from CELLINR_SEED, or None when the variable is unset."""
    env = os.environ.get("CELLINR_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise click.UsageError(f"CELLINR_SEED is not an integer: {env!r}")


def _clamp_workers(workers):
    if workers < 1:
        raise click.UsageError("--workers must be >= 1")
    if workers > 1:
        click.echo(
            "warning: only single-worker mode is implemented; using --workers 1",
            err=True,
        )
    return 1


def _manifest_dict(command, config, inputs, outputs, seed, extra=None):
    manifest = {
        "tool": "cellinr",
        "version": __version__,
        "command": command,
        "timestamp_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "seed": seed,
        "config": config,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "workers": 1,
    }
    if extra:
        manifest.update(extra)
    return manifest


def _write_manifest(path, command, config, inputs, outputs, seed, extra=None):
    manifest = _manifest_dict(command, config, inputs, outputs, seed, extra)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


@click.group()
def cli():
    """Per-volume self-supervised denoising for 3D microscopy stacks."""


@cli.command("enhance")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_enhanced", type=click.Path(dir_okay=False, writable=True))
@click.argument("out_mask", type=click.Path(dir_okay=False, writable=True))
@click.option("--smoothing-sigma", default=1.0, show_default=True,
              help="Gaussian pre-smoothing width in voxels.")
@click.option("--bins", default=256, show_default=True,
              help="Histogram bins for the threshold search.")
@click.option("--workers", default=1, show_default=True)
def cmd_enhance(input_path, out_enhanced, out_mask, smoothing_sigma, bins, workers):
    """Write the curvature-enhanced volume and its binary signal mask."""
    _clamp_workers(workers)
    vol = load_volume(input_path)
    enhanced, threshold, mask = structure.structure_mask(vol, smoothing_sigma, bins)
    save_volume(enhanced, out_enhanced, dtype="f32")
    save_volume(mask, out_mask, dtype="u8")
    _write_manifest(
        str(out_enhanced) + ".manifest.json", "enhance",
        {"smoothing_sigma": smoothing_sigma, "bins": bins},
        [input_path], [out_enhanced, out_mask], seed=None,
        extra={"threshold": threshold},
    )
    click.echo(json.dumps({"threshold": threshold,
                           "mask_voxels": int(np.count_nonzero(mask.data))}))
    return 0


def _load_train_config(config_path, overrides):
    values = {}
    if config_path is not None:
        with open(config_path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise click.UsageError(f"config file {config_path} must be a mapping")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if values.get("seed") is None:
        env = _env_seed()
        values["seed"] = 0 if env is None else env
    try:
        return trainer.TrainConfig.from_dict(
            {**dataclasses.asdict(trainer.TrainConfig()), **values}
        )
    except (TypeError, ValueError) as e:
        raise click.UsageError(f"bad training configuration: {e}")


@cli.command("train")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False, writable=True))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="YAML file whose keys mirror the training config fields.")
@click.option("--seed", type=int, default=None)
@click.option("--iters", type=int, default=None, help="Maximum training steps.")
@click.option("--tv-weight", type=float, default=None,
              help="Weight of the smoothness term.")
@click.option("--signal-loss-mode",
              type=click.Choice(["masked", "literal", "zeroed_background"]),
              default=None)
@click.option("--variant", type=click.Choice(list(trainer.VARIANTS)), default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--resume-from", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Continue from this checkpoint instead.")
@click.option("--workers", default=1, show_default=True)
def cmd_train(input_path, out_dir, config_path, seed, iters, tv_weight,
              signal_loss_mode, variant, batch_size, resume_from, workers):
    """Fit the networks to one volume; checkpoints land in OUT_DIR."""
    _clamp_workers(workers)
    raw = load_volume(input_path)
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        report = trainer.resume(resume_from, raw, out_dir=out_dir,
                                until_step=iters)
        cfg = report.config
    else:
        overrides = {
            "seed": seed,
            "max_iters": iters,
            "lambda_tv": tv_weight,
            "signal_loss_mode": signal_loss_mode,
            "variant": variant,
            "batch_size": batch_size,
        }
        cfg = _load_train_config(config_path, overrides)
        report = trainer.train(raw, cfg, out_dir=out_dir)
    _write_manifest(
        os.path.join(out_dir, "manifest.json"), "train",
        cfg.to_dict(), [input_path],
        [report.final_checkpoint_path] if report.final_checkpoint_path else [],
        seed=cfg.seed,
        extra={
            "fingerprint": report.fingerprint,
            "final_step": report.final_step,
            "wall_time_s": report.wall_time_s,
            "aborted_at": report.aborted_at,
        },
    )
    summary = {
        "final_step": report.final_step,
        "checkpoint": report.final_checkpoint_path,
        "records": len(report.history),
    }
    if report.history:
        summary["final_total_loss"] = report.history[-1].breakdown.total
    click.echo(json.dumps(summary))
    if report.aborted_at is not None:
        raise FloatingPointError(
            f"training aborted at step {report.aborted_at}; "
            f"last good checkpoint: {report.final_checkpoint_path}"
        )
    return 0


def _parse_dims(text):
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise click.UsageError(f"bad dims {text!r}; expected X,Y,Z")
    if len(dims) != 3 or min(dims) < 1:
        raise click.UsageError(f"bad dims {text!r}; expected three positive integers")
    return dims


@cli.command("render")
@click.argument("checkpoint_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_path", type=click.Path(dir_okay=False, writable=True))
@click.option("--dims", default=None,
              help="Output grid X,Y,Z; defaults to the training dims.")
@click.option("--dtype", type=click.Choice(["u8", "u16", "f32"]), default="f32",
              show_default=True)
@click.option("--chunk", default=65536, show_default=True,
              help="Grid points evaluated per block.")
@click.option("--workers", default=1, show_default=True)
def cmd_render(checkpoint_path, out_path, dims, dtype, chunk, workers):
    """Evaluate a trained model on a regular grid and save the volume."""
    _clamp_workers(workers)
    loaded = ckpt.load_checkpoint(checkpoint_path)
    try:
        cfg = trainer.TrainConfig.from_dict(loaded.config)
        fine = loaded.nets["fine"]
    except (KeyError, TypeError, ValueError) as e:
        raise ckpt.CheckpointError(f"checkpoint not usable for rendering: {e}")
    out_dims = loaded.dims if dims is None else _parse_dims(dims)
    vol = render_mod.render_volume(
        fine, out_dims, cfg.encoding_depth, loaded.dims, loaded.spacing,
        chunk=chunk,
    )
    if not np.isfinite(vol.data).all():
        raise FloatingPointError("rendered volume contains non-finite values")
    save_volume(vol, out_path, dtype=dtype)
    _write_manifest(
        str(out_path) + ".manifest.json", "render",
        {"dims": list(out_dims), "dtype": dtype, "chunk": chunk,
         "checkpoint_step": loaded.step},
        [checkpoint_path], [out_path], seed=cfg.seed,
    )
    click.echo(json.dumps({"dims": list(out_dims), "path": str(out_path)}))
    return 0


@cli.command("synth")
@click.argument("out_clean", type=click.Path(dir_okay=False, writable=True))
@click.argument("out_noisy", type=click.Path(dir_okay=False, writable=True))
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="YAML file with phantom geometry fields.")
@click.option("--poisson", default=0.1, show_default=True,
              help="Shot-noise scale factor; 0 disables.")
@click.option("--gauss-sigma", default=20.0, show_default=True,
              help="Gaussian noise level on the 0-255 display scale.")
@click.option("--seed", type=int, default=None)
def cmd_synth(out_clean, out_noisy, spec_path, poisson, gauss_sigma, seed):
    """Generate a membrane phantom: clean ground truth plus degraded copy."""
    fields = {}
    if spec_path is not None:
        with open(spec_path) as f:
            fields = yaml.safe_load(f) or {}
        if not isinstance(fields, dict):
            raise click.UsageError(f"spec file {spec_path} must be a mapping")
        if "dims" in fields:
            fields["dims"] = tuple(fields["dims"])
    if seed is not None:
        fields["seed"] = int(seed)
    elif "seed" not in fields:
        env = _env_seed()
        fields["seed"] = 0 if env is None else env
    try:
        spec = PhantomSpec(**fields)
    except (TypeError, ValueError) as e:
        raise click.UsageError(f"bad phantom spec: {e}")
    clean, artifact = make_phantom(spec)
    combined = clean.with_data(np.clip(clean.data + artifact.data, 0.0, 1.0))
    noisy = add_noise(combined, poisson, gauss_sigma, spec.seed)
    save_volume(clean, out_clean, dtype="f32")
    save_volume(noisy, out_noisy, dtype="f32")
    _write_manifest(
        str(out_noisy) + ".manifest.json", "synth",
        {**dataclasses.asdict(spec), "dims": list(spec.dims),
         "poisson": poisson, "gauss_sigma": gauss_sigma},
        [p for p in [spec_path] if p], [out_clean, out_noisy], seed=spec.seed,
    )
    click.echo(json.dumps({"clean": str(out_clean), "noisy": str(out_noisy)}))
    return 0


@cli.command("metrics")
@click.argument("path_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("path_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--peak", default=1.0, show_default=True)
@click.option("--per-slice", is_flag=True,
              help="Also report 2D scores per slice along the last axis.")
def cmd_metrics(path_a, path_b, peak, per_slice):
    """Print fidelity scores between two volumes as JSON on stdout."""
    a = load_volume(path_a)
    b = load_volume(path_b)
    report = metrics_mod.metric_report(a, b, peak=peak, with_slices=per_slice)
    scores = {
        "psnr": None if report.psnr == float("inf") else report.psnr,
        "psnr_infinite": report.psnr == float("inf"),
        "ssim": report.ssim,
    }
    if per_slice:
        scores["ssim_slices"] = list(report.ssim_slices)
    record = _manifest_dict(
        "metrics", {"peak": peak, "per_slice": per_slice},
        [path_a, path_b], [], seed=None, extra=scores,
    )
    click.echo(json.dumps(record))
    return 0


def _parse_line(text):
    try:
        ends = text.split(":")
        p0 = tuple(float(v) for v in ends[0].split(","))
        p1 = tuple(float(v) for v in ends[1].split(","))
    except (ValueError, IndexError):
        raise click.UsageError(f"bad line {text!r}; expected x0,y0,z0:x1,y1,z1")
    if len(ends) != 2 or len(p0) != 3 or len(p1) != 3:
        raise click.UsageError(f"bad line {text!r}; expected x0,y0,z0:x1,y1,z1")
    return np.array(p0), np.array(p1)


PROFILE_POINTS = 256


def _trilinear(data, coords):
    """Trilinear sampling with nearest-edge extension.

    Built from nested lerps ``a + t * (b - a)`` so a constant field samples
    to exactly that constant and integer coordinates return stored voxel
    values bit-for-bit.
    """
    dims = np.asarray(data.shape)
    vals = data.astype(np.float64)
    pts = np.clip(coords, 0.0, (dims - 1).astype(np.float64))
    lo = np.minimum(np.floor(pts).astype(np.int64), dims - 1)
    hi = np.minimum(lo + 1, dims - 1)
    f = pts - lo
    x0, y0, z0 = lo[:, 0], lo[:, 1], lo[:, 2]
    x1, y1, z1 = hi[:, 0], hi[:, 1], hi[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    def lerp(a, b, t):
        return a + t * (b - a)

    c00 = lerp(vals[x0, y0, z0], vals[x1, y0, z0], fx)
    c10 = lerp(vals[x0, y1, z0], vals[x1, y1, z0], fx)
    c01 = lerp(vals[x0, y0, z1], vals[x1, y0, z1], fx)
    c11 = lerp(vals[x0, y1, z1], vals[x1, y1, z1], fx)
    return lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)


@cli.command("profile")
@click.argument("vol_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_csv", type=click.Path(dir_okay=False, writable=True))
@click.option("--against", "vol_b", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Second volume sampled along the same line.")
@click.option("--line", required=True, help="Segment as x0,y0,z0:x1,y1,z1 (voxels).")
def cmd_profile(vol_a, out_csv, vol_b, line):
    """Sample intensities along a line segment and write them as CSV."""
    p0, p1 = _parse_line(line)
    volumes = [load_volume(vol_a)]
    headers = ["t", "value_a"]
    if vol_b is not None:
        volumes.append(load_volume(vol_b))
        headers.append("value_b")
    n = 1 if np.array_equal(p0, p1) else PROFILE_POINTS
    t = np.linspace(0.0, 1.0, n)
    coords = p0[None, :] + t[:, None] * (p1 - p0)[None, :]
    columns = [_trilinear(vol.data, coords) for vol in volumes]
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(headers)
        for i in range(n):
            writer.writerow([repr(float(t[i]))] +
                            [repr(float(c[i])) for c in columns])
    _write_manifest(
        str(out_csv) + ".manifest.json", "profile",
        {"line": line, "points": n},
        [p for p in [vol_a, vol_b] if p], [out_csv], seed=None,
    )
    return 0


def main(argv=None):
    """Entry point mapping exceptions onto the documented exit codes."""
    if not logging.getLogger().handlers:
        logging.basicConfig(
            stream=sys.stderr, level=logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
    try:
        rv = cli.main(args=argv, standalone_mode=False)
        return rv if isinstance(rv, int) else 0
    except click.UsageError as e:
        click.echo(f"usage error: {e.format_message()}", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (FloatingPointError, NonFiniteGradientError) as e:
        click.echo(f"numeric failure: {e}", err=True)
        return 3
    except (VolumeIOError, ckpt.CheckpointError, OSError, ValueError) as e:
        click.echo(f"error: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
