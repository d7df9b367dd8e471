"""Counter-based RNG streams and content fingerprints.

Every random draw in the pipeline comes from a Philox generator keyed by
``(seed, stream tag, counter)``.  Streams are independent and stateless:
iteration ``i`` of training always sees the same draws no matter how many
iterations ran before it in this process, which is what makes
checkpoint/resume bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import hashlib

import numpy as np

# stream tags; training iterations use TRAIN_STEP with counter = step index
INIT_COARSE = 1
INIT_FINE = 2
INIT_KERNEL = 3
PHANTOM = 4
NOISE = 5
TRAIN_STEP = 6


def philox_gen(seed, tag, counter=0):
    """Generator for the (seed, tag, counter) stream."""
    key = np.array(
        [np.uint64(seed % (1 << 64)), np.uint64(((tag & 0xFFFF) << 48) | (counter & 0xFFFFFFFFFFFF))],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def volume_fingerprint(volume):
    """sha256 over dims, spacing and raw voxel bytes; hex digest."""
    h = hashlib.sha256()
    h.update(np.asarray(volume.dims, dtype=np.int64).tobytes())
    h.update(np.asarray(volume.spacing, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(volume.data, dtype=np.float32).tobytes())
    return h.hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
