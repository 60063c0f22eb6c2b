"""Named, splittable random streams.

Every stochastic choice draws from a Philox stream keyed by the master seed
plus a path of labels, e.g. ``stream(seed, "views", step)``. A run is therefore
reproducible from the seed alone and resuming at step ``s`` needs no saved
generator state.
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        raise ValueError(f"stream keys must be non-negative, got {part}")
    return part


def stream(seed, *path):
    """Return an independent ``np.random.Generator`` for ``(seed, *path)``."""
    ss = np.random.SeedSequence([_key(seed), *(_key(p) for p in path)])
    return np.random.Generator(np.random.Philox(ss))


def truncated_normal(rng, shape, std=0.02, bound=2.0, dtype=np.float32):
    """Normal draws resampled until they fall inside ``±bound·std``."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)


def fan_in_uniform(rng, shape, fan_in=None, dtype=np.float32):
    """Uniform on ``±1/sqrt(fan_in)``; ``fan_in`` defaults to ``shape[0]`` (weights stored [in, out])."""
    fan_in = shape[0] if fan_in is None else fan_in
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)
