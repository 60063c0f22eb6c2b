"""Multi-crop views with jitter, and patch masks for the masked-patch objective."""

import math
from dataclasses import dataclass

import numpy as np

from .autograd import resize_array

N_MASK_RATIOS = 32


@dataclass
class CropInfo:
    start: int
    length: int
    fraction: float
    jittered: bool


@dataclass
class ViewSet:
    global_views: np.ndarray  # [B, n_global, global_len]
    local_views: np.ndarray  # [B, n_local, local_len]
    masks: np.ndarray  # [B, n_global, n_patches] bool
    global_meta: list  # [B][n_global] CropInfo
    local_meta: list  # [B][n_local] CropInfo

    @property
    def batch_size(self):
        return self.global_views.shape[0]


def crop_resize(x, start, length, out_len):
    """Contiguous slice ``x[start:start+length]`` linearly resized to ``out_len``."""
    if length < 2:
        raise ValueError(f"crop length must be at least 2, got {length}")
    return resize_array(np.asarray(x)[start:start + length], out_len)


def jitter(x, sigma, rng):
    if sigma < 0:
        raise ValueError(f"jitter sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.array(x, copy=True)
    return (x + rng.normal(0.0, sigma, np.shape(x))).astype(np.asarray(x).dtype)


def _random_crop(x, scale, out_len, rng):
    T = len(x)
    r = float(rng.uniform(*scale))
    length = min(T, max(2, math.ceil(r * T)))
    start = int(rng.integers(0, T - length + 1))
    return crop_resize(x, start, length, out_len), CropInfo(start, length, r, False)


def make_views(x, rng, cfg, n_patches=32):
    """Draw global and local crops for each row of ``x`` ([B, T]).

    ``cfg`` is an ``AugmentConfig``. Jitter noise has standard deviation
    ``jitter_ratio * std`` of the full (uncropped) series and is added after
    resizing: to exactly one global view, and to each local view with
    probability ``local_jitter_prob``.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError(f"expected a [batch, length] array, got shape {x.shape}")
    B, T = x.shape
    if T < 32:
        raise ValueError(f"series length must be at least 32, got {T}")
    G, L = cfg.n_global, cfg.n_local
    gv = np.empty((B, G, cfg.global_len), np.float32)
    lv = np.empty((B, L, cfg.local_len), np.float32)
    gmeta, lmeta = [], []
    for b in range(B):
        sigma = cfg.jitter_ratio * float(np.std(x[b], dtype=np.float64))
        noisy = int(rng.integers(G)) if cfg.jitter_global else -1
        row = []
        for v in range(G):
            view, info = _random_crop(x[b], cfg.global_scale, cfg.global_len, rng)
            if v == noisy:
                view, info.jittered = jitter(view, sigma, rng), True
            gv[b, v] = view
            row.append(info)
        gmeta.append(row)
        row = []
        for v in range(L):
            view, info = _random_crop(x[b], cfg.local_scale, cfg.local_len, rng)
            if rng.random() < cfg.local_jitter_prob:
                view, info.jittered = jitter(view, sigma, rng), True
            lv[b, v] = view
            row.append(info)
        lmeta.append(row)
    masks = sample_masks(B, G, rng, cfg, n_patches)
    return ViewSet(gv, lv, masks, gmeta, lmeta)


def mask_count_choices(n_patches, ratio_range):
    ratios = np.linspace(ratio_range[0], ratio_range[1], N_MASK_RATIOS)
    return np.floor(ratios * n_patches).astype(int)


def sample_masks(B, n_views, rng, cfg, n_patches=32):
    """Boolean masks [B, n_views, n_patches].

    Each (sample, view) is selected with probability ``mask_prob``; a selected
    one masks ``floor(ratio * n_patches)`` distinct positions, the ratio being
    drawn from a linspace grid (``mask_ratio_mode="linspace"``) or uniformly.
    """
    lo, hi = cfg.mask_ratio
    out = np.zeros((B, n_views, n_patches), dtype=bool)
    choices = mask_count_choices(n_patches, cfg.mask_ratio)
    for b in range(B):
        for v in range(n_views):
            if rng.random() >= cfg.mask_prob:
                continue
            if cfg.mask_ratio_mode == "linspace":
                count = int(choices[rng.integers(len(choices))])
            elif cfg.mask_ratio_mode == "uniform":
                count = int(math.floor(rng.uniform(lo, hi) * n_patches))
            else:
                raise ValueError(f"unknown mask_ratio_mode {cfg.mask_ratio_mode!r}")
            out[b, v, rng.choice(n_patches, size=count, replace=False)] = True
    return out
