"""Token generator: univariate series -> patch embeddings.

Feature layout fed to the final projector, in order::

    [conv(z-scored) pooled | conv(first difference) pooled | mean encoding | std encoding]
     d_model                 d_model                         d_scalar        d_scalar
"""

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import fan_in_uniform

ZSCORE_EPS = 1e-6
PATCH_STD_EPS = 1e-8


def projector_width(cfg):
    return 2 * cfg.d_model + 2 * cfg.d_scalar


def init_tokenizer(cfg, rng):
    d, ds, k = cfg.d_model, cfg.d_scalar, cfg.conv_kernel
    if k % 2 == 0:
        raise ValueError(f"conv kernel size must be odd, got {k}")
    n_scales = len(cfg.scalar_scales)
    bound = 1.0 / np.sqrt(k)  # fan_in = 1 channel * k taps
    p = {}
    for branch in ("conv_a", "conv_b"):
        p[f"tokenizer.{branch}.weight"] = rng.uniform(-bound, bound, (d, 1, k)).astype(np.float32)
        p[f"tokenizer.{branch}.bias"] = rng.uniform(-bound, bound, d).astype(np.float32)
    for branch in ("norm_a", "norm_b"):
        p[f"tokenizer.{branch}.weight"] = np.ones(d, np.float32)
        p[f"tokenizer.{branch}.bias"] = np.zeros(d, np.float32)
    for stat in ("mean_enc", "std_enc"):
        p[f"tokenizer.{stat}.embed"] = rng.standard_normal((n_scales, ds)).astype(np.float32)
        p[f"tokenizer.{stat}.bias"] = np.zeros((n_scales, ds), np.float32)
    p["tokenizer.proj.weight"] = fan_in_uniform(rng, (projector_width(cfg), d))
    p["tokenizer.proj.bias"] = np.zeros(d, np.float32)
    return {name: Tensor(v, requires_grad=True) for name, v in p.items()}


def select_scale(values, scales, tolerance=1.1):
    """Index of the smallest scale s with |v| <= tolerance*s (largest scale as fallback)."""
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise ValueError("scalar encoder received non-finite values")
    limits = tolerance * np.asarray(scales, dtype=np.float64)
    idx = np.searchsorted(limits, np.abs(values.astype(np.float64)), side="left")
    return np.minimum(idx, len(scales) - 1)


def encode_scalar(v, embed, bias, scales, tolerance=1.1):
    """Multi-scale scalar encoding: ``embed[i] * (v / s_i) + bias[i]``.

    ``v`` has any shape; the output appends a trailing axis of width
    ``embed.shape[1]``. The scale choice itself is not differentiated.
    """
    if not isinstance(v, Tensor):
        v = Tensor(v)
    idx = select_scale(v.data, scales, tolerance)
    s = np.asarray(scales, dtype=v.dtype)[idx]
    normalized = (v / s).reshape(v.shape + (1,))
    return normalized * embed[idx] + bias[idx]


def _branch(series, params, name, norm, cfg):
    B, T = series.shape
    h = ag.conv1d_same(series.reshape(B, 1, T), params[f"tokenizer.{name}.weight"], params[f"tokenizer.{name}.bias"])
    h = ag.layer_norm(h.transpose(0, 2, 1), params[f"tokenizer.{norm}.weight"], params[f"tokenizer.{norm}.bias"], cfg.ln_eps)
    P = cfg.n_patches
    return h.reshape(B, P, T // P, cfg.d_model).mean(axis=2)


def tokenize(x, params, cfg):
    """[B, T] series -> [B, n_patches, d_model] tokens."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 2:
        raise ValueError(f"expected a [batch, length] array, got shape {x.shape}")
    B, T = x.shape
    P = cfg.n_patches
    if T % P != 0:
        raise ValueError(f"series length {T} is not divisible by {P} patches")

    xc = x - x.mean(axis=1, keepdims=True)
    z = xc / (ag.sqrt((xc * xc).mean(axis=1, keepdims=True)) + ZSCORE_EPS)
    dz = ag.concat([Tensor(np.zeros((B, 1), x.dtype)), z[:, 1:] - z[:, :-1]], axis=1)

    conv_a = _branch(z, params, "conv_a", "norm_a", cfg)
    conv_b = _branch(dz, params, "conv_b", "norm_b", cfg)

    patches = x.reshape(B, P, T // P)
    pmean = patches.mean(axis=2)
    pc = patches - pmean.reshape(B, P, 1)
    pstd = ag.sqrt((pc * pc).mean(axis=2) + PATCH_STD_EPS)
    scales, tol = cfg.scalar_scales, cfg.scale_tolerance
    mean_enc = encode_scalar(pmean, params["tokenizer.mean_enc.embed"], params["tokenizer.mean_enc.bias"], scales, tol)
    std_enc = encode_scalar(pstd, params["tokenizer.std_enc.embed"], params["tokenizer.std_enc.bias"], scales, tol)

    feats = ag.concat([conv_a, conv_b, mean_enc, std_enc], axis=-1)
    return feats @ params["tokenizer.proj.weight"] + params["tokenizer.proj.bias"]
