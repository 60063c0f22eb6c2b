"""Pre-norm transformer encoder over patch tokens with CLS and MASK tokens."""

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import fan_in_uniform, truncated_normal


def sinusoidal_pe(n_positions, d):
    if d % 2:
        raise ValueError(f"positional encoding dimension must be even, got {d}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    inv_freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((n_positions, d))
    pe[:, 0::2] = np.sin(pos * inv_freq)
    pe[:, 1::2] = np.cos(pos * inv_freq)
    return pe


def init_encoder(cfg, rng):
    d, inner, hidden, std = cfg.d_model, cfg.n_heads * cfg.head_dim, cfg.mlp_hidden, cfg.init_std
    p = {
        "encoder.cls_token": truncated_normal(rng, (d,), std),
        "encoder.mask_token": np.zeros(d, np.float32),
    }
    for layer in range(cfg.depth):
        pre = f"encoder.layers.{layer}"
        p[f"{pre}.norm1.weight"] = np.ones(d, np.float32)
        p[f"{pre}.norm1.bias"] = np.zeros(d, np.float32)
        for proj in ("q", "k", "v"):
            p[f"{pre}.attn.{proj}.weight"] = fan_in_uniform(rng, (d, inner))
            p[f"{pre}.attn.{proj}.bias"] = np.zeros(inner, np.float32)
        p[f"{pre}.attn.out.weight"] = fan_in_uniform(rng, (inner, d))
        p[f"{pre}.attn.out.bias"] = np.zeros(d, np.float32)
        p[f"{pre}.norm2.weight"] = np.ones(d, np.float32)
        p[f"{pre}.norm2.bias"] = np.zeros(d, np.float32)
        p[f"{pre}.mlp.fc1.weight"] = fan_in_uniform(rng, (d, hidden))
        p[f"{pre}.mlp.fc1.bias"] = np.zeros(hidden, np.float32)
        p[f"{pre}.mlp.fc2.weight"] = fan_in_uniform(rng, (hidden, d))
        p[f"{pre}.mlp.fc2.bias"] = np.zeros(d, np.float32)
    p["encoder.norm.weight"] = np.ones(d, np.float32)
    p["encoder.norm.bias"] = np.zeros(d, np.float32)
    return {name: Tensor(v, requires_grad=True) for name, v in p.items()}


def _attention(h, params, pre, cfg, training, rng, trace):
    B, N, _ = h.shape
    H, dh = cfg.n_heads, cfg.head_dim

    def heads(name):
        t = h @ params[f"{pre}.attn.{name}.weight"] + params[f"{pre}.attn.{name}.bias"]
        return t.reshape(B, N, H, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    attn = ag.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    if trace is not None:
        trace.setdefault("attention", []).append(attn.data)
    attn = ag.dropout(attn, cfg.dropout, training, rng)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, N, H * dh)
    return out @ params[f"{pre}.attn.out.weight"] + params[f"{pre}.attn.out.bias"]


def _mlp(h, params, pre, cfg, training, rng):
    h = ag.gelu(h @ params[f"{pre}.mlp.fc1.weight"] + params[f"{pre}.mlp.fc1.bias"])
    h = h @ params[f"{pre}.mlp.fc2.weight"] + params[f"{pre}.mlp.fc2.bias"]
    return ag.dropout(h, cfg.dropout, training, rng)


def encode(tokens, params, cfg, mask=None, training=False, rng=None, use_positions=True, trace=None):
    """Run the encoder; returns ``(cls [B, d], patches [B, P, d])``.

    ``mask`` is a boolean [B, P] array; masked tokens are replaced by the
    MASK vector before positions are added. ``trace``, if a dict, collects the
    masked input and per-layer attention maps.
    """
    B, P, d = tokens.shape
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (B, P):
            raise ValueError(f"mask shape {mask.shape} does not match tokens {(B, P)}")
        tokens = ag.where(mask[:, :, None], params["encoder.mask_token"], tokens)
    if trace is not None:
        trace["masked_input"] = tokens.data.copy()

    cls = params["encoder.cls_token"].reshape(1, 1, d) * Tensor(np.ones((B, 1, 1), tokens.dtype))
    h = ag.concat([cls, tokens], axis=1)
    if use_positions:
        h = h + Tensor(sinusoidal_pe(P + 1, d).astype(tokens.dtype))

    for layer in range(cfg.depth):
        pre = f"encoder.layers.{layer}"
        a = ag.layer_norm(h, params[f"{pre}.norm1.weight"], params[f"{pre}.norm1.bias"], cfg.ln_eps)
        h = h + _attention(a, params, pre, cfg, training, rng, trace)
        m = ag.layer_norm(h, params[f"{pre}.norm2.weight"], params[f"{pre}.norm2.bias"], cfg.ln_eps)
        h = h + _mlp(m, params, pre, cfg, training, rng)

    h = ag.layer_norm(h, params["encoder.norm.weight"], params["encoder.norm.bias"], cfg.ln_eps)
    return h[:, 0], h[:, 1:]
