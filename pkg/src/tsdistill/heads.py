"""Projection heads: MLP -> bottleneck -> L2 normalise -> weight-normalised prototypes."""

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import truncated_normal

HEAD_NAMES = ("dino_head", "ibot_head")
NORMALIZE_EPS = 1e-8


def init_head(prefix, cfg, rng):
    dims = [cfg.d_model] + [cfg.head_hidden] * (cfg.head_layers - 1) + [cfg.head_bottleneck]
    p = {}
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        p[f"{prefix}.mlp.{i}.weight"] = truncated_normal(rng, (d_in, d_out), cfg.init_std)
        p[f"{prefix}.mlp.{i}.bias"] = np.zeros(d_out, np.float32)
    p[f"{prefix}.proto.weight_v"] = truncated_normal(rng, (cfg.n_prototypes, cfg.head_bottleneck), cfg.init_std)
    p[f"{prefix}.proto.weight_g"] = np.ones(cfg.n_prototypes, np.float32)
    return {name: Tensor(v, requires_grad=True) for name, v in p.items()}


def is_prototype_param(name):
    return ".proto." in name


def bottleneck(features, params, prefix, cfg):
    """MLP part of the head followed by L2 normalisation."""
    h = features
    for i in range(cfg.head_layers):
        h = h @ params[f"{prefix}.mlp.{i}.weight"] + params[f"{prefix}.mlp.{i}.bias"]
        if i < cfg.head_layers - 1:
            h = ag.gelu(h)
    return h / (ag.norm(h, axis=-1, keepdims=True) + NORMALIZE_EPS)


def prototype_logits(h_normalized, params, prefix):
    v = params[f"{prefix}.proto.weight_v"]
    g = params[f"{prefix}.proto.weight_g"]
    w = v / ag.norm(v, axis=1, keepdims=True) * g.reshape(-1, 1)
    return h_normalized @ w.T


def project(features, params, prefix, cfg):
    """[N, d_model] features -> [N, n_prototypes] logits."""
    return prototype_logits(bottleneck(features, params, prefix, cfg), params, prefix)
