"""Parameter trees and the backbone forward pass shared by student and teacher."""

from .autograd import Tensor
from .encoder import encode, init_encoder
from .heads import HEAD_NAMES, init_head
from .rng import stream
from .tokenizer import init_tokenizer, tokenize


def init_params(cfg, seed, with_heads=True):
    """Fresh parameter tree (name -> Tensor) for ``cfg`` (a ``ModelConfig``)."""
    params = {}
    params.update(init_tokenizer(cfg, stream(seed, "init", "tokenizer")))
    params.update(init_encoder(cfg, stream(seed, "init", "encoder")))
    if with_heads:
        for name in HEAD_NAMES:
            params.update(init_head(name, cfg, stream(seed, "init", name)))
    return params


def clone_params(params, requires_grad=None):
    return {
        name: Tensor(t.data.copy(), requires_grad=t.requires_grad if requires_grad is None else requires_grad)
        for name, t in params.items()
    }


def cast_params(params, dtype):
    return {name: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype) for name, t in params.items()}


def backbone_params(params):
    return {n: t for n, t in params.items() if n.startswith(("tokenizer.", "encoder."))}


def forward_backbone(x, params, cfg, mask=None, training=False, rng=None, trace=None):
    """[B, T] series -> ``(cls [B, d], patches [B, P, d])``."""
    tokens = tokenize(x, params, cfg)
    return encode(tokens, params, cfg, mask=mask, training=training, rng=rng, trace=trace)


def count_parameters(params):
    return sum(t.size for t in params.values())


def zero_grads(params):
    for t in params.values():
        t.grad = None

