"""Run configuration.

All architecture, augmentation, loss and optimisation constants live here with
their published defaults. ``RunConfig.from_dict`` is strict: unknown keys and
wrongly typed values raise ``ConfigError`` naming the offending field path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_patches: int = 32
    d_model: int = 256
    d_scalar: int = 32
    scalar_scales: tuple = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4)
    scale_tolerance: float = 1.1
    conv_kernel: int = 3
    depth: int = 6
    n_heads: int = 8
    head_dim: int = 128
    mlp_hidden: int = 512
    dropout: float = 0.1
    ln_eps: float = 1e-5
    head_hidden: int = 2048
    head_bottleneck: int = 256
    head_layers: int = 3
    n_prototypes: int = 65536
    init_std: float = 0.02


@dataclass
class AugmentConfig:
    n_global: int = 2
    n_local: int = 8
    global_len: int = 512
    local_len: int = 256
    global_scale: tuple = (0.4, 1.0)
    local_scale: tuple = (0.1, 0.4)
    jitter_ratio: float = 0.2
    jitter_global: bool = True
    local_jitter_prob: float = 0.5
    mask_prob: float = 0.5
    mask_ratio: tuple = (0.1, 0.7)
    # "linspace": uniform over a 32-point grid of ratios; "uniform": continuous U(lo, hi)
    mask_ratio_mode: str = "linspace"


@dataclass
class LossConfig:
    lambda_dino: float = 1.0
    lambda_ibot: float = 1.0
    lambda_koleo: float = 0.1
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_epochs: float = 2.5
    sinkhorn_iters: int = 3
    koleo_eps: float = 1e-8
    # +1 trains the positive weighted cross-entropy; -1 reproduces the literal leading minus
    ibot_sign: float = 1.0


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    min_lr: float = 1e-7
    warmup_epochs: float = 0.7
    wd_start: float = 0.04
    wd_end: float = 0.4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_grad: float = 3.0
    layer_decay: float = 0.9
    patch_embed_lr_mult: float = 0.2
    freeze_last_layer_epochs: float = 0.07
    ema_start: float = 0.992
    ema_end: float = 1.0


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 256
    total_steps: int = 10000
    checkpoint_every: int = 500
    log_every: int = 1
    max_nan_steps: int = 10


@dataclass
class SynthConfig:
    n_samples: int = 100_000
    length: int = 512
    max_nodes: int = 12


@dataclass
class EvalConfig:
    series_len: int = 512
    probe_epochs: int = 100
    probe_lr: float = 1e-3
    probe_batch_size: int = 64
    probe_weight_decay: float = 0.01
    finetune_epochs: int = 100
    finetune_lrs: tuple = (1e-4, 2e-4, 1e-3)
    finetune_weight_decay: float = 0.05
    finetune_batch_size: int = 32
    val_fraction: float = 0.2
    # "test": best test-epoch accuracy as in the published tables; "val": pick the epoch on a held-out split
    epoch_selection: str = "test"
    seeds: tuple = (0, 1, 2)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return _to_plain(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "")

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def replace(self, **sections):
        """Copy with per-section overrides, e.g. ``cfg.replace(model={"depth": 2})``."""
        data = self.to_dict()
        for name, values in sections.items():
            if name not in data:
                raise ConfigError(f"unknown section {name!r}")
            data[name].update(values)
        return RunConfig.from_dict(data)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{_join(path, unknown[0])}: unknown key")
    kwargs = {}
    for name, value in data.items():
        where = _join(path, name)
        typ = hints[name]
        if dataclasses.is_dataclass(typ):
            kwargs[name] = _from_dict(typ, value, where)
        else:
            kwargs[name] = _coerce(typ, value, where)
    return cls(**kwargs)


def _coerce(typ, value, where):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if typ is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}[{i}]: expected a number")
        return tuple(value)
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _join(path, name):
    return f"{path}.{name}" if path else name


def tiny_config(**sections):
    """Desk-scale configuration used by the tests and demos."""
    cfg = RunConfig().replace(
        model={"d_model": 32, "d_scalar": 8, "depth": 2, "n_heads": 4, "head_dim": 8,
               "mlp_hidden": 64, "head_hidden": 64, "head_bottleneck": 32, "n_prototypes": 128},
        train={"batch_size": 16, "total_steps": 500, "checkpoint_every": 100},
        synth={"n_samples": 2000, "max_nodes": 8},
    )
    return cfg.replace(**sections) if sections else cfg
