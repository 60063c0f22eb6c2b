"""Student-teacher pretraining: schedules, AdamW, EMA teacher, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .augment import make_views
from .config import ConfigError, RunConfig
from .heads import is_prototype_param
from .losses import total_loss
from .model import clone_params, init_params
from .rng import stream

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "wd", "ema_m", "tau_t", "dino", "ibot", "koleo", "total", "target_entropy")


class TrainingDiverged(RuntimeError):
    pass


# -- schedules -------------------------------------------------------------------

def _cosine(start, end, progress):
    progress = min(max(progress, 0.0), 1.0)
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * progress))


def epochs_to_steps(epochs, steps_per_epoch):
    return int(round(epochs * steps_per_epoch))


@dataclass
class Schedules:
    total_steps: int
    steps_per_epoch: int
    base_lr: float = 1e-3
    min_lr: float = 1e-7
    warmup_epochs: float = 0.7
    wd_start: float = 0.04
    wd_end: float = 0.4
    ema_start: float = 0.992
    ema_end: float = 1.0
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_epochs: float = 2.5
    freeze_last_layer_epochs: float = 0.07

    @classmethod
    def from_config(cls, cfg: RunConfig, steps_per_epoch, total_steps=None):
        o, lo = cfg.optim, cfg.loss
        return cls(
            total_steps=cfg.train.total_steps if total_steps is None else total_steps,
            steps_per_epoch=steps_per_epoch,
            base_lr=o.base_lr, min_lr=o.min_lr, warmup_epochs=o.warmup_epochs,
            wd_start=o.wd_start, wd_end=o.wd_end, ema_start=o.ema_start, ema_end=o.ema_end,
            teacher_temp_start=lo.teacher_temp_start, teacher_temp_end=lo.teacher_temp_end,
            teacher_temp_warmup_epochs=lo.teacher_temp_warmup_epochs,
            freeze_last_layer_epochs=o.freeze_last_layer_epochs,
        )

    @property
    def warmup_steps(self):
        return min(epochs_to_steps(self.warmup_epochs, self.steps_per_epoch), self.total_steps)

    @property
    def freeze_steps(self):
        return epochs_to_steps(self.freeze_last_layer_epochs, self.steps_per_epoch)

    @property
    def teacher_temp_warmup_steps(self):
        return epochs_to_steps(self.teacher_temp_warmup_epochs, self.steps_per_epoch)

    def lr(self, step):
        w = self.warmup_steps
        if step < w:
            return self.base_lr * step / w
        span = self.total_steps - w
        return _cosine(self.base_lr, self.min_lr, (step - w) / span if span > 0 else 1.0)

    def prototype_lr(self, step):
        return 0.0 if step < self.freeze_steps else self.lr(step)

    def weight_decay(self, step):
        return _cosine(self.wd_start, self.wd_end, step / self.total_steps)

    def ema_momentum(self, step):
        return _cosine(self.ema_start, self.ema_end, step / self.total_steps)

    def teacher_temp(self, step):
        w = self.teacher_temp_warmup_steps
        if step >= w:
            return self.teacher_temp_end
        return self.teacher_temp_start + (self.teacher_temp_end - self.teacher_temp_start) * step / w

    def values(self, step):
        return {"lr": self.lr(step), "prototype_lr": self.prototype_lr(step), "wd": self.weight_decay(step),
                "ema_m": self.ema_momentum(step), "tau_t": self.teacher_temp(step)}


# -- parameter groups and optimiser ----------------------------------------------------

@dataclass
class ParamGroup:
    layer: int
    lr_mult: float
    weight_decay: bool
    prototype: bool


_LAYER_RE = re.compile(r"^encoder\.layers\.(\d+)\.")


def _no_weight_decay(name):
    return name.endswith(".bias") or "norm" in name or "gamma" in name or name.endswith(".weight_g")


def build_param_groups(names, depth, layer_decay=0.9, patch_embed_lr_mult=0.2):
    """Per-parameter lr multiplier, weight-decay flag and prototype flag.

    Encoder layer ``l`` (1-based) gets ``decay**(depth+1-l)``. The token
    generator, CLS and MASK tokens sit at layer 0 (``decay**(depth+1)``) and
    the token generator additionally gets ``patch_embed_lr_mult``. The final
    norm and the heads use multiplier 1.
    """
    groups = {}
    for name in names:
        if name.startswith("tokenizer."):
            layer, mult = 0, layer_decay ** (depth + 1) * patch_embed_lr_mult
        elif name in ("encoder.cls_token", "encoder.mask_token"):
            layer, mult = 0, layer_decay ** (depth + 1)
        elif m := _LAYER_RE.match(name):
            layer = int(m.group(1)) + 1
            if layer > depth:
                raise ConfigError(f"{name}: layer index beyond encoder depth {depth}")
            mult = layer_decay ** (depth + 1 - layer)
        elif name.startswith("encoder.norm."):
            layer, mult = depth + 1, 1.0
        elif name.startswith(("dino_head.", "ibot_head.", "classifier.")):
            layer, mult = depth + 1, 1.0
        else:
            raise ConfigError(f"cannot assign parameter {name!r} to an optimiser group")
        groups[name] = ParamGroup(layer, mult, not _no_weight_decay(name), is_prototype_param(name))
    return groups


@dataclass
class OptimizerState:
    groups: dict
    m: dict
    v: dict
    t: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_grad: float | None = 3.0
    frozen_prototypes: bool = False
    skipped: int = 0

    @classmethod
    def create(cls, params, groups, betas=(0.9, 0.999), eps=1e-8, clip_grad=3.0):
        m = {n: np.zeros_like(p.data) for n, p in params.items()}
        v = {n: np.zeros_like(p.data) for n, p in params.items()}
        return cls(groups, m, v, 0, tuple(betas), eps, clip_grad)


def freeze_prototypes(state, frozen):
    """Force the prototype layers' learning rate to zero regardless of schedule."""
    state.frozen_prototypes = bool(frozen)


def global_grad_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads, max_norm):
    total = global_grad_norm(grads)
    if max_norm is None or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {n: (g * scale).astype(g.dtype) for n, g in grads.items()}, total


def optimizer_step(params, grads, state, lr, wd, prototype_lr=None):
    """One AdamW update in place. Returns False when the step was skipped."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at optimiser step %d; update skipped", state.t)
        return False
    grads, _ = clip_gradients(grads, state.clip_grad)
    prototype_lr = lr if prototype_lr is None else prototype_lr
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        group = state.groups[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        base = prototype_lr if group.prototype else lr
        if group.prototype and state.frozen_prototypes:
            base = 0.0
        step_lr = base * group.lr_mult
        if step_lr == 0.0:
            continue
        decay = wd if group.weight_decay else 0.0
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data * (1.0 - step_lr * decay) - step_lr * update).astype(p.data.dtype)
    return True


def ema_update(teacher, student, momentum):
    if teacher.keys() != student.keys():
        missing = sorted(set(teacher) ^ set(student))
        raise RuntimeError(f"teacher/student parameter trees differ: {missing[:5]}")
    m = np.float32(momentum)
    for name, t in teacher.items():
        s = student[name].data
        if t.shape != s.shape:
            raise RuntimeError(f"{name}: teacher shape {t.shape} != student shape {s.shape}")
        t.data = (m * t.data + (np.float32(1.0) - m) * s).astype(t.data.dtype)


# -- checkpoints -----------------------------------------------------------------------

CKPT_MAGIC = b"UTCK"
CKPT_VERSION = 1


def write_checkpoint(path, metadata, tensors):
    """Write ``tensors`` (name -> float array) with a JSON metadata block."""
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(key)))
        chunks.append(key)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a UTCK checkpoint")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    metadata = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + klen].decode("utf-8")
        off += klen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return metadata, tensors


@dataclass
class TrainState:
    config: RunConfig
    student: dict
    teacher: dict
    opt: OptimizerState
    step: int = 0
    nan_streak: int = 0
    metrics: list = field(default_factory=list)


def save_state(path, state, schedules=None):
    meta = {
        "step": state.step,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "optimizer": {"t": state.opt.t, "skipped": state.opt.skipped,
                      "frozen_prototypes": state.opt.frozen_prototypes},
        "nan_streak": state.nan_streak,
        # every stochastic draw is a named Philox stream of (seed, purpose, step)
        "rng": {"generator": "philox-seedsequence", "seed": state.config.train.seed, "next_step": state.step},
    }
    if schedules is not None:
        meta["schedules"] = schedules.values(state.step)
    tensors = {}
    for prefix, tree in (("student", state.student), ("teacher", state.teacher)):
        for name, t in tree.items():
            tensors[f"{prefix}/{name}"] = t.data
    for name in state.student:
        tensors[f"opt.m/{name}"] = state.opt.m[name]
        tensors[f"opt.v/{name}"] = state.opt.v[name]
    write_checkpoint(path, meta, tensors)


def _tree(tensors, prefix, requires_grad):
    from .autograd import Tensor

    cut = len(prefix) + 1
    return {n[cut:]: Tensor(a, requires_grad=requires_grad) for n, a in tensors.items() if n.startswith(prefix + "/")}


def load_state(path):
    meta, tensors = read_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    student = _tree(tensors, "student", True)
    teacher = _tree(tensors, "teacher", False)
    groups = build_param_groups(student, cfg.model.depth, cfg.optim.layer_decay, cfg.optim.patch_embed_lr_mult)
    o = meta["optimizer"]
    opt = OptimizerState(groups, {n: tensors[f"opt.m/{n}"].copy() for n in student},
                         {n: tensors[f"opt.v/{n}"].copy() for n in student}, o["t"],
                         tuple(cfg.optim.betas), cfg.optim.eps, cfg.optim.clip_grad, o["frozen_prototypes"], o["skipped"])
    return TrainState(cfg, student, teacher, opt, meta["step"], meta.get("nan_streak", 0))


def load_teacher(path):
    """Final model export: (config, teacher parameter tree)."""
    meta, tensors = read_checkpoint(path)
    return RunConfig.from_dict(meta["config"]), _tree(tensors, "teacher", False)


# -- training loop ---------------------------------------------------------------------

def init_state(cfg: RunConfig):
    student = init_params(cfg.model, cfg.train.seed)
    teacher = clone_params(student, requires_grad=False)
    groups = build_param_groups(student, cfg.model.depth, cfg.optim.layer_decay, cfg.optim.patch_embed_lr_mult)
    opt = OptimizerState.create(student, groups, cfg.optim.betas, cfg.optim.eps, cfg.optim.clip_grad)
    return TrainState(cfg, student, teacher, opt)


def steps_per_epoch(n_samples, batch_size):
    return max(1, math.ceil(n_samples / batch_size))


def batch_indices(seed, step, n_samples, batch_size):
    spe = steps_per_epoch(n_samples, batch_size)
    epoch, j = divmod(step, spe)
    perm = stream(seed, "perm", epoch).permutation(n_samples)
    return perm[j * batch_size:(j + 1) * batch_size]


def train_step(state, corpus_data, schedules):
    """Run one optimisation step; returns the metrics row."""
    cfg = state.config
    step, seed = state.step, cfg.train.seed
    sv = schedules.values(step)
    idx = batch_indices(seed, step, len(corpus_data), cfg.train.batch_size)
    views = make_views(corpus_data[idx], stream(seed, "views", step), cfg.augment, cfg.model.n_patches)
    report, grads = total_loss(views, state.student, state.teacher, cfg, sv["tau_t"], rng=stream(seed, "dropout", step))
    ok = math.isfinite(report.total)
    if ok:
        ok = optimizer_step(state.student, grads, state.opt, sv["lr"], sv["wd"], sv["prototype_lr"])
    else:
        state.opt.skipped += 1
        log.warning("non-finite loss at step %d; update skipped", step)
    if ok:
        ema_update(state.teacher, state.student, sv["ema_m"])
        state.nan_streak = 0
    else:
        state.nan_streak += 1
    state.step += 1
    row = {"step": step, "lr": sv["lr"], "wd": sv["wd"], "ema_m": sv["ema_m"], "tau_t": sv["tau_t"],
           "dino": report.dino_total, "ibot": report.ibot, "koleo": report.koleo, "total": report.total,
           "target_entropy": report.target_entropy}
    return row, report


def pretrain(cfg: RunConfig, corpus_data, out_dir=None, resume_from=None, stop_at=None, callback=None):
    """Pretrain on ``corpus_data`` ([n, T] array) and return the final ``TrainState``.

    Checkpoints go to ``out_dir/checkpoint_<step>.utck`` every
    ``train.checkpoint_every`` steps and at the end, along with
    ``metrics.csv``. ``stop_at`` ends the run early (for resume tests).
    """
    corpus_data = np.asarray(corpus_data, dtype=np.float32)
    state = load_state(resume_from) if resume_from else init_state(cfg)
    if resume_from and state.config.hash() != cfg.hash():
        raise ConfigError("checkpoint was written with a different configuration")
    schedules = Schedules.from_config(cfg, steps_per_epoch(len(corpus_data), cfg.train.batch_size))
    end = cfg.train.total_steps if stop_at is None else min(stop_at, cfg.train.total_steps)
    writer = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        fresh = not (resume_from and os.path.exists(metrics_path))
        fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if fresh:
            writer.writeheader()
    try:
        while state.step < end:
            row, report = train_step(state, corpus_data, schedules)
            state.metrics.append(row)
            if writer and row["step"] % cfg.train.log_every == 0:
                writer.writerow(row)
            if callback:
                callback(state, row, report)
            if state.nan_streak >= cfg.train.max_nan_steps:
                if out_dir:
                    with open(os.path.join(out_dir, "divergence_dump.json"), "w") as dump:
                        json.dump({"step": row["step"], "recent": state.metrics[-cfg.train.max_nan_steps:]}, dump, indent=2)
                raise TrainingDiverged(f"loss non-finite for {state.nan_streak} consecutive steps (step {row['step']})")
            if out_dir and (state.step % cfg.train.checkpoint_every == 0 or state.step == end):
                save_state(os.path.join(out_dir, f"checkpoint_{state.step:07d}.utck"), state, schedules)
            if row["step"] % 50 == 0:
                log.info("step %d total %.4f dino %.4f ibot %.4f koleo %.4f H(t) %.3f",
                         row["step"], row["total"], row["dino"], row["ibot"], row["koleo"], row["target_entropy"])
    finally:
        if writer:
            fh.close()
    return state
