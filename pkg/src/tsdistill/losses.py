"""Self-distillation objectives: DINO (CLS), iBOT (masked patches) and KoLeo.

Teacher targets come from Sinkhorn-Knopp balancing of the teacher logits and
are plain numpy arrays, so no gradient can reach the teacher.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .heads import project
from .model import forward_backbone

# exp() arguments below this are clipped so that no prototype row underflows to 0
_MIN_SHIFTED_LOGIT = -700.0


def _identity(a):
    return a


def sinkhorn_knopp(logits, tau, n_iter=3, reduce=None, world_size=1):
    """Balanced soft assignments [N, K] from teacher logits [N, K].

    ``reduce`` sums a partial array across workers (identity in a single
    process) and ``world_size`` scales the effective batch accordingly.
    """
    if isinstance(logits, Tensor):
        logits = logits.data
    dtype = logits.dtype if np.issubdtype(logits.dtype, np.floating) else np.float32
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"expected [N, K] logits with N >= 1, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("sinkhorn_knopp received non-finite logits")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    reduce = reduce or _identity
    z = z / tau
    z = np.maximum(z - z.max(), _MIN_SHIFTED_LOGIT)
    Q = np.exp(z).T  # [K, N]
    K, n_eff = Q.shape[0], Q.shape[1] * world_size
    Q /= reduce(Q.sum())
    for _ in range(n_iter):
        Q /= reduce(Q.sum(axis=1, keepdims=True))
        Q /= K
        Q /= Q.sum(axis=0, keepdims=True)
        Q /= n_eff
    Q *= n_eff
    return Q.T.astype(dtype)


def entropy(probs):
    p = np.asarray(probs, dtype=np.float64)
    return -(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=-1)


def dino_weights(n_student_global, n_student_local, n_teacher):
    """Pair counts (n_g, n_l) and mixing weights (alpha_g, alpha_l)."""
    n_g = n_student_global * n_teacher - min(n_student_global, n_teacher)
    n_l = n_student_local * n_teacher
    total = n_g + n_l
    return n_g, n_l, n_g / total, n_l / total


def dino_loss(student_global, student_local, teacher_probs, student_temp=0.1):
    """Cross-view CLS cross-entropy.

    ``student_global``/``student_local``: lists of [B, K] logit tensors, one per
    crop; ``teacher_probs``: array [T_g, B, K]. Global student crop ``s`` is not
    compared with teacher crop ``s``. Returns ``(global, local, total)``.
    """
    teacher_probs = np.asarray(teacher_probs)
    T_g, B, K = teacher_probs.shape
    for z in [*student_global, *student_local]:
        if z.shape != (B, K):
            raise ValueError(f"student logits {z.shape} do not match teacher targets {(B, K)}")
    n_g, n_l, alpha_g, alpha_l = dino_weights(len(student_global), len(student_local), T_g)
    dtype = teacher_probs.dtype
    all_t = teacher_probs.sum(axis=0)

    def cross(z, targets):
        return -(Tensor(targets, dtype=z.dtype) * ag.log_softmax(z, student_temp)).sum()

    zero = Tensor(np.zeros((), dtype))
    glob = zero
    for s, z in enumerate(student_global):
        targets = all_t - teacher_probs[s] if s < T_g else all_t
        glob = glob + cross(z, targets)
    loc = zero
    for z in student_local:
        loc = loc + cross(z, all_t)
    glob = glob * (1.0 / (B * n_g)) if n_g else zero
    loc = loc * (1.0 / (B * n_l)) if n_l else zero
    return glob, loc, glob * alpha_g + loc * alpha_l


def ibot_loss(student_logits, teacher_probs, sample_index, mask_counts, n_samples, student_temp=0.1, sign=1.0):
    """Masked-patch cross-entropy, each patch weighted by 1/(masked patches in its sample).

    ``sample_index[m]`` is the sample that masked patch ``m`` belongs to and
    ``mask_counts[i]`` the number of masked patches of sample ``i``.
    """
    sample_index = np.asarray(sample_index, dtype=np.int64)
    counts = np.asarray(mask_counts, dtype=np.int64)
    M = len(sample_index)
    if counts.sum() != M or np.any(np.bincount(sample_index, minlength=len(counts))[:len(counts)] != counts):
        raise RuntimeError(f"mask bookkeeping mismatch: counts sum to {counts.sum()}, {M} patches given")
    if M == 0:
        return Tensor(np.zeros((), np.float32))
    weights = 1.0 / np.maximum(counts[sample_index], 1)
    targets = Tensor(np.asarray(teacher_probs), dtype=student_logits.dtype)
    per_patch = -(targets * ag.log_softmax(student_logits, student_temp)).sum(axis=-1)
    return (per_patch * Tensor(weights, dtype=student_logits.dtype)).sum() * (sign / n_samples)


def koleo_loss(z, eps=1e-8):
    """Negative mean log nearest-neighbour distance of L2-normalised rows."""
    n = z.shape[0]
    if n < 2:
        raise ValueError("KoLeo needs at least two vectors")
    zn = z / (ag.norm(z, axis=-1, keepdims=True) + 1e-12)
    with np.errstate(invalid="ignore"):
        x = zn.data.astype(np.float64)
        d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn = np.argmin(d2, axis=1)
    dist = ag.norm(zn - zn[nn], axis=-1)
    return -ag.log(dist + eps).mean()


@dataclass
class LossReport:
    dino_global: float
    dino_local: float
    dino_total: float
    ibot: float
    koleo: float
    total: float
    alpha_g: float
    alpha_l: float
    target_entropy: float
    n_masked: int
    teacher_temp: float

    def as_dict(self):
        return asdict(self)


def _views_flat(views, n_views):
    """[B, V, T] -> [V*B, T], view-major so rows ``v*B:(v+1)*B`` are one crop."""
    B = views.shape[0]
    return np.ascontiguousarray(views.transpose(1, 0, 2)).reshape(n_views * B, -1)


def compute_losses(views, student, teacher, cfg, teacher_temp, rng=None, training=True, reduce=None):
    """Forward both networks on a ``ViewSet`` and assemble the weighted objective.

    Returns ``(report, loss)``; ``loss`` is the graph output to differentiate.
    """
    mcfg, lcfg = cfg.model, cfg.loss
    B = views.batch_size
    G = views.global_views.shape[1]
    L = views.local_views.shape[1]
    gflat = _views_flat(views.global_views, G)
    masks = np.ascontiguousarray(views.masks.transpose(1, 0, 2)).reshape(G * B, -1)
    rows, cols = np.nonzero(masks)
    counts = masks.sum(axis=1)

    with ag.no_grad():
        t_cls, t_patch = forward_backbone(gflat, teacher, mcfg, training=False)
        t_logits = project(t_cls, teacher, "dino_head", mcfg)
        dino_targets = sinkhorn_knopp(t_logits, teacher_temp, lcfg.sinkhorn_iters, reduce).reshape(G, B, -1)
        ibot_targets = None
        if len(rows):
            t_masked = project(t_patch[rows, cols], teacher, "ibot_head", mcfg)
            ibot_targets = sinkhorn_knopp(t_masked, teacher_temp, lcfg.sinkhorn_iters, reduce)

    s_cls_g, s_patch_g = forward_backbone(gflat, student, mcfg, mask=masks, training=training, rng=rng)
    cls_all = s_cls_g
    if L:
        s_cls_l, _ = forward_backbone(_views_flat(views.local_views, L), student, mcfg, training=training, rng=rng)
        cls_all = ag.concat([s_cls_g, s_cls_l], axis=0)
    s_logits = project(cls_all, student, "dino_head", mcfg)
    s_global = [s_logits[v * B:(v + 1) * B] for v in range(G)]
    s_local = [s_logits[(G + v) * B:(G + v + 1) * B] for v in range(L)]
    d_glob, d_loc, d_total = dino_loss(s_global, s_local, dino_targets, lcfg.student_temp)

    if len(rows):
        s_masked = project(s_patch_g[rows, cols], student, "ibot_head", mcfg)
        ibot = ibot_loss(s_masked, ibot_targets, rows, counts, G * B, lcfg.student_temp, lcfg.ibot_sign)
    else:
        ibot = Tensor(np.zeros((), np.float32))
    koleo = koleo_loss(s_cls_g, lcfg.koleo_eps)

    loss = None
    for lam, term in ((lcfg.lambda_dino, d_total), (lcfg.lambda_ibot, ibot), (lcfg.lambda_koleo, koleo)):
        if lam:
            loss = term * lam if loss is None else loss + term * lam
    if loss is None:
        loss = Tensor(np.zeros((), np.float32))

    _, _, alpha_g, alpha_l = dino_weights(G, L, G)
    values = dict(dino_global=d_glob.item(), dino_local=d_loc.item(), dino_total=d_total.item(),
                  ibot=ibot.item(), koleo=koleo.item())
    total = (lcfg.lambda_dino * values["dino_total"] + lcfg.lambda_ibot * values["ibot"]
             + lcfg.lambda_koleo * values["koleo"])
    report = LossReport(**values, total=total, alpha_g=alpha_g, alpha_l=alpha_l,
                        target_entropy=float(entropy(dino_targets.reshape(G * B, -1)).mean()),
                        n_masked=int(len(rows)), teacher_temp=float(teacher_temp))
    return report, loss


def total_loss(views, student, teacher, cfg, teacher_temp, rng=None, reduce=None):
    """Loss report plus student gradients (name -> array). Teacher grads stay untouched."""
    for t in student.values():
        t.grad = None
    report, loss = compute_losses(views, student, teacher, cfg, teacher_temp, rng=rng, reduce=reduce)
    if loss.requires_grad:
        loss.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in student.items()}
    return report, grads
