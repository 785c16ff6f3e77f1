"""Self-distillation post-pretraining (image-level DINO objective).

A student encoder + projection head is trained to match the centred,
sharpened output of an EMA teacher across multi-crop views. Images are
first split into a ``g x g`` grid of tiles, each treated as an image.
There is no KoLeo term and no masked-token objective.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .blockexp import FreezePolicy, apply_freeze_policy
from .errors import ConfigError, DataError, DivergenceError, ModelError, PairingError
from .imageops import adjust_sharpness, color_jitter, hflip, random_resized_crop, resize_bilinear, vflip
from .numerics import Tensor
from .optim import AdamW, cosine_momentum, lr_at_step
from .vit import ViTModel, _trunc_normal, forward

LOG_COLUMNS = ("step", "loss", "teacher_entropy", "lr", "ema_momentum")


@dataclass
class SSLConfig:
    prototypes: int = 256
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    ema_momentum: float = 0.996
    ema_final: float = 1.0
    global_crops: int = 2
    local_crops: int = 2
    global_scale: tuple = (0.4, 1.0)
    local_scale: tuple = (0.1, 0.4)
    grid_split: int = 1
    epochs: int = 1
    batch_size: int = 16
    lr: float = 5e-4
    min_lr: float | None = None
    warmup_steps: int = 0
    weight_decay: float = 0.04
    head_hidden: int = 128
    head_bottleneck: int = 64
    head_batchnorm: bool = False
    flips: bool = True
    color_jitter: float = 0.2
    sharpness: bool = False
    return_teacher: bool = True
    seed: int = 0

    def validate(self) -> "SSLConfig":
        if not self.student_temp > self.teacher_temp > 0:
            raise ConfigError("temperatures must satisfy student_temp > teacher_temp > 0")
        if not 0 <= self.center_momentum < 1:
            raise ConfigError("center_momentum must lie in [0, 1)")
        if not 0 <= self.ema_momentum <= 1:
            raise ConfigError("ema_momentum must lie in [0, 1]")
        if not 1 <= self.grid_split <= 5:
            raise ConfigError(f"grid_split must lie in 1..5, got {self.grid_split}")
        if self.global_crops < 1 or self.local_crops < 0 or self.global_crops + self.local_crops < 2:
            raise ConfigError("need >= 1 global crop and >= 2 views in total")
        if self.prototypes < 2 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("prototypes >= 2, batch_size >= 1, epochs >= 0 required")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class SSLHead:
    """3-layer MLP -> L2-normalized bottleneck -> weight-normalized prototypes."""

    NAMES = ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias", "prototypes")

    def __init__(self, params: dict, batchnorm: bool = False):
        self.params = params
        self.batchnorm = batchnorm

    @classmethod
    def init(cls, in_dim: int, cfg: SSLConfig, seed: int, dtype) -> "SSLHead":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x55]))
        h, b = cfg.head_hidden, cfg.head_bottleneck
        p = {
            "fc1.weight": _trunc_normal(rng, (in_dim, h), dtype=dtype), "fc1.bias": np.zeros(h, dtype),
            "fc2.weight": _trunc_normal(rng, (h, h), dtype=dtype), "fc2.bias": np.zeros(h, dtype),
            "fc3.weight": _trunc_normal(rng, (h, b), dtype=dtype), "fc3.bias": np.zeros(b, dtype),
            "prototypes": _trunc_normal(rng, (cfg.prototypes, b), std=1.0, dtype=dtype),
        }
        head = cls({k: Tensor(v, requires_grad=True) for k, v in p.items()}, cfg.head_batchnorm)
        head.normalize_prototypes()
        return head

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        h = nx.gelu(self._norm(nx.linear(x, p["fc1.weight"], p["fc1.bias"])))
        h = nx.gelu(self._norm(nx.linear(h, p["fc2.weight"], p["fc2.bias"])))
        z = nx.l2_normalize(nx.linear(h, p["fc3.weight"], p["fc3.bias"]), axis=-1)
        protos = nx.l2_normalize(p["prototypes"], axis=1)
        return nx.matmul(z, protos.T)

    def _norm(self, h: Tensor) -> Tensor:
        # parameter-free batch standardization over the rows of h
        if not self.batchnorm or h.shape[0] < 2:
            return h
        c = h - h.mean(axis=0, keepdims=True)
        return c / nx.sqrt((c * c).mean(axis=0, keepdims=True) + 1e-5)

    def normalize_prototypes(self) -> None:
        v = self.params["prototypes"].data
        v /= np.linalg.norm(v, axis=1, keepdims=True)

    def parameters(self) -> list:
        return list(self.params.values())

    def copy(self) -> "SSLHead":
        return SSLHead({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}, self.batchnorm)


@dataclass
class TeacherState:
    encoder: ViTModel
    head: SSLHead
    center: np.ndarray


# ---------------------------------------------------------------------------
# views
# ---------------------------------------------------------------------------


def split_grid(image: np.ndarray, g: int, size: int | None = None) -> list:
    """Row-major ``g x g`` tiling; each tile resized to ``size`` (default: input size)."""
    if not 1 <= g <= 5:
        raise ConfigError(f"grid_split must lie in 1..5, got {g}")
    h, w = image.shape[:2]
    size = size or h
    ys = [round(i * h / g) for i in range(g + 1)]
    xs = [round(i * w / g) for i in range(g + 1)]
    return [resize_bilinear(image[ys[i]:ys[i + 1], xs[j]:xs[j + 1]], size) for i in range(g) for j in range(g)]


def _view(image, size, scale, cfg: SSLConfig, rng) -> np.ndarray:
    out = random_resized_crop(image, size, scale, rng)
    if cfg.flips:
        if rng.random() < 0.5:
            out = hflip(out)
        if rng.random() < 0.5:
            out = vflip(out)
    if cfg.color_jitter:
        j = cfg.color_jitter
        out = color_jitter(out, j, j, j, rng)
    if cfg.sharpness:
        out = adjust_sharpness(out, rng.uniform(0.5, 2.0))
    return out


def make_views(image: np.ndarray, cfg: SSLConfig, rng: np.random.Generator, size: int | None = None) -> dict:
    """``global_crops`` large-scale and ``local_crops`` small-scale augmented crops, all at ``size``."""
    size = size or image.shape[0]
    return {
        "global": [_view(image, size, cfg.global_scale, cfg, rng) for _ in range(cfg.global_crops)],
        "local": [_view(image, size, cfg.local_scale, cfg, rng) for _ in range(cfg.local_crops)],
    }


# ---------------------------------------------------------------------------
# objective and teacher updates
# ---------------------------------------------------------------------------


def dino_loss(student_logits, teacher_logits, center, student_temp: float, teacher_temp: float) -> Tensor:
    """Mean cross-entropy between teacher and student views over distinct-crop pairs.

    ``student_logits[i]`` for ``i < len(teacher_logits)`` must come from the
    same crop as ``teacher_logits[i]``; those pairs are skipped. Teacher
    targets are ``softmax((t - center) / teacher_temp)`` and carry no gradient.
    """
    if len(teacher_logits) < 1 or len(student_logits) < 1:
        raise PairingError("need at least one teacher and one student view")
    center = np.asarray(getattr(center, "data", center))
    targets = []
    for t in teacher_logits:
        t = np.asarray(getattr(t, "data", t))
        with nx.no_grad():
            targets.append(nx.softmax(Tensor(t - center.astype(t.dtype)), axis=-1, temperature=teacher_temp).data)
    logps = [nx.log_softmax(s, axis=-1, temperature=student_temp) for s in student_logits]
    terms = []
    for ti, q in enumerate(targets):
        for si, lp in enumerate(logps):
            if si == ti:
                continue
            terms.append((-(nx.mul(Tensor(q.astype(lp.dtype)), lp)).sum(axis=-1)).mean())
    if not terms:
        raise PairingError("no (teacher, student) pair with distinct crops")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _params_of(obj) -> list:
    if isinstance(obj, TeacherState):
        return obj.encoder.parameters() + obj.head.parameters()
    if isinstance(obj, tuple):
        return [p for part in obj for p in _params_of(part)]
    if hasattr(obj, "parameters"):
        return obj.parameters()
    return list(obj)


def ema_update(teacher, student, momentum: float, skip_frozen: bool = True) -> None:
    """``teacher <- m * teacher + (1 - m) * student`` elementwise, in place.

    Accepts models, heads, ``(encoder, head)`` tuples or parameter lists.
    With ``skip_frozen`` the tensors the student does not train are left
    alone (they are identical in both networks and must stay bit-exact).
    """
    if not 0 <= momentum <= 1:
        raise ConfigError(f"EMA momentum must lie in [0, 1], got {momentum}")
    tp, sp = _params_of(teacher), _params_of(student)
    if len(tp) != len(sp) or any(a.shape != b.shape for a, b in zip(tp, sp)):
        raise ModelError("teacher and student parameter structures differ")
    m = momentum
    for t, s in zip(tp, sp):
        if skip_frozen and not s.requires_grad:
            continue
        t.data[...] = m * t.data + (1.0 - m) * s.data


def update_center(center, teacher_logits, momentum: float) -> np.ndarray:
    """``center <- m * center + (1 - m) * batch_mean(teacher_logits)``."""
    logits = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    batch_mean = logits.reshape(-1, logits.shape[-1]).mean(axis=0)
    return momentum * np.asarray(center) + (1.0 - momentum) * batch_mean


def teacher_entropy(teacher_logits, center, teacher_temp: float) -> float:
    """Entropy of the batch-averaged teacher distribution (nats); ln K means uniform usage."""
    z = (np.asarray(teacher_logits, dtype=np.float64) - center) / teacher_temp
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    pm = p.mean(axis=0)
    pm = pm[pm > 0]
    return float(-(pm * np.log(pm)).sum())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class SSLResult:
    model: ViTModel
    student: ViTModel
    teacher: TeacherState
    student_head: SSLHead
    log: list = field(default_factory=list)


def _item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x0E1E, epoch, index]))


def post_pretrain(model: ViTModel, images, cfg: SSLConfig, policy=FreezePolicy.UNFROZEN, on_step=None) -> SSLResult:
    """Self-distillation post-pretraining of ``model`` on unlabeled ``images``.

    ``policy`` is UNFROZEN (every encoder weight adapts) or BE_SSL (only
    expanded blocks adapt). Returns the teacher encoder by default
    (``cfg.return_teacher``) together with the per-step log.
    """
    cfg.validate()
    policy = FreezePolicy(policy)
    if policy not in (FreezePolicy.UNFROZEN, FreezePolicy.BE_SSL):
        raise ConfigError(f"post-pretraining supports UNFROZEN or BE_SSL, not {policy.value}")
    images = np.asarray(getattr(images, "images", images))
    if len(images) == 0:
        raise DataError("post-pretraining needs a non-empty dataset")
    student = apply_freeze_policy(model, policy)
    if student.head is not None:
        student.head.weight.requires_grad = False
        student.head.bias.requires_grad = False
    size = student.cfg.image_size
    dtype = student.dtype
    head = SSLHead.init(student.cfg.dim, cfg, cfg.seed, dtype)
    teacher = TeacherState(student.copy(), head.copy(), np.zeros(cfg.prototypes, dtype=np.float64))

    tiles = np.stack([t for img in images for t in split_grid(img, cfg.grid_split, size)]).astype(dtype)
    n = len(tiles)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = min(cfg.warmup_steps, max(total - 1, 0))
    floor = cfg.min_lr if cfg.min_lr is not None else cfg.lr / 100
    params = student.parameters() + head.parameters()
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    n_global = cfg.global_crops
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED, epoch])).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            views = [make_views(tiles[i], cfg, _item_rng(cfg.seed, epoch, int(i)), size) for i in idx]
            per_view = [np.stack([v["global"][j] for v in views]) for j in range(n_global)]
            per_view += [np.stack([v["local"][j] for v in views]) for j in range(cfg.local_crops)]
            b = len(idx)
            with nx.no_grad():
                t_in = np.concatenate(per_view[:n_global]).astype(dtype)
                t_logits = teacher.head(forward(teacher.encoder, t_in)["cls"]).data
            t_views = [t_logits[j * b:(j + 1) * b] for j in range(n_global)]
            s_in = np.concatenate(per_view).astype(dtype)
            s_all = head(forward(student, s_in)["cls"])
            s_views = [s_all[j * b:(j + 1) * b] for j in range(len(per_view))]
            loss = dino_loss(s_views, t_views, teacher.center, cfg.student_temp, cfg.teacher_temp)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite self-distillation loss at step {step}")
            opt.zero_grad()
            loss.backward()
            lr = lr_at_step(step, warmup, total, cfg.lr, floor)
            opt.step(lr)
            head.normalize_prototypes()
            mom = cosine_momentum(step, total, cfg.ema_momentum, cfg.ema_final)
            with nx.no_grad():
                ema_update((teacher.encoder, teacher.head), (student, head), mom)
            ent = teacher_entropy(t_logits, teacher.center, cfg.teacher_temp)
            teacher.center = update_center(teacher.center, t_logits, cfg.center_momentum)
            row = {"step": step, "loss": float(loss.item()), "teacher_entropy": ent, "lr": lr, "ema_momentum": mom}
            log.append(row)
            if on_step is not None:
                on_step(row, student, teacher)
            step += 1
    adapted = teacher.encoder if cfg.return_teacher else student
    adapted = adapted.copy()
    if model.head is not None:
        adapted.head.weight.requires_grad = True
        adapted.head.bias.requires_grad = True
    return SSLResult(adapted, student, teacher, head, log)


def write_log_csv(rows, path, columns=LOG_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


__all__ = [
    "SSLConfig", "SSLHead", "TeacherState", "SSLResult", "split_grid", "make_views", "dino_loss",
    "ema_update", "update_center", "teacher_entropy", "post_pretrain", "write_log_csv",
]
