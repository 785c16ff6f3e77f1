"""Supervised fine-tuning with a linear head.

Two modes: FROZEN_BB trains only the head (linear probing), UNFROZEN
trains everything. The kept model is the epoch with the best validation
qKappa (earliest on ties).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .blockexp import FreezePolicy, apply_freeze_policy
from .errors import ConfigError, DataError, DivergenceError, LabelError, WeightingError
from .imageops import AugmentPolicy, augment
from .metrics import MetricsReport, evaluate
from .numerics import Tensor
from .optim import AdamW, lr_at_step
from .vit import EmbeddingStrategy, ViTModel, embed_dataset, forward, select_embedding

LOG_COLUMNS = ("epoch", "train_loss", "val_acc", "val_qkappa", "val_auc", "lr")


class FinetuneMode(str, enum.Enum):
    FROZEN_BB = "frozen_bb"
    UNFROZEN = "unfrozen"


class LossKind(str, enum.Enum):
    VANILLA_CE = "vanilla_ce"
    SCALED_CE = "scaled_ce"
    DISTANCE_SCALED_CE = "distance_scaled_ce"


@dataclass
class ClassWeights:
    factors: np.ndarray
    counts: np.ndarray
    total: int
    n_classes: int


def class_weights(train_labels, n_classes: int) -> ClassWeights:
    """``f_i = N_total / (N_i * n_classes)``; up-weights rare classes."""
    labels = np.asarray(train_labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    if len(counts) < n_classes or np.any(counts == 0):
        missing = [i for i in range(n_classes) if i >= len(counts) or counts[i] == 0]
        raise WeightingError(f"classes {missing} have no training samples")
    total = int(len(labels))
    return ClassWeights(total / (counts * n_classes), counts, total, n_classes)


def _weights_array(weights, c: int, dtype) -> np.ndarray:
    if weights is None:
        return np.ones(c, dtype=dtype)
    arr = np.asarray(getattr(weights, "factors", weights), dtype=dtype)
    if arr.shape != (c,):
        raise ConfigError(f"{arr.shape[0]} class weights for {c} classes")
    return arr


def distance_scaled_ce(logits, targets, weights=None, lam: float = 1.0) -> Tensor:
    """Class-weighted CE plus an expected squared ordinal-distance penalty.

    Per sample: ``f_y * (-log p_y + lam * sum_j p_j (j - y)^2 / (C - 1)^2)``,
    averaged over the batch. The distance term uses the qKappa weight
    matrix, so confident far-off predictions cost more than near misses.
    """
    logits = nx.as_tensor(logits)
    b, c = logits.shape
    if c < 2:
        raise ConfigError("distance-scaled CE needs at least 2 classes")
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    if np.any(y < 0) or np.any(y >= c):
        raise LabelError(f"targets must lie in [0, {c})")
    w = _weights_array(weights, c, logits.dtype)
    logp = nx.log_softmax(logits, axis=-1)
    nll = -logp[np.arange(b), y]
    per = nll
    if lam:
        dist = ((np.arange(c)[None, :] - y[:, None]) ** 2 / (c - 1) ** 2).astype(logits.dtype)
        per = per + lam * nx.mul(nx.exp(logp), dist).sum(axis=-1)
    return nx.mul(per, w[y]).mean()


def compute_loss(kind, logits, targets, weights=None, lam: float = 1.0) -> Tensor:
    kind = LossKind(kind)
    if kind is LossKind.VANILLA_CE:
        return nx.cross_entropy(logits, targets)
    if kind is LossKind.SCALED_CE:
        return nx.cross_entropy(logits, targets, _weights_array(weights, nx.as_tensor(logits).shape[1], nx.as_tensor(logits).dtype))
    return distance_scaled_ce(logits, targets, weights, lam)


@dataclass
class FinetuneConfig:
    mode: FinetuneMode = FinetuneMode.FROZEN_BB
    strategy: EmbeddingStrategy = EmbeddingStrategy.CLS
    loss: LossKind = LossKind.SCALED_CE
    distance_lambda: float = 1.0
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    min_lr: float | None = None
    warmup_steps: int = 0
    weight_decay: float = 0.05
    drop_path: float = 0.0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.none)
    standardize_features: bool = True  # frozen mode: head sees train-standardized embeddings
    seed: int = 0

    def __post_init__(self):
        self.mode = FinetuneMode(self.mode)
        self.strategy = EmbeddingStrategy(self.strategy)
        self.loss = LossKind(self.loss)
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy(**self.augment)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"], d["strategy"], d["loss"] = self.mode.value, self.strategy.value, self.loss.value
        return d


@dataclass
class CheckpointRecord:
    epoch: int
    report: MetricsReport
    snapshot: dict | None = None


@dataclass
class FinetuneResult:
    model: ViTModel
    records: list
    log: list
    best_epoch: int


def select_best(records) -> int:
    """Index of the record with the highest validation qKappa (earliest on ties; None ranks last)."""
    best, best_val = 0, -math.inf
    for i, r in enumerate(records):
        q = r.report.qkappa
        v = -math.inf if q is None else q
        if v > best_val:
            best, best_val = i, v
    return best


def predict_proba(model: ViTModel, images, batch_size: int = 128) -> np.ndarray:
    out = []
    with nx.no_grad():
        for i in range(0, len(images), batch_size):
            logits = forward(model, images[i:i + batch_size])["logits"]
            out.append(nx.softmax(logits, axis=-1).data)
    return np.concatenate(out).astype(np.float64)


def _probs_from_embeddings(model: ViTModel, embs) -> np.ndarray:
    with nx.no_grad():
        return nx.softmax(model.head(Tensor(embs)), axis=-1).data.astype(np.float64)


def _feature_stats(embs: np.ndarray):
    """Per-dimension mean and inverse SD; the floor keeps constant dimensions finite."""
    e = embs.astype(np.float64)
    mu, var = e.mean(axis=0), e.var(axis=0)
    inv = 1.0 / np.sqrt(var + 1e-6 * var.mean() + 1e-30)
    return mu.astype(embs.dtype), inv.astype(embs.dtype)


def _fold_standardization(snapshot: dict, mu, inv) -> dict:
    """Rewrite the head in ``snapshot`` to take raw embeddings: W' = diag(inv) W, b' = b - (mu * inv) W."""
    w, b = snapshot["head.weight"], snapshot["head.bias"]
    w64 = w.astype(np.float64)
    scale = inv.astype(np.float64)
    snapshot["head.weight"] = (w64 * scale[:, None]).astype(w.dtype)
    snapshot["head.bias"] = (b - (mu.astype(np.float64) * scale) @ w64).astype(b.dtype)
    return snapshot


def finetune_run(model: ViTModel, train, val, cfg: FinetuneConfig, meta: dict | None = None) -> FinetuneResult:
    """Train on ``train = (images, labels)``, checkpoint on ``val`` every epoch.

    With a frozen backbone and no stochastic augmentation the encoder is
    a fixed function, so embeddings are computed once and only the head
    runs per step (numerically the same computation).
    """
    x_tr, y_tr = np.asarray(train[0]), np.asarray(train[1], dtype=np.int64)
    x_va, y_va = np.asarray(val[0]), np.asarray(val[1], dtype=np.int64)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise DataError("fine-tuning needs non-empty train and val splits")
    if model.head is None:
        raise ConfigError("attach a classifier head before fine-tuning")
    n_classes = model.head.num_classes
    if model.head.strategy is not cfg.strategy:
        raise ConfigError(f"head built for {model.head.strategy.value}, config asks for {cfg.strategy.value}")
    m = apply_freeze_policy(model, FreezePolicy(cfg.mode.value))
    weights = None
    if cfg.loss is not LossKind.VANILLA_CE:
        weights = class_weights(y_tr, n_classes)
    steps_per_epoch = math.ceil(len(x_tr) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.epochs > 0 and cfg.warmup_steps >= total:
        raise ConfigError(f"warmup_steps {cfg.warmup_steps} must be < total steps {total}")
    floor = cfg.min_lr if cfg.min_lr is not None else cfg.lr / 100
    augmenting = any(getattr(cfg.augment, f) for f in ("resized_crop", "color_jitter", "hflip", "vflip", "rotation", "sharpness"))
    frozen = cfg.mode is FinetuneMode.FROZEN_BB
    cached = frozen and not augmenting and cfg.drop_path == 0
    mu = inv = None
    if frozen:
        # the encoder is fixed, so clean embeddings (and their statistics) never change
        e_tr = embed_dataset(m, x_tr.astype(m.dtype), cfg.strategy)
        e_va = embed_dataset(m, x_va.astype(m.dtype), cfg.strategy)
        if cfg.standardize_features and cfg.epochs > 0:
            mu, inv = _feature_stats(e_tr)
            e_tr, e_va = (e_tr - mu) * inv, (e_va - mu) * inv

    def val_probs():
        return _probs_from_embeddings(m, e_va) if frozen else predict_proba(m, x_va.astype(m.dtype))

    meta = dict(meta or {})
    params = [p for p in m.parameters() if p.requires_grad]
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    records, log = [], []
    if cfg.epochs == 0:
        rep = evaluate(val_probs(), y_va, n_classes, {**meta, "epoch": 0})
        records.append(CheckpointRecord(0, rep, {n: t.data.copy() for n, t in m.named_parameters()}))
    step = 0
    best_q = -math.inf
    best_snapshot = None
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF1, epoch]))
        order = rng.permutation(len(x_tr))
        losses = []
        lr = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            yb = y_tr[idx]
            if cached:
                logits = m.head(Tensor(e_tr[idx]))
            else:
                xb = x_tr[idx]
                if augmenting:
                    xb = np.stack([
                        augment(img, cfg.augment, np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, int(i)])))
                        for img, i in zip(xb, idx)
                    ])
                out = forward(m, xb.astype(m.dtype), drop_path=cfg.drop_path, rng=rng)
                if mu is None:
                    logits = out["logits"]
                else:
                    emb = select_embedding(out, cfg.strategy).data
                    logits = m.head(Tensor((emb - mu) * inv))
            loss = compute_loss(cfg.loss, logits, yb, weights, cfg.distance_lambda)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite fine-tuning loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            lr = lr_at_step(step, cfg.warmup_steps, total, cfg.lr, floor)
            opt.step(lr)
            losses.append(loss.item())
            step += 1
        rep = evaluate(val_probs(), y_va, n_classes, {**meta, "epoch": epoch})
        q = -math.inf if rep.qkappa is None else rep.qkappa
        snap = None
        if q > best_q or best_snapshot is None:
            best_q = q
            best_snapshot = snap = {n: t.data.copy() for n, t in m.named_parameters()}
            if mu is not None:
                _fold_standardization(snap, mu, inv)
        records.append(CheckpointRecord(epoch, rep, snap))
        log.append({
            "epoch": epoch, "train_loss": float(np.mean(losses)), "val_acc": rep.accuracy,
            "val_qkappa": rep.qkappa, "val_auc": rep.auc, "lr": lr,
        })
    best = select_best(records)
    snapshot = records[best].snapshot if cfg.epochs == 0 else best_snapshot
    out_model = m.copy()
    for n, t in out_model.named_parameters():
        t.data[...] = snapshot[n]
    return FinetuneResult(out_model, records, log, records[best].epoch)


def evaluate_model(model: ViTModel, images, labels, meta: dict | None = None) -> MetricsReport:
    return evaluate(predict_proba(model, np.asarray(images).astype(model.dtype)), labels, model.head.num_classes, meta)


def write_log_csv(rows, path, columns=LOG_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


__all__ = [
    "FinetuneMode", "LossKind", "ClassWeights", "class_weights", "distance_scaled_ce", "compute_loss",
    "FinetuneConfig", "CheckpointRecord", "FinetuneResult", "select_best", "finetune_run", "predict_proba",
    "evaluate_model", "write_log_csv",
]
