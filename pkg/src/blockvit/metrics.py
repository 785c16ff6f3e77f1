"""Evaluation metrics.

Confusion-matrix metrics (accuracy, macro F1, quadratic weighted kappa),
rank-based ROC AUC, referable-DR regrouping, kNN scoring of embeddings,
LDA projection for visualization, and replicate aggregation.

Conventions: macro averaging for F1 and multiclass AUC; AUC gives half
credit to tied scores; a class with no predicted or no true samples has
F1 = 0.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import rankdata

from .errors import AnalysisError, DataError, DimensionError, LabelError, UndefinedMetricError


@dataclass
class ConfusionMatrix:
    """``counts[i, j]`` = samples with ground truth ``i`` predicted as ``j``."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, labels, n_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise DimensionError(f"{len(preds)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise DataError("confusion matrix of an empty sample is undefined")
    for name, v in (("prediction", preds), ("label", labels)):
        if v.min() < 0 or v.max() >= n_classes:
            raise LabelError(f"{name} values must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts)) / cm.total


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    out = np.zeros(cm.n_classes)
    for i in range(cm.n_classes):
        if tp[i] + fp[i] == 0 or tp[i] + fn[i] == 0:
            continue
        p = tp[i] / (tp[i] + fp[i])
        r = tp[i] / (tp[i] + fn[i])
        out[i] = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return out


def macro_f1(cm: ConfusionMatrix) -> float:
    return float(per_class_f1(cm).mean())


def qkappa(cm: ConfusionMatrix) -> float:
    """Quadratic weighted kappa ``1 - O_w / E_w``."""
    n = cm.n_classes
    if n < 2:
        raise UndefinedMetricError("qkappa needs at least 2 classes")
    o = cm.counts.astype(np.float64)
    t = o.sum()
    if t == 0:
        raise UndefinedMetricError("qkappa of an empty confusion matrix")
    i, j = np.indices((n, n))
    w = (i - j) ** 2 / (n - 1) ** 2
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / t
    e_w = float((w * e).sum())
    if e_w == 0:
        raise UndefinedMetricError("qkappa undefined: expected weighted disagreement is zero")
    return 1.0 - float((w * o).sum()) / e_w


def auc_binary(scores, labels) -> float:
    """Mann-Whitney estimate of ROC AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(scores)  # average ranks give ties half credit
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_per_class(probs, labels) -> dict:
    """One-vs-rest AUC per class; classes absent (or universal) in ``labels`` are skipped."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    out = {}
    for c in range(probs.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            continue
        out[c] = auc_binary(probs[:, c], pos)
    return out


def auc_macro_ovr(probs, labels) -> float:
    per = auc_per_class(probs, labels)
    if not per:
        raise UndefinedMetricError("no class has both positive and negative samples")
    return float(np.mean(list(per.values())))


class RDR(enum.IntEnum):
    NON_REFERABLE = 0
    REFERABLE = 1


def rdr_map(stage):
    """DR stages 0-1 -> NON_REFERABLE, 2-4 -> REFERABLE (vectorized for arrays).

    An :class:`RDR` member is already on the binary scale and is returned as is.
    """
    if isinstance(stage, RDR):
        return stage
    arr = np.asarray(stage)
    if np.any(arr < 0) or np.any(arr > 4):
        raise LabelError("DR stage must lie in [0, 4]")
    mapped = (arr >= 2).astype(np.int64)
    return RDR(int(mapped)) if mapped.ndim == 0 else mapped


def rdr_accuracy(preds, labels) -> float:
    return float(np.mean(rdr_map(np.asarray(preds)) == rdr_map(np.asarray(labels))))


# ---------------------------------------------------------------------------
# kNN
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnnConfig:
    k: int = 20
    top_n: int = 5


def _normalize_rows(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def knn_predict(ref_embs, ref_labels, query_embs, cfg: KnnConfig = KnnConfig()) -> list:
    """Ranked class lists per query.

    Neighbours are the ``k`` most cosine-similar references (ties: lower
    index first). Classes rank by vote count, then by summed similarity,
    then by class index.
    """
    ref = _normalize_rows(ref_embs)
    qry = _normalize_rows(query_embs)
    if ref.shape[1] != qry.shape[1]:
        raise DimensionError(f"embedding widths differ: reference {ref.shape[1]}, query {qry.shape[1]}")
    if not 1 <= cfg.k <= len(ref):
        raise DataError(f"k={cfg.k} must lie in [1, {len(ref)}]")
    ref_labels = np.asarray(ref_labels)
    ranked = []
    for start in range(0, len(qry), 256):
        sims = qry[start:start + 256] @ ref.T
        nn = np.argsort(-sims, axis=1, kind="stable")[:, :cfg.k]
        for row, idx in zip(sims, nn):
            votes: dict = {}
            for j in idx:
                c = int(ref_labels[j])
                cnt, s = votes.get(c, (0, 0.0))
                votes[c] = (cnt + 1, s + row[j])
            ranked.append(sorted(votes, key=lambda c: (-votes[c][0], -votes[c][1], c)))
    return ranked


def knn_eval(ref_embs, ref_labels, query_embs, query_labels, cfg: KnnConfig = KnnConfig()) -> dict:
    """Top-1 / top-5 kNN accuracy in percent."""
    ranked = knn_predict(ref_embs, ref_labels, query_embs, cfg)
    query_labels = np.asarray(query_labels)
    top1 = np.mean([r[0] == y for r, y in zip(ranked, query_labels)])
    top5 = np.mean([y in r[:cfg.top_n] for r, y in zip(ranked, query_labels)])
    return {"top1": 100.0 * float(top1), "top5": 100.0 * float(top5)}


def forgetting_delta(before: dict, after: dict) -> dict:
    """Signed change (after - before) in percentage points."""
    return {"dtop1": after["top1"] - before["top1"], "dtop5": after["top5"] - before["top5"]}


# ---------------------------------------------------------------------------
# LDA
# ---------------------------------------------------------------------------


@dataclass
class LdaResult:
    projected: np.ndarray
    directions: np.ndarray  # (D, out_dims)
    classes: np.ndarray
    means: np.ndarray  # per-class mean in projected space
    sds: np.ndarray  # per-class per-axis SD in projected space
    ellipses: list = field(default_factory=list)  # (cx, cy, rx, ry, angle_deg) at 2 SD


def lda_project(embs, labels, out_dims: int = 2, ridge: float | None = None) -> LdaResult:
    """Fisher LDA: top generalized eigenvectors of (S_B, S_W + eps I).

    ``eps`` defaults to ``1e-6 * trace(S_W) / D`` so the problem stays well
    posed when the embedding width exceeds the sample count. Directions
    are sign-fixed so their largest-magnitude component is positive.
    """
    x = np.asarray(embs, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise AnalysisError("LDA needs at least two classes")
    if any((y == c).sum() < 2 for c in classes):
        raise AnalysisError("LDA needs at least two samples per class")
    d = x.shape[1]
    mu = x.mean(axis=0)
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for c in classes:
        xc = x[y == c]
        mc = xc.mean(axis=0)
        dc = xc - mc
        sw += dc.T @ dc
        dm = (mc - mu)[:, None]
        sb += len(xc) * (dm @ dm.T)
    eps = ridge if ridge is not None else 1e-6 * np.trace(sw) / d
    if eps <= 0:
        eps = 1e-12
    vals, vecs = linalg.eigh(sb, sw + eps * np.eye(d))
    order = np.argsort(vals)[::-1][:out_dims]
    w = vecs[:, order]
    w = w / np.linalg.norm(w, axis=0, keepdims=True)
    signs = np.sign(w[np.argmax(np.abs(w), axis=0), np.arange(w.shape[1])])
    w = w * np.where(signs == 0, 1.0, signs)
    proj = (x - mu) @ w
    means = np.stack([proj[y == c].mean(axis=0) for c in classes])
    sds = np.stack([proj[y == c].std(axis=0, ddof=1) for c in classes])
    ellipses = []
    if proj.shape[1] >= 2:
        for c in classes:
            pc = proj[y == c][:, :2]
            cov = np.cov(pc.T)
            ev, evec = np.linalg.eigh(cov)
            ev = np.clip(ev, 0, None)
            angle = math.degrees(math.atan2(evec[1, 1], evec[0, 1]))
            m = pc.mean(axis=0)
            ellipses.append((float(m[0]), float(m[1]), 2 * math.sqrt(ev[1]), 2 * math.sqrt(ev[0]), angle))
    return LdaResult(proj, w, classes, means, sds, ellipses)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRIC_NAMES = ("accuracy", "macro_f1", "auc", "qkappa", "rdr_accuracy")


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    auc: float | None
    qkappa: float | None
    rdr_accuracy: float | None
    confusion: list
    n_samples: int
    meta: dict = field(default_factory=dict)

    def metric(self, name: str):
        return getattr(self, name)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError:
        return None


def evaluate(probs, labels, n_classes: int | None = None, meta: dict | None = None, preds=None) -> MetricsReport:
    """Full report from class probabilities (preds default to the argmax)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = n_classes or probs.shape[1]
    if preds is None:
        preds = probs.argmax(axis=1)
    cm = confusion(preds, labels, n_classes)
    rdr = rdr_accuracy(preds, labels) if n_classes == 5 else None
    return MetricsReport(
        accuracy=accuracy(cm),
        macro_f1=macro_f1(cm),
        auc=_safe(auc_macro_ovr, probs, labels),
        qkappa=_safe(qkappa, cm),
        rdr_accuracy=rdr,
        confusion=cm.counts.tolist(),
        n_samples=int(len(labels)),
        meta=dict(meta or {}),
    )


def aggregate_runs(reports, metrics=METRIC_NAMES) -> dict:
    """Per-metric mean, sample SD (n-1) and SEM = SD / sqrt(n).

    With a single run the SD is reported as 0 with ``sd_defined`` false and
    the SEM is None. Missing (None) metric values are skipped.
    """
    if not reports:
        raise DataError("aggregate_runs needs at least one report")
    out = {}
    for name in metrics:
        vals = [r.metric(name) if isinstance(r, MetricsReport) else r[name] for r in reports]
        vals = np.array([v for v in vals if v is not None], dtype=np.float64)
        n = len(vals)
        if n == 0:
            out[name] = {"mean": None, "sd": None, "sem": None, "n": 0, "sd_defined": False}
            continue
        if n == 1:
            out[name] = {"mean": float(vals[0]), "sd": 0.0, "sem": None, "n": 1, "sd_defined": False}
            continue
        sd = float(vals.std(ddof=1))
        out[name] = {"mean": float(vals.mean()), "sd": sd, "sem": sd / math.sqrt(n), "n": n, "sd_defined": True}
    return out
