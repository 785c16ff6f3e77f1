"""Study designs: pretraining, fine-tuning, MSDFT, cross-evaluation, few-shot,
forgetting and ablation sweeps.

Each ``cmd_*`` takes a :class:`RunContext` and writes its outputs into
``ctx.out``; the pure experiment functions underneath return plain Python
objects so tests can drive them without touching disk. Every RNG consumer
gets its seed from :func:`~blockvit.config.derive_seed`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import report as rep
from .blockexp import FreezePolicy, apply_freeze_policy, expand_blocks, freeze_audit, snapshot
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, derive_seed
from .data import ImageDataset, SyntheticSpec, assign_splits, few_shot_sample, load_dataset, synth_generate
from .errors import ConfigError, DataError
from .finetune import FinetuneConfig, finetune_run, predict_proba
from .finetune import write_log_csv as write_ft_log
from .metrics import KnnConfig, aggregate_runs, evaluate, forgetting_delta, knn_eval, lda_project
from .ssl import SSLConfig, post_pretrain
from .ssl import write_log_csv as write_ssl_log
from .vit import EmbeddingStrategy, ViTConfig, ViTModel, attach_head, count_params, embed_dataset, init_model

SWEEP_AXES = ("expansion_k", "grid_g", "embedding_strategy", "loss_variant")
DEFAULT_SWEEPS = {
    "expansion_k": (0, 1, 3, 6, 12),
    "grid_g": (2, 3, 4, 5),
    "embedding_strategy": ("cls", "patch_mean", "concat"),
    "loss_variant": ("vanilla_ce", "scaled_ce", "distance_scaled_ce"),
}


@dataclass
class RunContext:
    """Resolved configuration of one command invocation."""

    model: ViTConfig = field(default_factory=lambda: ViTConfig(dim=32, depth=4, heads=4))
    ssl: SSLConfig = field(default_factory=SSLConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    seed: int = 0
    out: Path | None = None

    def sections(self) -> dict:
        return {"model": self.model, "ssl": self.ssl, "finetune": self.finetune, "experiment": self.experiment,
                "run": {"seed": self.seed}}

    @property
    def config_hash(self) -> str:
        return rep.config_hash({k: _as_dict(v) for k, v in self.sections().items()})

    def path(self, name: str) -> Path:
        if self.out is None:
            raise ConfigError("no output directory configured")
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    @classmethod
    def from_ini(cls, path=None, seed: int | None = None, out=None) -> "RunContext":
        """Resolve a config file; an explicit ``seed`` overrides ``[run] seed``."""
        ctx = cls(seed=0 if seed is None else seed, out=Path(out) if out is not None else None)
        if path is None:
            return ctx
        sections = cfgmod.read_ini(path)
        known = {"model", "ssl", "finetune", "experiment", "run"}
        for name in sections:
            if name not in known:
                raise ConfigError(f"unknown config section [{name}]")
        run = sections.pop("run", {})
        if set(run) - {"seed"}:
            raise ConfigError(f"[run] unknown keys {sorted(set(run) - {'seed'})}")
        if seed is None and "seed" in run:
            try:
                ctx.seed = int(run["seed"])
            except ValueError:
                raise ConfigError(f"[run] seed must be an integer, got {run['seed']!r}") from None
        for name, values in sections.items():
            setattr(ctx, name, cfgmod.apply_section(getattr(ctx, name), values, name))
        ctx.model.validate()
        ctx.ssl.validate()
        return ctx

    def write_config(self) -> Path:
        return rep._write(self.path("config.ini"), cfgmod.dump_ini(self.sections()))


def _as_dict(obj):
    return dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------


def load_inputs(ctx: RunContext, paths=None) -> list:
    """Datasets named in the config, or synthetic ones when none are given."""
    exp = ctx.experiment
    paths = exp.datasets if paths is None else paths
    out = []
    if paths:
        for i, p in enumerate(paths):
            ds = load_dataset(p, ctx.model.image_size, exp.class_count or None, exp.filter_quality)
            if ds.name in {d.name for d in out}:
                ds.manifest.name = f"{ds.name}_{i}"
            if not len(ds.manifest.indices("train")) or not len(ds.manifest.indices("val")):
                ds = ImageDataset(assign_splits(ds.manifest, seed=derive_seed(ctx.seed, "split", i)), ds.images, ds.meta)
            out.append(ds)
        return out
    for i in range(exp.synth_datasets):
        spec = SyntheticSpec(
            n_per_class=exp.synth_n_per_class, class_count=exp.class_count, image_size=ctx.model.image_size,
            domain=exp.synth_domain + i, seed=derive_seed(ctx.seed, "synth", i), name=f"synth{i}",
        )
        out.append(synth_generate(spec))
    return out


def unlabeled_images(ctx: RunContext, datasets=None) -> np.ndarray:
    exp = ctx.experiment
    if exp.unlabeled:
        parts = [load_dataset(p, ctx.model.image_size, None, exp.filter_quality).images for p in exp.unlabeled]
        return np.concatenate(parts)
    datasets = datasets if datasets is not None else load_inputs(ctx)
    return np.concatenate([d.images for d in datasets])


def initial_encoder(ctx: RunContext) -> ViTModel:
    if ctx.experiment.checkpoint:
        return load_checkpoint(ctx.experiment.checkpoint)
    cfg = dataclasses.replace(ctx.model, num_classes=0)
    return init_model(cfg, derive_seed(ctx.seed, "init"))


def _split(ds: ImageDataset, name: str):
    x, y = ds.split(name)
    if len(x) == 0:
        raise DataError(f"dataset {ds.name} has no {name} split")
    return x, y


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def pretrain(encoder: ViTModel, images, ssl_cfg: SSLConfig, policy="unfrozen", k: int = 0, seed: int = 0):
    """SSL post-pretraining; ``be_ssl`` expands by ``k`` blocks first.

    Returns ``(adapted encoder, log, freeze audit or None)``.
    """
    policy = FreezePolicy(policy)
    model = encoder
    if policy is FreezePolicy.BE_SSL:
        if k < 1:
            raise ConfigError("be_ssl pretraining needs expansion_k >= 1")
        model = expand_blocks(encoder, k, seed)
    elif k:
        raise ConfigError("expansion_k is only used with the be_ssl policy")
    cfg = dataclasses.replace(ssl_cfg, seed=seed)
    if cfg.epochs == 0:
        return apply_freeze_policy(model, policy), [], None
    before = snapshot(model)
    res = post_pretrain(model, images, cfg, policy)
    audit = freeze_audit(before, res.student) if policy is FreezePolicy.BE_SSL else None
    return res.model, res.log, audit


def cmd_pretrain(ctx: RunContext) -> dict:
    exp = ctx.experiment
    images = unlabeled_images(ctx)
    enc = initial_encoder(ctx)
    model, log, audit = pretrain(enc, images, ctx.ssl, exp.policy, exp.expansion_k, derive_seed(ctx.seed, "ssl"))
    summary = {
        "blocks": model.depth,
        "expanded_blocks": sum(b.origin.value == "expanded" for b in model.blocks),
        "policy": FreezePolicy(exp.policy).value,
        "steps": len(log),
        "final_loss": log[-1]["loss"] if log else None,
        "freeze_audit_passed": None if audit is None else audit.passed,
        "config_hash": ctx.config_hash,
    }
    if ctx.out is not None:
        ctx.write_config()
        save_checkpoint(model, ctx.path("model.ckpt"), {"config_hash": ctx.config_hash})
        write_ssl_log(log, ctx.path("ssl_log.csv"))
        rep.emit_report(summary, "json", ctx.path("summary.json"))
    return {"model": model, "log": log, "summary": summary}


# ---------------------------------------------------------------------------
# supervised fine-tuning and evaluation
# ---------------------------------------------------------------------------


def train_eval(encoder: ViTModel, ds: ImageDataset, ft_cfg: FinetuneConfig, seed: int, meta=None):
    """Attach a head, fine-tune on TRAIN/VAL, return ``(FinetuneResult, test report, test probs)``."""
    tr, va, te = _split(ds, "train"), _split(ds, "val"), _split(ds, "test")
    cfg = dataclasses.replace(ft_cfg, seed=seed)
    model = attach_head(encoder, ds.class_count, cfg.strategy, seed=seed)
    res = finetune_run(model, tr, va, cfg, meta)
    probs = predict_proba(res.model, te[0].astype(res.model.dtype))
    return res, evaluate(probs, te[1], ds.class_count, dict(meta or {})), probs


def cmd_finetune(ctx: RunContext) -> dict:
    datasets = load_inputs(ctx)
    ds = datasets[0]
    enc = initial_encoder(ctx)
    meta = {"dataset": ds.name, "config_hash": ctx.config_hash}
    res, report, _ = train_eval(enc, ds, ctx.finetune, derive_seed(ctx.seed, "finetune"), meta)
    trainable = count_params(apply_freeze_policy(res.model, ctx.finetune.mode.value), trainable_only=True)
    rows = [rep.report_row(ds.name, report, ctx.config_hash, best_epoch=res.best_epoch, trainable_params=trainable)]
    if ctx.out is not None:
        ctx.write_config()
        save_checkpoint(res.model, ctx.path("best.ckpt"), {"config_hash": ctx.config_hash})
        write_ft_log(res.log, ctx.path("finetune_log.csv"))
        rep.emit_report(report, "json", ctx.path("report.json"))
        rep.emit_report(rows, "csv", ctx.path("report.csv"))
    return {"result": res, "report": report, "rows": rows, "trainable_params": trainable}


def _check_class_counts(datasets):
    counts = {d.class_count for d in datasets}
    if len(counts) != 1:
        raise ConfigError(f"datasets disagree on class count: {sorted(counts)}")


def pool(datasets, split: str):
    xs, ys = zip(*(d.split(split) for d in datasets))
    return np.concatenate(xs), np.concatenate(ys)


def cmd_msdft(ctx: RunContext) -> dict:
    """Train once on the pooled TRAIN/VAL of all datasets; test each dataset and the pool."""
    datasets = load_inputs(ctx)
    if len(datasets) < 2:
        return cmd_finetune(ctx)
    _check_class_counts(datasets)
    c = datasets[0].class_count
    enc = initial_encoder(ctx)
    seed = derive_seed(ctx.seed, "msdft")
    cfg = dataclasses.replace(ctx.finetune, seed=seed)
    model = attach_head(enc, c, cfg.strategy, seed=seed)
    res = finetune_run(model, pool(datasets, "train"), pool(datasets, "val"), cfg, {"config_hash": ctx.config_hash})
    reports, all_probs, all_labels = {}, [], []
    for d in datasets:
        x, y = _split(d, "test")
        p = predict_proba(res.model, x.astype(res.model.dtype))
        reports[d.name] = evaluate(p, y, c, {"test": d.name, "config_hash": ctx.config_hash})
        all_probs.append(p)
        all_labels.append(y)
    reports["All"] = evaluate(np.concatenate(all_probs), np.concatenate(all_labels), c,
                              {"test": "All", "config_hash": ctx.config_hash})
    rows = [rep.report_row(name, r, ctx.config_hash) for name, r in reports.items()]
    if ctx.out is not None:
        ctx.write_config()
        rep.emit_report(rows, "csv", ctx.path("msdft.csv"))
        rep.emit_report(reports, "json", ctx.path("msdft.json"))
        rep.emit_report(rep.metric_matrix(rows), "svg-heatmap", ctx.path("msdft_heatmap.svg"), title="MSDFT")
    return {"reports": reports, "rows": rows, "result": res}


def cmd_crosseval(ctx: RunContext) -> dict:
    """Fine-tune on each dataset and test on every other one."""
    datasets = load_inputs(ctx)
    if len(datasets) < 2:
        raise ConfigError("cross-evaluation needs at least two datasets")
    _check_class_counts(datasets)
    enc = initial_encoder(ctx)
    grid = {}
    for i, src in enumerate(datasets):
        seed = derive_seed(ctx.seed, "crosseval", i)
        cfg = dataclasses.replace(ctx.finetune, seed=seed)
        model = attach_head(enc, src.class_count, cfg.strategy, seed=seed)
        res = finetune_run(model, _split(src, "train"), _split(src, "val"), cfg)
        for j, dst in enumerate(datasets):
            if i == j:
                continue
            x, y = _split(dst, "test")
            p = predict_proba(res.model, x.astype(res.model.dtype))
            grid[(src.name, dst.name)] = evaluate(p, y, src.class_count,
                                                  {"train": src.name, "test": dst.name, "config_hash": ctx.config_hash})
    rows = [rep.report_row(f"{a}->{b}", r, ctx.config_hash, train=a, test=b) for (a, b), r in grid.items()]
    averages = {}
    for d in datasets:
        col = [r for (a, b), r in grid.items() if b == d.name]
        agg = aggregate_runs(col)
        averages[d.name] = {m: v["mean"] for m, v in agg.items()}
    avg_rows = [{"name": f"avg->{k}", **v, "config_hash": ctx.config_hash} for k, v in averages.items()]
    if ctx.out is not None:
        ctx.write_config()
        rep.emit_report(rows, "csv", ctx.path("crosseval.csv"))
        rep.emit_report(avg_rows, "csv", ctx.path("crosseval_averages.csv"))
        rep.emit_report({f"{a}->{b}": r for (a, b), r in grid.items()}, "json", ctx.path("crosseval.json"))
        rep.emit_report(rep.metric_matrix(rows), "svg-heatmap", ctx.path("crosseval_heatmap.svg"), title="Cross-evaluation")
    return {"grid": grid, "rows": rows, "averages": averages}


# ---------------------------------------------------------------------------
# few-shot
# ---------------------------------------------------------------------------


def fewshot_grid_values(train_labels, grid, class_count: int) -> list:
    """Grid values up to the first one that saturates the largest class."""
    sizes = np.bincount(np.asarray(train_labels), minlength=class_count)
    out = []
    for n in sorted(set(int(g) for g in grid)):
        if n < 1:
            raise ConfigError(f"few-shot sizes must be >= 1, got {n}")
        out.append(n)
        if n >= sizes.max():
            break
    if not out:
        raise ConfigError("few-shot grid is empty")
    return out


def fewshot(encoders: dict, ds: ImageDataset, grid, replicates: int, ft_cfg: FinetuneConfig, root_seed: int) -> dict:
    """Replicated few-shot fine-tuning for each named encoder.

    The same few-shot subsets (per n and replicate) are shared by every
    encoder so the comparison is paired.
    """
    if replicates < 1:
        raise ConfigError("replicates must be >= 1")
    x_tr, y_tr = _split(ds, "train")
    va, te = _split(ds, "val"), _split(ds, "test")
    c = ds.class_count
    values = fewshot_grid_values(y_tr, grid, c)
    cells = {}
    for n in values:
        for r in range(replicates):
            sub = few_shot_sample(y_tr, n, derive_seed(root_seed, f"fewshot-n{n}", r), c)
            seed = derive_seed(root_seed, "fewshot-head", r)
            cfg = dataclasses.replace(ft_cfg, seed=seed)
            for name, enc in encoders.items():
                model = attach_head(enc, c, cfg.strategy, seed=seed)
                res = finetune_run(model, (x_tr[sub.indices], y_tr[sub.indices]), va, cfg)
                p = predict_proba(res.model, te[0].astype(res.model.dtype))
                meta = {"encoder": name, "n": n, "replicate": r,
                        "saturated": sorted(k for k, v in sub.saturated.items() if v)}
                cells.setdefault((name, n), []).append(evaluate(p, te[1], c, meta))
    aggregates = {key: aggregate_runs(reps) for key, reps in cells.items()}
    ranks = {}
    for n in values:
        scored = []
        for name in encoders:
            q = aggregates[(name, n)]["qkappa"]["mean"]
            scored.append((-(q if q is not None else -math.inf), name))
        ranks[n] = [name for _, name in sorted(scored)]
    return {"grid": values, "cells": cells, "aggregates": aggregates, "ranks": ranks}


def cmd_fewshot(ctx: RunContext) -> dict:
    exp = ctx.experiment
    ds = load_inputs(ctx)[0]
    encoders = {"encoder": initial_encoder(ctx)}
    out = fewshot(encoders, ds, exp.fewshot_grid, exp.replicates, ctx.finetune, ctx.seed)
    rows = []
    for (name, n), agg in out["aggregates"].items():
        row = {"name": name, "n": n}
        for m, v in agg.items():
            row[f"{m}_mean"], row[f"{m}_sd"], row[f"{m}_sem"] = v["mean"], v["sd"], v["sem"]
        row["config_hash"] = ctx.config_hash
        rows.append(row)
    rank_rows = [{"n": n, "rank": " > ".join(r), "config_hash": ctx.config_hash} for n, r in out["ranks"].items()]
    if ctx.out is not None:
        ctx.write_config()
        rep.emit_report(rows, "csv", ctx.path("fewshot.csv"))
        rep.emit_report(rank_rows, "csv", ctx.path("fewshot_ranks.csv"))
        per_run = [rep.report_row(f"{k[0]}@{k[1]}#{i}", r, ctx.config_hash, n=k[1], replicate=i)
                   for k, reps in out["cells"].items() for i, r in enumerate(reps)]
        rep.emit_report(per_run, "csv", ctx.path("fewshot_runs.csv"))
    out["rows"] = rows
    return out


# ---------------------------------------------------------------------------
# catastrophic forgetting
# ---------------------------------------------------------------------------


def forgetting(source: ImageDataset, target_images, encoder: ViTModel, ssl_cfg: SSLConfig, k: int,
               knn: KnnConfig, seed: int, target_test: ImageDataset | None = None, pretrain_cfg: SSLConfig | None = None):
    """Forgetting study: source-domain kNN before and after target adaptation.

    ``encoder`` is pretrained on the source images (when ``pretrain_cfg``
    is given), then adapted to ``target_images`` both with every weight
    unfrozen and with ``k`` expanded blocks (BE_SSL). Each encoder is
    scored by kNN on held-out source data (train split as reference, test
    split as queries).
    """
    x_ref, y_ref = _split(source, "train")
    x_q, y_q = _split(source, "test")
    base = encoder
    if pretrain_cfg is not None and pretrain_cfg.epochs > 0:
        base, _, _ = pretrain(encoder, source.images, pretrain_cfg, "unfrozen", 0, derive_seed(seed, "pretrain-src"))
    unf, _, _ = pretrain(base, target_images, ssl_cfg, "unfrozen", 0, derive_seed(seed, "adapt"))
    be, _, audit = pretrain(base, target_images, ssl_cfg, "be_ssl", k, derive_seed(seed, "adapt"))
    encoders = {"pretrained": base, "unfrozen": unf, "be_ssl": be}
    scores = {}
    for name, enc in encoders.items():
        scores[name] = knn_eval(embed_dataset(enc, x_ref), y_ref, embed_dataset(enc, x_q), y_q, knn)
    rows = []
    for name in encoders:
        d = forgetting_delta(scores["pretrained"], scores[name])
        rows.append({"encoder": name, "top1": scores[name]["top1"], "top5": scores[name]["top5"],
                     "delta_top1": d["dtop1"], "delta_top5": d["dtop5"]})
    lda = {}
    if target_test is not None:
        xt, yt = _split(target_test, "test")
        for name, enc in encoders.items():
            lda[name] = (lda_project(embed_dataset(enc, xt), yt), yt)
    return {"rows": rows, "scores": scores, "audit": audit, "lda": lda, "encoders": encoders}


def cmd_forgetting(ctx: RunContext) -> dict:
    exp = ctx.experiment
    datasets = load_inputs(ctx)
    if len(datasets) < 2:
        raise ConfigError("forgetting needs a source and a target domain (two datasets)")
    src, tgt = datasets[0], datasets[1]
    pre = None if exp.checkpoint else ctx.ssl
    k = exp.expansion_k or 1
    out = forgetting(src, tgt.images, initial_encoder(ctx), ctx.ssl, k, KnnConfig(k=exp.knn_k),
                     ctx.seed, tgt, pre)
    for r in out["rows"]:
        r["config_hash"] = ctx.config_hash
    if ctx.out is not None:
        ctx.write_config()
        rep.emit_report(out["rows"], "csv", ctx.path("forgetting.csv"))
        rep.emit_report({"rows": out["rows"], "freeze_audit_passed": None if out["audit"] is None else out["audit"].passed},
                        "json", ctx.path("forgetting.json"))
        if out["lda"]:
            panels = [(name, lda, y) for name, (lda, y) in out["lda"].items()]
            rep.emit_report(panels, "svg-scatter", ctx.path("lda.svg"), title="LDA of target-domain embeddings")
    return out


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def cmd_ablate(ctx: RunContext) -> dict:
    exp = ctx.experiment
    axis = exp.sweep_axis
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    values = exp.sweep_values or DEFAULT_SWEEPS[axis]
    datasets = load_inputs(ctx)
    ds = datasets[0]
    base = initial_encoder(ctx)
    images = unlabeled_images(ctx, datasets)
    rows, reports = [], {}
    for v in values:
        ssl_cfg, ft_cfg, policy, k = ctx.ssl, ctx.finetune, FreezePolicy(exp.policy), exp.expansion_k
        if axis == "expansion_k":
            k = int(v)
            if k > base.depth:
                raise ConfigError(f"expansion_k {k} exceeds model depth {base.depth}")
            policy = FreezePolicy.BE_SSL if k > 0 else FreezePolicy.UNFROZEN
        elif axis == "grid_g":
            ssl_cfg = dataclasses.replace(ssl_cfg, grid_split=int(v))
        elif axis == "embedding_strategy":
            ft_cfg = dataclasses.replace(ft_cfg, strategy=EmbeddingStrategy(v))
        else:
            ft_cfg = dataclasses.replace(ft_cfg, loss=v)
        if policy is not FreezePolicy.BE_SSL:
            k = 0
        enc, _, _ = pretrain(base, images, ssl_cfg, policy, k, derive_seed(ctx.seed, "ssl"))
        enc = apply_freeze_policy(enc, "unfrozen")
        _, report, _ = train_eval(enc, ds, ft_cfg, derive_seed(ctx.seed, "finetune"), {axis: v})
        reports[str(v)] = report
        rows.append(rep.report_row(f"{axis}={v}", report, ctx.config_hash, **{axis: v}))
    if ctx.out is not None:
        ctx.write_config()
        rep.emit_report(rows, "csv", ctx.path(f"ablate_{axis}.csv"))
        rep.emit_report(reports, "json", ctx.path(f"ablate_{axis}.json"))
    return {"rows": rows, "reports": reports}


# ---------------------------------------------------------------------------
# probing
# ---------------------------------------------------------------------------


def linear_probe(encoder: ViTModel, ds: ImageDataset, ft_cfg: FinetuneConfig, seed: int, lrs=(1e-2, 1e-1, 1.0)) -> tuple:
    """Frozen-backbone probe; the learning rate is picked on validation qKappa.

    Returns ``(test report, chosen lr)``.
    """
    best = None
    for lr in lrs:
        cfg = dataclasses.replace(ft_cfg, mode="frozen_bb", lr=lr)
        res, report, _ = train_eval(encoder, ds, cfg, seed, {"lr": lr})
        val_q = next(r.report.qkappa for r in res.records if r.epoch == res.best_epoch)
        val_q = -math.inf if val_q is None else val_q
        if best is None or val_q > best[0]:
            best = (val_q, report, lr)
    return best[1], best[2]


__all__ = [
    "RunContext", "SWEEP_AXES", "load_inputs", "unlabeled_images", "initial_encoder", "pretrain", "train_eval",
    "pool", "fewshot_grid_values", "fewshot", "forgetting", "linear_probe", "cmd_pretrain", "cmd_finetune",
    "cmd_msdft", "cmd_crosseval", "cmd_fewshot", "cmd_forgetting", "cmd_ablate",
]
