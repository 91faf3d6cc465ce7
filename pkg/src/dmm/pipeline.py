"""End-to-end orchestration: train -> merge -> invert -> distill -> eval.

Stages communicate only through files, so any intermediate can be
deleted and replayed from the same config. Per-run randomness is derived
from the run seed with fixed offsets (dataset r, partition r+1, shared
init r+2, domain k training r+100+k, pseudo batch j r+500+j, holdout
r+599, distillation r+900), which keeps every artifact reproducible
byte for byte.

The report compares three models on the held-out test set: the naive
merge (offset averaging plus plain buffer averaging), the same
parameters with pooled buffers, and the full pipeline with distillation
from outlier teachers.
"""

from __future__ import annotations

import concurrent.futures
import os
import time

import numpy as np

from . import reports
from .config import PipelineConfig, dump_toml
from .data import (
    dirichlet_partition,
    load_dataset,
    make_blobs,
    make_patterns,
    save_dataset,
    split_by_plan,
)
from .distillation import DistillError, DistillJob, refine
from .inversion import InversionConfig, synthesize, save_pseudo_batch
from .merging import average_buffers, plan_and_merge, MergePlan
from .network import (
    TrainConfig,
    convnet_spec,
    evaluate,
    init_checkpoint,
    load_checkpoint,
    mlp_spec,
    per_class_accuracy,
    save_checkpoint,
    train,
)


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing pipeline artifact: {path}")
    return path


def build_dataset(cfg, run_seed):
    d = cfg.dataset
    if d.kind == "blobs":
        return make_blobs(d.classes, d.dim, d.n_per_class, d.spread, run_seed, d.test_per_class)
    return make_patterns(
        d.classes, d.channels, d.height, d.width, d.n_per_class, d.noise, run_seed, d.test_per_class
    )


def build_model_spec(cfg):
    d, m = cfg.dataset, cfg.model
    if d.kind == "blobs":
        return mlp_spec(d.dim, list(m.hidden), d.classes, m.input_batchnorm, m.hidden_batchnorm)
    return convnet_spec(
        (d.channels, d.height, d.width), list(m.conv_channels), m.kernel, d.classes, m.pool,
        m.input_batchnorm,
    )


def stage_partition(cfg, run_seed, out_dir):
    """Generate data, hold out a pretrain split if configured, partition."""
    os.makedirs(out_dir, exist_ok=True)
    train_ds, test_ds = build_dataset(cfg, run_seed)
    save_dataset(test_ds, os.path.join(out_dir, "test.dmmd"))

    if cfg.pretrain_fraction > 0:
        rng = np.random.Generator(np.random.Philox(key=[run_seed + 3, 0xBA5E]))
        perm = rng.permutation(len(train_ds))
        cut = int(round(cfg.pretrain_fraction * len(train_ds)))
        pretrain = train_ds.subset(perm[:cut])
        remainder = train_ds.subset(perm[cut:])
        save_dataset(pretrain, os.path.join(out_dir, "pretrain.dmmd"))
    else:
        remainder = train_ds
    save_dataset(remainder, os.path.join(out_dir, "train.dmmd"))

    plan = dirichlet_partition(remainder, cfg.partition.domains, cfg.partition.alpha,
                               run_seed + 1, cfg.min_size())
    for k, part in enumerate(split_by_plan(remainder, plan)):
        save_dataset(part, os.path.join(out_dir, f"domain_{k:02d}.dmmd"))
    reports.write_json(os.path.join(out_dir, "partition.json"), plan.to_json_dict())
    return plan


def _train_one_domain(args):
    out_dir, k, run_seed, train_cfg_fields = args
    ds, _ = load_dataset(_require(os.path.join(out_dir, f"domain_{k:02d}.dmmd")))
    w0 = load_checkpoint(_require(os.path.join(out_dir, "w0.dmmc")))
    cfg = TrainConfig(**train_cfg_fields, seed=run_seed + 100 + k)
    ckpt = train(w0, ds, cfg)
    save_checkpoint(ckpt, os.path.join(out_dir, f"domain_{k:02d}.dmmc"))
    return k


def stage_train(cfg, run_seed, out_dir, domains=None, jobs=None):
    """Initialize (or pretrain) the shared model, then fine-tune per domain."""
    spec = build_model_spec(cfg)
    w0 = init_checkpoint(spec, run_seed + 2)
    pretrain_path = os.path.join(out_dir, "pretrain.dmmd")
    if cfg.pretrain_fraction > 0:
        ds, _ = load_dataset(_require(pretrain_path))
        epochs = cfg.pretrain_epochs if cfg.pretrain_epochs > 0 else cfg.train.epochs
        w0 = train(w0, ds, TrainConfig(cfg.train.lr, cfg.train.batch_size, epochs,
                                       seed=run_seed + 2, ema_momentum=cfg.train.ema_momentum))
    save_checkpoint(w0, os.path.join(out_dir, "w0.dmmc"))

    if domains is None:
        domains = list(range(cfg.partition.domains))
    train_fields = {
        "lr": cfg.train.lr, "batch_size": cfg.train.batch_size,
        "epochs": cfg.train.epochs, "ema_momentum": cfg.train.ema_momentum,
    }
    jobs = jobs if jobs is not None else cfg.jobs
    tasks = [(out_dir, k, run_seed, train_fields) for k in sorted(domains)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_train_one_domain, tasks))
    else:
        for t in tasks:
            _train_one_domain(t)


def _load_domain_models(cfg, out_dir):
    models = []
    for k in range(cfg.partition.domains):
        models.append(load_checkpoint(_require(os.path.join(out_dir, f"domain_{k:02d}.dmmc"))))
    return models


def stage_merge(cfg, out_dir):
    """Write merged.dmmc (pooled buffers), naive.dmmc, and the plan JSON."""
    base = load_checkpoint(_require(os.path.join(out_dir, "w0.dmmc")))
    models = _load_domain_models(cfg, out_dir)
    mode, tau = cfg.merge.threshold_args()
    merged, plan = plan_and_merge(
        models, base, scheme=cfg.merge.scheme, lam=cfg.merge.lam,
        threshold_mode=mode, tau=tau, exclude_outliers=cfg.merge.exclude_outliers,
    )
    save_checkpoint(merged, os.path.join(out_dir, "merged.dmmc"))

    naive = merged.copy()
    naive.buffers = average_buffers(models, plan.alphas)
    naive.meta = {"baseline": "naive-buffer-average", "alphas": plan.alphas}
    save_checkpoint(naive, os.path.join(out_dir, "naive.dmmc"))
    reports.write_json(os.path.join(out_dir, "merge_plan.json"), plan.to_json_dict())
    return merged, plan


def stage_invert(cfg, run_seed, out_dir):
    """Synthesize pseudo batches plus one held-out batch from merged buffers."""
    merged = load_checkpoint(_require(os.path.join(out_dir, "merged.dmmc")))
    inv = cfg.inversion
    batches = []
    for j in range(cfg.pseudo_batches):
        c = InversionConfig(
            batch_size=inv.batch_size, steps=inv.steps, lr=inv.lr, init=inv.init,
            sigma_init=inv.sigma_init, layer_weights=inv.layer_weights,
            l2_input=inv.l2_input, total_variation=inv.total_variation,
            clamp=inv.clamp, squared=inv.squared, seed=run_seed + 500 + j,
        )
        batch = synthesize(merged, c)
        save_pseudo_batch(batch, os.path.join(out_dir, f"pseudo_{j:02d}.dmmd"),
                          merged.spec.class_count)
        batches.append(batch)
    hold_cfg = InversionConfig(
        batch_size=inv.batch_size, steps=inv.steps, lr=inv.lr, init=inv.init,
        sigma_init=inv.sigma_init, layer_weights=inv.layer_weights,
        l2_input=inv.l2_input, total_variation=inv.total_variation,
        clamp=inv.clamp, squared=inv.squared, seed=run_seed + 599,
    )
    holdout = synthesize(merged, hold_cfg)
    save_pseudo_batch(holdout, os.path.join(out_dir, "pseudo_holdout.dmmd"),
                      merged.spec.class_count)
    return batches, holdout


def stage_distill(cfg, run_seed, out_dir):
    """Refine the merged model against outlier teachers; no-op without them."""
    merged = load_checkpoint(_require(os.path.join(out_dir, "merged.dmmc")))
    plan = reports.read_json(_require(os.path.join(out_dir, "merge_plan.json")))
    outliers = plan["outliers"]
    if not outliers:
        save_checkpoint(merged, os.path.join(out_dir, "refined.dmmc"))
        report = {"skipped": True, "reason": "no outlier teachers", "teachers": 0}
        reports.write_json(os.path.join(out_dir, "distill_report.json"), report)
        return merged, report
    teachers = [load_checkpoint(_require(os.path.join(out_dir, f"domain_{k:02d}.dmmc")))
                for k in outliers]
    pseudo = []
    for j in range(cfg.pseudo_batches):
        ds, _ = load_dataset(_require(os.path.join(out_dir, f"pseudo_{j:02d}.dmmd")))
        pseudo.append(ds)
    holdout, _ = load_dataset(_require(os.path.join(out_dir, "pseudo_holdout.dmmd")))
    job = DistillJob(
        student=merged, teachers=teachers, pseudo=pseudo,
        steps=cfg.distill.steps, lr=cfg.distill.lr, temperature=cfg.distill.temperature,
        batch_size=cfg.distill.batch_size, seed=run_seed + 900,
        filter_config=cfg.distill.filter_config(),
    )
    try:
        refined, report = refine(job, holdout=holdout)
        report["skipped"] = False
    except DistillError as exc:
        # nothing passed the confidence/entropy filter: the merged model
        # already covers what the teachers know, keep it unchanged
        refined = merged
        report = {"skipped": True, "reason": str(exc), "teachers": len(teachers)}
    report["teacher_ids"] = [int(k) for k in outliers]
    report["tau_scores"] = plan["tau_scores"]
    save_checkpoint(refined, os.path.join(out_dir, "refined.dmmc"))
    reports.write_json(os.path.join(out_dir, "distill_report.json"), report)
    return refined, report


def evaluate_checkpoint(ckpt_path, dataset_path):
    """Accuracy plus per-class breakdown for a checkpoint/dataset pair."""
    ckpt = load_checkpoint(_require(ckpt_path))
    ds, _ = load_dataset(_require(dataset_path))
    acc = evaluate(ckpt, ds)
    per_class = per_class_accuracy(ckpt, ds)
    return {
        "accuracy": reports.round_acc(acc),
        "per_class": [reports.round_acc(a) if np.isfinite(a) else None for a in per_class],
        "n_samples": len(ds),
    }


def run_single(cfg, run_seed, out_dir, config_text=None):
    """One full pipeline run; returns the report dict (also written to disk)."""
    os.makedirs(out_dir, exist_ok=True)
    timings = {}

    def timed(name, fn, *args):
        t0 = time.perf_counter()
        result = fn(*args)
        timings[name] = round(time.perf_counter() - t0, 3)
        return result

    timed("partition", stage_partition, cfg, run_seed, out_dir)
    timed("train", stage_train, cfg, run_seed, out_dir)
    timed("merge", stage_merge, cfg, out_dir)
    timed("invert", stage_invert, cfg, run_seed, out_dir)
    _, distill_report = timed("distill", stage_distill, cfg, run_seed, out_dir)

    test_path = os.path.join(out_dir, "test.dmmd")
    test_ds, _ = load_dataset(_require(test_path))
    domain_accs, domain_per_class = [], []
    for k in range(cfg.partition.domains):
        ckpt = load_checkpoint(os.path.join(out_dir, f"domain_{k:02d}.dmmc"))
        domain_accs.append(reports.round_acc(evaluate(ckpt, test_ds)))

    naive = load_checkpoint(os.path.join(out_dir, "naive.dmmc"))
    merged = load_checkpoint(os.path.join(out_dir, "merged.dmmc"))
    refined = load_checkpoint(os.path.join(out_dir, "refined.dmmc"))
    naive_acc = evaluate(naive, test_ds)
    merged_acc = evaluate(merged, test_ds)
    dmm_acc = evaluate(refined, test_ds)
    naive_pc = per_class_accuracy(naive, test_ds)
    dmm_pc = per_class_accuracy(refined, test_ds)

    plan = reports.read_json(os.path.join(out_dir, "merge_plan.json"))
    report = {
        "schema_version": reports.REPORT_SCHEMA_VERSION,
        "seed": int(run_seed),
        "config_hash": reports.config_fingerprint(config_text if config_text is not None else dump_toml(cfg)),
        "accuracy": {
            "domains": domain_accs,
            "naive": reports.round_acc(naive_acc),
            "merged_buffers": reports.round_acc(merged_acc),
            "dmm": reports.round_acc(dmm_acc),
        },
        "per_class": {
            "naive": [reports.round_acc(a) for a in naive_pc],
            "dmm": [reports.round_acc(a) for a in dmm_pc],
        },
        "merge_plan": plan,
        "distill": distill_report,
        "paths": {
            "test": test_path,
            "naive": os.path.join(out_dir, "naive.dmmc"),
            "merged": os.path.join(out_dir, "merged.dmmc"),
            "refined": os.path.join(out_dir, "refined.dmmc"),
        },
        "timings": timings,
    }
    reports.write_json(os.path.join(out_dir, "report.json"), report)
    return report


def run_pipeline(cfg, out_dir, config_text=None):
    """All configured seeds; writes per-seed reports plus summary.json."""
    os.makedirs(out_dir, exist_ok=True)
    per_seed = []
    for r in cfg.seeds:
        seed_dir = os.path.join(out_dir, f"seed_{r:03d}")
        per_seed.append(run_single(cfg, r, seed_dir, config_text))
    gaps = [rep["accuracy"]["dmm"] - rep["accuracy"]["naive"] for rep in per_seed]
    summary = {
        "schema_version": reports.REPORT_SCHEMA_VERSION,
        "seeds": [int(r) for r in cfg.seeds],
        "alpha": cfg.partition.alpha,
        "mean_accuracy": {
            "naive": reports.round_acc(np.mean([r["accuracy"]["naive"] for r in per_seed])),
            "merged_buffers": reports.round_acc(np.mean([r["accuracy"]["merged_buffers"] for r in per_seed])),
            "dmm": reports.round_acc(np.mean([r["accuracy"]["dmm"] for r in per_seed])),
        },
        "dmm_minus_naive": [reports.round_acc(g) for g in gaps],
        "reports": [f"seed_{r:03d}/report.json" for r in cfg.seeds],
    }
    reports.write_json(os.path.join(out_dir, "summary.json"), summary)
    return per_seed, summary
