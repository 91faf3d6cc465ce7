"""Confidence-filtered knowledge distillation from divergent teachers.

Outlier models flagged by the merge stage act as frozen teachers. On
synthetic inputs only, the merged student matches each teacher's softmax
output where that teacher is confident and the student is not -- the
regions holding knowledge the parameter merge lost. Student normalization
runs in eval mode throughout: the pooled buffers are the global-statistics
artifact and must survive refinement untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .network import _forward_graph, predict_proba
from .tensor import Tensor


class DistillError(RuntimeError):
    pass


@dataclass
class FilterConfig:
    teacher_conf_min: float = 0.8     # keep if max teacher prob >= this
    student_entropy_min: float = 0.5  # ... and student entropy >= this fraction of ln C
    min_kept: int = 8

    def __post_init__(self):
        if not 0.0 < self.teacher_conf_min < 1.0:
            raise ValueError("teacher_conf_min must lie in (0, 1)")
        if not 0.0 <= self.student_entropy_min <= 1.0:
            raise ValueError("student_entropy_min must lie in [0, 1]")


class FilterResult(NamedTuple):
    mask: np.ndarray
    relaxed: bool


@dataclass
class DistillJob:
    student: object                  # merged Checkpoint
    teachers: list                   # outlier Checkpoints
    pseudo: list                     # PseudoBatch list (or anything with .inputs)
    steps: int = 100
    lr: float = 0.005
    temperature: float = 1.0
    batch_size: int = 64
    seed: int = 0
    filter_config: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        if not self.teachers:
            raise ValueError("distillation needs at least one teacher")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def _validate_probs(p, what):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValueError(f"{what} must be [B, C] with C >= 2, got {p.shape}")
    if np.any(p < -1e-9):
        raise ValueError(f"{what} contains negative entries")
    gap = np.abs(p.sum(axis=1) - 1.0)
    if gap.max() > 1e-5:
        raise ValueError(f"{what} rows must sum to 1 (max deviation {gap.max():.2e})")
    return p


def entropy(p):
    """Row-wise Shannon entropy with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def kd_loss(teacher_probs, student_logits, temperature=1.0):
    """Mean KL(teacher || student) with temperature-T student softmax.

    teacher_probs are plain probabilities (soften them with the same T
    upstream if desired); returns a scalar Tensor, never negative.
    """
    p_t = _validate_probs(teacher_probs, "teacher rows")
    if student_logits.shape != p_t.shape:
        raise T.ShapeError(
            f"student logits {student_logits.shape} do not match teacher probs {p_t.shape}"
        )
    b = p_t.shape[0]
    ls = T.log_softmax(T.scale(student_logits, 1.0 / float(temperature)))
    cross = T.scale(T.tsum(T.mul(Tensor(p_t.astype(ls.data.dtype)), ls)), -1.0 / b)
    plogp = float(-entropy(p_t).mean())
    # clamp at zero: exact KL is non-negative, only float noise dips below
    return T.relu(T.add(Tensor(np.asarray(plogp, dtype=ls.data.dtype)), cross))


def mean_kl(teacher_probs, student_probs):
    """Numpy-side mean KL(teacher || student) for reports and oracles."""
    p_t = _validate_probs(teacher_probs, "teacher rows")
    p_s = _validate_probs(student_probs, "student rows")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_t > 0, p_t * (np.log(p_t) - np.log(p_s)), 0.0)
    return float(terms.sum(axis=1).mean())


def filter_samples(teacher_probs, student_probs, cfg):
    """Keep samples with a confident teacher and an uncertain student.

    If fewer than cfg.min_kept survive, falls back to the top candidates
    ranked by teacher confidence minus the student's normalized entropy
    deficit; the relaxation is flagged in the result.
    """
    p_t = _validate_probs(teacher_probs, "teacher rows")
    p_s = _validate_probs(student_probs, "student rows")
    log_c = np.log(p_t.shape[1])
    conf = p_t.max(axis=1)
    h_s = entropy(p_s)
    mask = (conf >= cfg.teacher_conf_min) & (h_s >= cfg.student_entropy_min * log_c)
    if mask.sum() >= cfg.min_kept:
        return FilterResult(mask, False)
    take = min(cfg.min_kept, len(conf))
    if take == 0:
        return FilterResult(np.zeros(len(conf), dtype=bool), True)
    deficit = np.maximum(0.0, cfg.student_entropy_min * log_c - h_s) / log_c
    order = np.argsort(-(conf - deficit), kind="stable")
    relaxed = np.zeros(len(conf), dtype=bool)
    relaxed[order[:take]] = True
    return FilterResult(relaxed, True)


def _pseudo_inputs(pseudo):
    chunks = [np.asarray(p.inputs, dtype=np.float32) for p in pseudo]
    return np.concatenate(chunks) if len(chunks) > 1 else chunks[0]


def refine(job, holdout=None):
    """Distill the filtered union into the student; returns (ckpt, report).

    Every kept sample carries its own teacher; a step's loss is the
    kept-count-weighted mean of per-teacher KL terms. Teachers and student
    buffers are frozen. ``holdout`` (optional inputs array or PseudoBatch)
    feeds the pre/post KL numbers in the report.
    """
    student = job.student.copy()
    for t in job.teachers:
        if t.spec != student.spec:
            raise DistillError("teacher and student specs differ")
    inputs = _pseudo_inputs(job.pseudo)
    student_probs = predict_proba(student, inputs)

    soft_targets, sample_owner, kept_counts, relaxed_flags = [], [], [], []
    union_idx = []
    for t_id, teacher in enumerate(job.teachers):
        t_probs = predict_proba(teacher, inputs)
        result = filter_samples(t_probs, student_probs, job.filter_config)
        kept = np.flatnonzero(result.mask)
        kept_counts.append(int(kept.size))
        relaxed_flags.append(bool(result.relaxed))
        soft = predict_proba(teacher, inputs, temperature=job.temperature)
        soft_targets.append(soft)
        union_idx.extend(kept.tolist())
        sample_owner.extend([t_id] * kept.size)
    if not union_idx:
        raise DistillError("no transferable samples after filtering")
    union_idx = np.asarray(union_idx)
    sample_owner = np.asarray(sample_owner)

    holdout_inputs = None
    if holdout is not None:
        holdout_inputs = np.asarray(getattr(holdout, "inputs", holdout), dtype=np.float32)

    def holdout_kl(ckpt):
        if holdout_inputs is None:
            return None
        p_s = predict_proba(ckpt, holdout_inputs)
        kls = [mean_kl(predict_proba(t, holdout_inputs), p_s) for t in job.teachers]
        return float(np.mean(kls))

    pre_kl = holdout_kl(student)

    n_union = len(union_idx)
    for step in range(job.steps):
        rng = np.random.Generator(np.random.Philox(key=[job.seed, step]))
        take = min(job.batch_size, n_union)
        chosen = rng.choice(n_union, size=take, replace=False)
        params_t = {k: Tensor(v, requires_grad=True) for k, v in student.params.items()}
        total = None
        for t_id in np.unique(sample_owner[chosen]):
            rows = chosen[sample_owner[chosen] == t_id]
            x = Tensor(inputs[union_idx[rows]])
            logits, _ = _forward_graph(student.spec, params_t, student.buffers, x, "eval")
            term = T.scale(
                kd_loss(soft_targets[t_id][union_idx[rows]], logits, job.temperature),
                len(rows) / take,
            )
            total = term if total is None else T.add(total, term)
        T.backward(total)
        for k, t in params_t.items():
            student.params[k] = student.params[k] - job.lr * t.grad

    report = {
        "teachers": len(job.teachers),
        "kept_counts": kept_counts,
        "total_pseudo": int(len(inputs)),
        "relaxed": relaxed_flags,
        "steps": job.steps,
        "lr": job.lr,
        "temperature": job.temperature,
        "pre_kl": pre_kl,
        "post_kl": holdout_kl(student),
    }
    return student, report
