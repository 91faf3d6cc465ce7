"""Merging fine-tuned models: offset arithmetic, buffer pooling, divergence.

The merged model is the shared initialization plus a weighted sum of
per-model parameter offsets. Normalization buffers are pooled as exact
global moments: when each model's buffers are the true moments of its
own data, the pooled buffers are the true moments of the union.

Each model also receives a divergence score combining (i) mean
neuron-wise direction dissimilarity of its offset against the merged
offset and (ii) a per-channel Gaussian 2-Wasserstein distance between
its buffers and the pooled ones. High scorers are flagged as outliers
and later reintegrated through distillation rather than discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import BufferStats, Checkpoint, pooled_moments

EPS = 1e-5


class MergeError(ValueError):
    pass


def _check_aligned(a, b, what="checkpoints"):
    if a.spec != b.spec:
        raise MergeError(f"{what} have different model specs")
    if set(a.params) != set(b.params):
        raise MergeError(f"{what} have different parameter sets")


def compute_offset(model, base):
    """Per-array parameter offset, fine-tuned minus initialization.

    Held in float64, where differences of float32 values are exact, so
    base + offset reproduces the fine-tuned parameters bit-exactly.
    """
    _check_aligned(model, base)
    return {
        k: model.params[k].astype(np.float64) - base.params[k].astype(np.float64)
        for k in model.params
    }


def apply_offset(base, offset, alpha=1.0):
    return {
        k: (base.params[k].astype(np.float64) + alpha * offset[k]).astype(np.float32)
        for k in base.params
    }


@dataclass
class MergePlan:
    alphas: list
    scheme: str = "uniform"                 # uniform | datasize | explicit
    lam: float = 0.5                        # parameter/buffer mix in the divergence score
    tau_scores: list = field(default_factory=list)
    tau_threshold: float = None
    threshold_mode: str = "mean_plus_std"   # or "absolute"
    outliers: list = field(default_factory=list)
    exclude_outliers: bool = False
    relaxed: bool = False

    def to_json_dict(self):
        return {
            "alphas": [float(a) for a in self.alphas],
            "scheme": self.scheme,
            "lambda": self.lam,
            "tau_scores": [float(t) for t in self.tau_scores],
            "tau_threshold": None if self.tau_threshold is None else float(self.tau_threshold),
            "threshold_mode": self.threshold_mode,
            "outliers": [int(k) for k in self.outliers],
            "exclude_outliers": self.exclude_outliers,
        }


def make_alphas(scheme, models, explicit=None):
    """Per-model merge coefficients: uniform, data-size proportional, or given."""
    k = len(models)
    if scheme == "uniform":
        return [1.0 / k] * k
    if scheme == "datasize":
        sizes = [float(m.meta.get("n_samples", 0)) for m in models]
        total = sum(sizes)
        if total <= 0:
            raise MergeError("datasize scheme needs n_samples metadata on every checkpoint")
        return [s / total for s in sizes]
    if scheme == "explicit":
        if explicit is None or len(explicit) != k:
            raise MergeError(f"explicit scheme needs {k} coefficients")
        return [float(a) for a in explicit]
    raise MergeError(f"unknown coefficient scheme {scheme!r}")


def merge_parameters(base, offsets, alphas):
    """base + sum_k alpha_k * offset_k; buffers left unset.

    Accumulates in float64 so coefficient scaling is linear to float32
    rounding.
    """
    if len(offsets) != len(alphas):
        raise MergeError(f"{len(offsets)} offsets but {len(alphas)} coefficients")
    params = {}
    for key, value in base.params.items():
        acc = value.astype(np.float64)
        for alpha, off in zip(alphas, offsets):
            if set(off) != set(base.params):
                raise MergeError("offset key set does not match base parameters")
            acc = acc + float(alpha) * np.asarray(off[key], dtype=np.float64)
        arr = acc.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise MergeError(f"merged parameter {key} contains non-finite values")
        params[key] = arr
    meta = {"merged_from": len(offsets), "alphas": [float(a) for a in alphas]}
    return Checkpoint(base.spec, params, None, meta)


def merge_buffers(stats_list):
    """Pool per-model buffers of one layer into global moments.

    N = sum n_k, mu = sum(n_k mu_k)/N, and the pooled variance adds each
    model's internal variance to its squared offset from the pooled mean.
    """
    if not stats_list:
        raise MergeError("no buffer statistics to merge")
    channels = {len(s.mean) for s in stats_list}
    if len(channels) != 1:
        raise MergeError(f"channel counts differ across models: {sorted(channels)}")
    if any(s.count <= 0 for s in stats_list):
        raise MergeError("every model must have a positive tracked count")
    mean, var, count = pooled_moments(
        [s.mean for s in stats_list],
        [s.var for s in stats_list],
        [s.count for s in stats_list],
    )
    return BufferStats(mean.astype(np.float32), var.astype(np.float32), count)


def merge_checkpoint_buffers(models):
    """Pooled buffers for every batchnorm layer across the given models."""
    merged = {}
    for layer in models[0].spec.batchnorm_layers():
        merged[layer] = merge_buffers([m.require_buffers()[layer] for m in models])
    return merged


def average_buffers(models, alphas):
    """Coefficient-weighted plain average of buffers (the naive baseline).

    Unlike merge_buffers this ignores the between-model mean spread, so
    it understates global variance on heterogeneous domains.
    """
    total = sum(alphas)
    weights = [a / total for a in alphas]
    out = {}
    for layer in models[0].spec.batchnorm_layers():
        stats = [m.require_buffers()[layer] for m in models]
        mean = sum(w * s.mean.astype(np.float64) for w, s in zip(weights, stats))
        var = sum(w * s.var.astype(np.float64) for w, s in zip(weights, stats))
        count = int(round(sum(s.count for s in stats)))
        out[layer] = BufferStats(mean.astype(np.float32), var.astype(np.float32), count)
    return out


# ---------------------------------------------------------------------------
# divergence scoring and outliers
# ---------------------------------------------------------------------------


def _neuron_rows(spec, offset):
    """Offset rows per output neuron for every dense/conv weight matrix."""
    rows = []
    for i, layer in enumerate(spec.layers):
        kind = layer["kind"]
        if kind in ("dense", "softmax_head"):
            rows.append(offset[f"{i:03d}.weight"].T)  # [out, in]
        elif kind == "conv2d":
            w = offset[f"{i:03d}.weight"]
            rows.append(w.reshape(w.shape[0], -1))
    return rows


def parameter_dissimilarity(spec, offset_k, offset_m):
    """Mean over output neurons of 1 - cos(offset row, merged-offset row).

    Rows where either side has vanishing norm contribute zero (untouched
    or freshly initialized neurons carry no direction information).
    """
    dissims = []
    for rk, rm in zip(_neuron_rows(spec, offset_k), _neuron_rows(spec, offset_m)):
        nk = np.linalg.norm(rk.astype(np.float64), axis=1)
        nm = np.linalg.norm(rm.astype(np.float64), axis=1)
        dot = (rk.astype(np.float64) * rm.astype(np.float64)).sum(axis=1)
        valid = (nk >= 1e-12) & (nm >= 1e-12)
        d = np.zeros(len(rk))
        d[valid] = 1.0 - dot[valid] / (nk[valid] * nm[valid])
        dissims.append(d)
    return float(np.concatenate(dissims).mean())


def buffer_heterogeneity(model_buffers, merged_buffers, layers):
    """Mean over BN channels of W2^2(N(mu_k, s_k^2), N(mu, s^2)) / (s^2 + eps).

    W2^2 between Gaussians is (mu_k - mu)^2 + (sd_k - sd)^2; scaling by
    the pooled variance makes the score unit-free per channel.
    """
    per_channel = []
    for layer in layers:
        sk = model_buffers[layer]
        sm = merged_buffers[layer]
        sd_k = np.sqrt(sk.var.astype(np.float64))
        sd_m = np.sqrt(sm.var.astype(np.float64))
        w2 = np.square(sk.mean.astype(np.float64) - sm.mean.astype(np.float64)) + np.square(sd_k - sd_m)
        per_channel.append(w2 / (sm.var.astype(np.float64) + EPS))
    return float(np.concatenate(per_channel).mean())


def divergence_score(model, base, merged, merged_buffers, lam=0.5):
    """lam * parameter dissimilarity + (1 - lam) * buffer heterogeneity."""
    if not 0.0 <= lam <= 1.0:
        raise MergeError(f"lambda must lie in [0, 1], got {lam}")
    _check_aligned(model, merged)
    _check_aligned(model, base)
    d_param = parameter_dissimilarity(
        model.spec, compute_offset(model, base), compute_offset(merged, base)
    )
    layers = model.spec.batchnorm_layers()
    d_buf = buffer_heterogeneity(model.require_buffers(), merged_buffers, layers)
    return lam * d_param + (1.0 - lam) * d_buf


def select_outliers(tau_scores, threshold_mode="mean_plus_std", tau=None):
    """Indices with tau above the threshold.

    absolute mode uses the given tau; mean_plus_std sets the threshold to
    mean + population std, which yields the empty set when all scores tie.
    """
    scores = np.asarray(tau_scores, dtype=np.float64)
    if scores.size == 0:
        raise MergeError("need at least one divergence score")
    if threshold_mode == "absolute":
        if tau is None:
            raise MergeError("absolute mode needs an explicit tau")
        threshold = float(tau)
    elif threshold_mode == "mean_plus_std":
        threshold = float(scores.mean() + scores.std())
    else:
        raise MergeError(f"unknown threshold mode {threshold_mode!r}")
    return [int(k) for k in np.flatnonzero(scores > threshold)], threshold


def plan_and_merge(models, base, scheme="uniform", lam=0.5, threshold_mode="mean_plus_std",
                   tau=None, exclude_outliers=False, explicit_alphas=None):
    """Full merge stage: coefficients, parameters, pooled buffers, scores.

    Outliers stay in the parameter merge by default and are handed to the
    distillation stage; with exclude_outliers they are dropped from the
    sum and the remaining coefficients renormalized.
    """
    if not models:
        raise MergeError("no models to merge")
    for m in models:
        _check_aligned(m, base)
    if not base.spec.batchnorm_layers():
        raise MergeError("merge pipeline requires at least one batchnorm layer")
    alphas = make_alphas(scheme, models, explicit_alphas)
    offsets = [compute_offset(m, base) for m in models]
    merged = merge_parameters(base, offsets, alphas)
    merged_buffers = merge_checkpoint_buffers(models)
    scores = [divergence_score(m, base, merged, merged_buffers, lam) for m in models]
    outliers, threshold = select_outliers(scores, threshold_mode, tau)
    if exclude_outliers and outliers and len(outliers) < len(models):
        kept = [k for k in range(len(models)) if k not in outliers]
        kept_alpha = sum(alphas[k] for k in kept)
        re_alphas = [alphas[k] / kept_alpha for k in kept]
        merged = merge_parameters(base, [offsets[k] for k in kept], re_alphas)
        merged_buffers = merge_checkpoint_buffers([models[k] for k in kept])
    merged.buffers = merged_buffers
    plan = MergePlan(
        alphas=alphas,
        scheme=scheme,
        lam=lam,
        tau_scores=scores,
        tau_threshold=threshold,
        threshold_mode=threshold_mode,
        outliers=outliers,
        exclude_outliers=exclude_outliers,
    )
    merged.meta["tau_scores"] = [float(s) for s in scores]
    merged.meta["outliers"] = [int(k) for k in outliers]
    return merged, plan
