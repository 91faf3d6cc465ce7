"""Pseudo-data synthesis by inverting normalization statistics.

Starting from noise, inputs are optimized so the per-layer batch
statistics they induce match the merged model's buffers. The forward
pass normalizes with the batch's own statistics so the objective is
differentiable all the way down to the pixels/features. Works with any
checkpoint that carries buffers; no real data is touched.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import serialization as ser
from . import tensor as T
from .data import Dataset, save_dataset
from .network import collect_batch_norm_stats
from .tensor import Tensor


class InversionError(RuntimeError):
    pass


@dataclass
class InversionConfig:
    batch_size: int = 128
    steps: int = 200
    lr: float = 0.1
    init: str = "gaussian"        # gaussian | uniform
    sigma_init: float = 1.0
    layer_weights: list = None    # one scalar per batchnorm layer; None = all 1
    l2_input: float = 0.0
    total_variation: float = 0.0
    clamp: float = 5.0
    squared: bool = True          # False: literal unsquared norms
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.l2_input < 0 or self.total_variation < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.init not in ("gaussian", "uniform"):
            raise ValueError(f"unknown init {self.init!r}")

    def to_json_dict(self):
        return {
            "batch_size": self.batch_size,
            "steps": self.steps,
            "lr": self.lr,
            "init": self.init,
            "sigma_init": self.sigma_init,
            "layer_weights": self.layer_weights,
            "l2_input": self.l2_input,
            "total_variation": self.total_variation,
            "clamp": self.clamp,
            "squared": self.squared,
            "seed": self.seed,
        }


@dataclass
class PseudoBatch:
    inputs: np.ndarray                  # float32 [B, input-shape]
    final_loss: float
    per_layer_residuals: list           # [(mean abs mu residual, mean abs var residual)]
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.inputs)


def _layer_weights(cfg_weights, bn_layers):
    if cfg_weights is None:
        return [1.0] * len(bn_layers)
    if len(cfg_weights) != len(bn_layers):
        raise InversionError(
            f"{len(cfg_weights)} layer weights for {len(bn_layers)} batchnorm layers"
        )
    if any(w < 0 for w in cfg_weights):
        raise InversionError("layer weights must be >= 0")
    return [float(w) for w in cfg_weights]


def inversion_loss(x, ckpt, layer_weights=None, squared=True, l2_input=0.0, total_variation=0.0):
    """Statistic-matching loss plus optional input regularizers.

    Per batchnorm layer l with pooled targets (mu_l, var_l) and batch
    statistics (mu_l(x), var_l(x)):

        squared:   w_l * (||mu_l(x) - mu_l||^2 + ||var_l(x) - var_l||^2)
        unsquared: w_l * (||mu_l(x) - mu_l||   + ||var_l(x) - var_l||)

    Returns (loss Tensor, residuals) where residuals[l] is the pair of
    mean absolute deviations for that layer.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    buffers = ckpt.require_buffers()
    bn_layers = ckpt.spec.batchnorm_layers()
    if not bn_layers:
        raise InversionError("model has no batchnorm layers to invert")
    weights = _layer_weights(layer_weights, bn_layers)
    _, stats = collect_batch_norm_stats(ckpt, x)
    loss = None
    residuals = []
    for (layer, mean_t, var_t), w in zip(stats, weights):
        target_mean = Tensor(buffers[layer].mean)
        target_var = Tensor(buffers[layer].var)
        mu_gap = T.sub(mean_t, target_mean)
        var_gap = T.sub(var_t, target_var)
        mu_term = T.tsum(T.square(mu_gap))
        var_term = T.tsum(T.square(var_gap))
        if not squared:
            # literal Euclidean norms; tiny shift keeps sqrt differentiable
            mu_term = T.sqrt(mu_term, eps=1e-12)
            var_term = T.sqrt(var_term, eps=1e-12)
        term = T.scale(T.add(mu_term, var_term), w)
        loss = term if loss is None else T.add(loss, term)
        residuals.append((
            float(np.abs(mean_t.data - buffers[layer].mean).mean()),
            float(np.abs(var_t.data - buffers[layer].var).mean()),
        ))
    if l2_input > 0:
        loss = T.add(loss, T.scale(T.tmean(T.square(x)), l2_input))
    if total_variation > 0 and x.ndim == 4:
        loss = T.add(loss, T.scale(T.total_variation(x), total_variation))
    return loss, residuals


def _init_inputs(cfg, shape):
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, 0x1DEA]))
    if cfg.init == "gaussian":
        x = cfg.sigma_init * rng.standard_normal(shape)
    else:
        x = rng.uniform(-cfg.sigma_init, cfg.sigma_init, size=shape)
    return x.astype(np.float32)


def _lr_at(cfg, step):
    # halve the step size at each quarter of the schedule
    quarter = max(1, cfg.steps // 4)
    return cfg.lr * (0.5 ** min(step // quarter, 3))


def synthesize(ckpt, cfg):
    """Gradient-descend a noise batch onto the buffer statistics.

    Tracks and returns the best iterate seen (including the starting
    point), so more steps never report a worse loss. Deterministic per
    config seed.
    """
    buffers = ckpt.require_buffers()
    if not ckpt.spec.batchnorm_layers():
        raise InversionError("model has no batchnorm layers to invert")
    if any(buffers[i].count == 0 for i in ckpt.spec.batchnorm_layers()):
        raise InversionError("buffers are empty (count 0); train or merge first")
    shape = (cfg.batch_size, *ckpt.spec.input_shape)
    x = _init_inputs(cfg, shape)

    best_loss, best_x, best_residuals = np.inf, None, None

    def assess(arr, step):
        nonlocal best_loss, best_x, best_residuals
        xt = Tensor(arr, requires_grad=True)
        try:
            loss, residuals = inversion_loss(
                xt, ckpt, cfg.layer_weights, cfg.squared, cfg.l2_input, cfg.total_variation
            )
        except T.NumericError as exc:
            raise InversionError(f"inversion diverged at step {step}: {exc}") from exc
        value = loss.item()
        if not np.isfinite(value):
            raise InversionError(f"inversion diverged at step {step}")
        if value < best_loss:
            best_loss, best_x, best_residuals = value, arr.copy(), residuals
        return xt, loss

    # batch statistics average over the batch, so their input gradient
    # carries a 1/B factor; scaling the step by B makes convergence speed
    # independent of batch size
    step_scale = float(cfg.batch_size)
    for step in range(cfg.steps):
        xt, loss = assess(x, step)
        T.backward(loss)
        x = np.clip(x - _lr_at(cfg, step) * step_scale * xt.grad, -cfg.clamp, cfg.clamp).astype(np.float32)
    assess(x, cfg.steps)

    provenance = {
        "config_hash": config_hash(cfg),
        "checkpoint_hash": checkpoint_hash(ckpt),
        "steps": cfg.steps,
        "seed": cfg.seed,
    }
    return PseudoBatch(best_x, float(best_loss), best_residuals, provenance)


def config_hash(cfg):
    blob = json.dumps(cfg.to_json_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def checkpoint_hash(ckpt):
    header = {"spec": ckpt.spec.to_dict()}
    arrays = {f"param.{k}": v for k, v in ckpt.params.items()}
    if ckpt.buffers is not None:
        for i, st in ckpt.buffers.items():
            arrays[f"buffer.{i:03d}.mean"] = st.mean
            arrays[f"buffer.{i:03d}.var"] = st.var
            arrays[f"buffer.{i:03d}.count"] = np.array([st.count], dtype=np.float32)
    blob = ser.pack_container(ser.CHECKPOINT_MAGIC, header, arrays)
    return hashlib.sha256(blob).hexdigest()[:16]


def save_pseudo_batch(batch, path, class_count):
    """Persist synthetic inputs as a dataset file flagged synthetic."""
    ds = Dataset(batch.inputs, np.zeros(len(batch.inputs), dtype=np.int64), class_count, "pseudo")
    save_dataset(ds, path, extra_meta={
        "synthetic": True,
        "labeled": False,
        "final_loss": batch.final_loss,
        "per_layer_residuals": batch.per_layer_residuals,
        "provenance": batch.provenance,
    })
