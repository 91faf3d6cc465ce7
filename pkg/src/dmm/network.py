"""Sequential networks with normalization layers, SGD training, checkpoints.

A model is an ordered list of layer descriptors plus named parameter
arrays and, per batchnorm layer, running statistics. Buffer updates are
CUMULATIVE pooled moments over every observation seen (not an EMA), which
is what makes cross-model buffer aggregation exact; an EMA mode exists
behind ``ema_momentum`` for comparison but forfeits that exactness.

``BufferStats.count`` counts pooled per-channel observations: the batch
size for vector activations, batch * H * W for spatial ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import serialization as ser
from . import tensor as T
from .tensor import Tensor

BN_EPS = 1e-5

LAYER_KINDS = ("dense", "conv2d", "batchnorm", "relu", "avgpool2d", "flatten", "softmax_head")


class SpecError(ValueError):
    """Layer list does not describe a well-formed network."""


class MissingBuffersError(RuntimeError):
    """Eval/merge/inversion path needs buffers the checkpoint does not carry."""


# ---------------------------------------------------------------------------
# buffer statistics
# ---------------------------------------------------------------------------


@dataclass
class BufferStats:
    mean: np.ndarray  # float32 [C]
    var: np.ndarray   # float32 [C]
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.var = np.asarray(self.var, dtype=np.float32)
        self.count = int(self.count)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ValueError(f"mean {self.mean.shape} and var {self.var.shape} must be equal-length vectors")
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if np.any(self.var < 0):
            raise ValueError("variance entries must be >= 0")

    def copy(self):
        return BufferStats(self.mean.copy(), self.var.copy(), self.count)


def pooled_moments(means, variances, counts):
    """Exact pooled mean/biased variance of groups given per-group moments.

    Total N = sum(n_k); mean = sum(n_k * mu_k) / N; variance adds each
    group's internal variance and its squared offset from the pooled mean:
    var = sum(n_k * var_k + n_k * (mean - mu_k)^2) / N. Computed in float64.
    """
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("pooled moments need a positive total count")
    means64 = np.stack([np.asarray(m, dtype=np.float64) for m in means])
    vars64 = np.stack([np.asarray(v, dtype=np.float64) for v in variances])
    mean = (counts[:, None] * means64).sum(axis=0) / total
    var = (counts[:, None] * (vars64 + np.square(mean[None, :] - means64))).sum(axis=0) / total
    return mean, var, int(round(total))


def update_buffers(stats, batch_mean, batch_var, batch_count, ema_momentum=None):
    """Fold one batch into running statistics; returns new BufferStats.

    Default is the exact cumulative rule (pooled moments of the old
    virtual population and the batch). With ``ema_momentum`` set, applies
    the conventional exponential update instead.
    """
    batch_mean = np.asarray(batch_mean, dtype=np.float64)
    batch_var = np.asarray(batch_var, dtype=np.float64)
    if batch_mean.shape != stats.mean.shape or batch_var.shape != stats.var.shape:
        raise ValueError(f"batch stats {batch_mean.shape} do not match buffers {stats.mean.shape}")
    if np.any(batch_var < 0):
        raise ValueError("negative batch variance")
    if batch_count <= 0:
        raise ValueError("batch_count must be positive")
    if ema_momentum is not None:
        m = float(ema_momentum)
        if stats.count == 0:
            mean, var = batch_mean, batch_var
        else:
            mean = (1 - m) * stats.mean.astype(np.float64) + m * batch_mean
            var = (1 - m) * stats.var.astype(np.float64) + m * batch_var
        return BufferStats(mean.astype(np.float32), var.astype(np.float32), stats.count + batch_count)
    if stats.count == 0:
        return BufferStats(batch_mean.astype(np.float32), batch_var.astype(np.float32), int(batch_count))
    mean, var, count = pooled_moments(
        [stats.mean, batch_mean], [stats.var, batch_var], [stats.count, batch_count]
    )
    return BufferStats(mean.astype(np.float32), var.astype(np.float32), count)


# ---------------------------------------------------------------------------
# model specification
# ---------------------------------------------------------------------------


@dataclass
class ModelSpec:
    input_shape: tuple
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]
        self.validate()

    def validate(self):
        self.layer_shapes()  # raises on any inconsistency

    def layer_shapes(self):
        """Output shape after each layer; raises SpecError on mismatch."""
        cur = self.input_shape
        shapes = []
        if not self.layers:
            raise SpecError("model has no layers")
        for i, layer in enumerate(self.layers):
            kind = layer.get("kind")
            if kind not in LAYER_KINDS:
                raise SpecError(f"layer {i}: unknown kind {kind!r}")
            if kind in ("dense", "softmax_head"):
                if len(cur) != 1:
                    raise SpecError(f"layer {i} ({kind}): needs flat input, got {cur}")
                d_in = layer["in"] if kind == "dense" else layer["in"]
                d_out = layer["out"] if kind == "dense" else layer["classes"]
                if d_in != cur[0]:
                    raise SpecError(f"layer {i} ({kind}): expects {d_in} features, gets {cur[0]}")
                if kind == "softmax_head" and d_out < 2:
                    raise SpecError(f"layer {i}: softmax_head needs >= 2 classes")
                cur = (d_out,)
            elif kind == "conv2d":
                if len(cur) != 3:
                    raise SpecError(f"layer {i} (conv2d): needs [C,H,W] input, got {cur}")
                if layer["in_ch"] != cur[0]:
                    raise SpecError(f"layer {i} (conv2d): expects {layer['in_ch']} channels, gets {cur[0]}")
                if layer["k"] % 2 == 0:
                    raise SpecError(f"layer {i} (conv2d): kernel size must be odd, got {layer['k']}")
                cur = (layer["out_ch"], cur[1], cur[2])
            elif kind == "batchnorm":
                if layer["channels"] != cur[0]:
                    raise SpecError(f"layer {i} (batchnorm): {layer['channels']} channels vs input {cur}")
            elif kind == "avgpool2d":
                if len(cur) != 3:
                    raise SpecError(f"layer {i} (avgpool2d): needs [C,H,W] input, got {cur}")
                k = layer["k"]
                if cur[1] % k or cur[2] % k:
                    raise SpecError(f"layer {i} (avgpool2d): dims {cur[1:]} not divisible by {k}")
                cur = (cur[0], cur[1] // k, cur[2] // k)
            elif kind == "flatten":
                if len(cur) == 1:
                    raise SpecError(f"layer {i} (flatten): input already flat")
                cur = (int(np.prod(cur)),)
            shapes.append(cur)
        if self.layers[-1]["kind"] != "softmax_head":
            raise SpecError("last layer must be a softmax_head")
        return shapes

    @property
    def class_count(self):
        return self.layers[-1]["classes"]

    def batchnorm_layers(self):
        return [i for i, l in enumerate(self.layers) if l["kind"] == "batchnorm"]

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": self.layers}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["input_shape"]), d["layers"])

    def __eq__(self, other):
        return isinstance(other, ModelSpec) and self.to_dict() == other.to_dict()


def mlp_spec(input_dim, hidden, classes, input_batchnorm=True, hidden_batchnorm=True):
    """Dense network: [BN] -> (dense -> [BN] -> relu)* -> softmax_head."""
    layers = []
    if input_batchnorm:
        layers.append({"kind": "batchnorm", "channels": input_dim})
    prev = input_dim
    for h in hidden:
        layers.append({"kind": "dense", "in": prev, "out": h})
        if hidden_batchnorm:
            layers.append({"kind": "batchnorm", "channels": h})
        layers.append({"kind": "relu"})
        prev = h
    layers.append({"kind": "softmax_head", "in": prev, "classes": classes})
    return ModelSpec((input_dim,), layers)


def convnet_spec(input_shape, channels, kernel, classes, pool=2, input_batchnorm=True):
    """Conv network: [BN] -> (conv -> BN -> relu)* -> pool -> flatten -> head."""
    c, h, w = input_shape
    layers = []
    if input_batchnorm:
        layers.append({"kind": "batchnorm", "channels": c})
    prev = c
    for ch in channels:
        layers.append({"kind": "conv2d", "in_ch": prev, "out_ch": ch, "k": kernel})
        layers.append({"kind": "batchnorm", "channels": ch})
        layers.append({"kind": "relu"})
        prev = ch
    layers.append({"kind": "avgpool2d", "k": pool})
    layers.append({"kind": "flatten"})
    layers.append({"kind": "softmax_head", "in": prev * (h // pool) * (w // pool), "classes": classes})
    return ModelSpec(tuple(input_shape), layers)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict            # name -> float32 array
    buffers: dict | None    # batchnorm layer index -> BufferStats; None = unset
    meta: dict = field(default_factory=dict)

    def copy(self):
        return Checkpoint(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            None if self.buffers is None else {i: s.copy() for i, s in self.buffers.items()},
            dict(self.meta),
        )

    def require_buffers(self):
        if self.buffers is None:
            raise MissingBuffersError("checkpoint has no normalization buffers")
        missing = [i for i in self.spec.batchnorm_layers() if i not in self.buffers]
        if missing:
            raise MissingBuffersError(f"missing buffers for batchnorm layers {missing}")
        return self.buffers


def _param_defs(spec):
    """(name, shape, fan_in) for every trainable array, in layer order."""
    defs = []
    for i, layer in enumerate(spec.layers):
        kind = layer["kind"]
        if kind == "dense":
            defs.append((f"{i:03d}.weight", (layer["in"], layer["out"]), layer["in"]))
            defs.append((f"{i:03d}.bias", (layer["out"],), None))
        elif kind == "softmax_head":
            defs.append((f"{i:03d}.weight", (layer["in"], layer["classes"]), layer["in"]))
            defs.append((f"{i:03d}.bias", (layer["classes"],), None))
        elif kind == "conv2d":
            fan_in = layer["in_ch"] * layer["k"] * layer["k"]
            defs.append((f"{i:03d}.weight", (layer["out_ch"], layer["in_ch"], layer["k"], layer["k"]), fan_in))
            defs.append((f"{i:03d}.bias", (layer["out_ch"],), None))
        elif kind == "batchnorm":
            defs.append((f"{i:03d}.gamma", (layer["channels"],), "ones"))
            defs.append((f"{i:03d}.beta", (layer["channels"],), None))
    return defs


def init_checkpoint(spec, seed):
    """Fresh checkpoint: Kaiming-uniform weights, zero biases, identity BN."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x1217]))
    params = {}
    for name, shape, fan_in in _param_defs(spec):
        if fan_in == "ones":
            params[name] = np.ones(shape, dtype=np.float32)
        elif fan_in is None:
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    buffers = {
        i: BufferStats(
            np.zeros(spec.layers[i]["channels"], dtype=np.float32),
            np.zeros(spec.layers[i]["channels"], dtype=np.float32),
            0,
        )
        for i in spec.batchnorm_layers()
    }
    return Checkpoint(spec, params, buffers, {"seed": int(seed), "n_samples": 0, "epochs": 0})


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _forward_graph(spec, params, buffers, x, mode, collect=False):
    """Shared forward walk.

    mode "train": normalize by current batch statistics; batch stats are
    reported to the caller (who owns buffer bookkeeping).
    mode "eval": normalize by stored buffers, never mutates.
    collect=True forces train-style normalization and reports the stat
    tensors with gradients attached (inversion needs exactly this).
    Returns (logits, [(layer_idx, mean_t, var_t, obs_count), ...]).
    """
    h = x
    reported = []
    for i, layer in enumerate(spec.layers):
        kind = layer["kind"]
        if kind in ("dense", "softmax_head"):
            h = T.add(T.matmul(h, params[f"{i:03d}.weight"]), params[f"{i:03d}.bias"])
        elif kind == "conv2d":
            h = T.add(T.conv2d(h, params[f"{i:03d}.weight"], padding=layer["k"] // 2), params[f"{i:03d}.bias"])
        elif kind == "batchnorm":
            gamma, beta = params[f"{i:03d}.gamma"], params[f"{i:03d}.beta"]
            if mode == "train" or collect:
                m_t, v_t = T.batch_stats(h)
                obs = h.data.size // layer["channels"]
                h = T.normalize_affine(h, m_t, v_t, gamma, beta, BN_EPS)
                reported.append((i, m_t, v_t, obs))
            else:
                st = buffers[i]
                h = T.normalize_affine(h, Tensor(st.mean), Tensor(st.var), gamma, beta, BN_EPS)
        elif kind == "relu":
            h = T.relu(h)
        elif kind == "avgpool2d":
            h = T.avgpool2d(h, layer["k"])
        elif kind == "flatten":
            h = T.flatten(h)
    return h, reported


def _check_batch(spec, batch, mode):
    if batch.shape[1:] != spec.input_shape:
        raise T.ShapeError(f"batch shape {batch.shape[1:]} does not match model input {spec.input_shape}")
    if mode == "train" and batch.shape[0] < 2:
        raise ValueError("train-mode forward needs batch size >= 2 (batch variance undefined)")


def forward(ckpt, batch, mode="eval", ema_momentum=None):
    """Run the network; returns logits Tensor.

    Train mode normalizes by the batch's own statistics and folds them
    into the checkpoint's buffers (mutates ckpt.buffers). Eval mode is
    pure.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float32)
    _check_batch(ckpt.spec, data, mode)
    x = batch if isinstance(batch, Tensor) else Tensor(data)
    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    if mode == "eval":
        ckpt.require_buffers()
        logits, _ = _forward_graph(ckpt.spec, params, ckpt.buffers, x, "eval")
        return logits
    ckpt.require_buffers()
    logits, reported = _forward_graph(ckpt.spec, params, None, x, "train")
    for i, m_t, v_t, obs in reported:
        ckpt.buffers[i] = update_buffers(ckpt.buffers[i], m_t.data, v_t.data, obs, ema_momentum)
    return logits


def collect_batch_norm_stats(ckpt, x):
    """Forward with train-style normalization, no mutation.

    Returns (logits, [(layer_idx, mean_t, var_t), ...]); the stat tensors
    carry gradients back to x, which is what input optimization needs.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    _check_batch(ckpt.spec, data, "train")
    xt = x if isinstance(x, Tensor) else Tensor(data)
    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    logits, reported = _forward_graph(ckpt.spec, params, None, xt, "eval", collect=True)
    return logits, [(i, m, v) for i, m, v, _ in reported]


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.005
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    ema_momentum: float = None  # None = exact cumulative buffers


def train(ckpt, dataset, cfg):
    """SGD fine-tuning; returns a new checkpoint, input untouched.

    Deterministic given cfg.seed: fixed per-epoch Philox shuffles, last
    partial batch dropped.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if cfg.lr <= 0:
        raise ValueError("lr must be positive")
    if dataset.class_count != ckpt.spec.class_count:
        raise ValueError(
            f"dataset has {dataset.class_count} classes, model head expects {ckpt.spec.class_count}"
        )
    out = ckpt.copy()
    out.meta = {"seed": int(cfg.seed), "n_samples": len(dataset), "epochs": int(cfg.epochs)}
    n = len(dataset)
    for epoch in range(cfg.epochs):
        rng = np.random.Generator(np.random.Philox(key=[cfg.seed, epoch]))
        perm = rng.permutation(n)
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = Tensor(dataset.inputs[idx])
            params_t = {k: Tensor(v, requires_grad=True) for k, v in out.params.items()}
            logits, reported = _forward_graph(out.spec, params_t, None, x, "train")
            for i, m_t, v_t, obs in reported:
                out.buffers[i] = update_buffers(out.buffers[i], m_t.data, v_t.data, obs, cfg.ema_momentum)
            loss = T.cross_entropy(logits, dataset.labels[idx])
            T.backward(loss)
            for k, t in params_t.items():
                out.params[k] = out.params[k] - cfg.lr * t.grad
    return out


def predict_logits(ckpt, inputs, batch_size=256):
    ckpt.require_buffers()
    inputs = np.asarray(inputs, dtype=np.float32)
    chunks = []
    params = {k: Tensor(v) for k, v in ckpt.params.items()}
    for start in range(0, len(inputs), batch_size):
        x = Tensor(inputs[start:start + batch_size])
        logits, _ = _forward_graph(ckpt.spec, params, ckpt.buffers, x, "eval")
        chunks.append(logits.data)
    return np.concatenate(chunks)


def predict_proba(ckpt, inputs, temperature=1.0, batch_size=256):
    logits = predict_logits(ckpt, inputs, batch_size) / float(temperature)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def evaluate(ckpt, dataset, batch_size=256):
    """Top-1 accuracy on a dataset."""
    preds = predict_logits(ckpt, dataset.inputs, batch_size).argmax(axis=1)
    return float((preds == dataset.labels).mean())


def confusion_matrix(ckpt, dataset, batch_size=256):
    """[C, C] counts, rows = true class, cols = predicted."""
    preds = predict_logits(ckpt, dataset.inputs, batch_size).argmax(axis=1)
    c = dataset.class_count
    mat = np.zeros((c, c), dtype=np.int64)
    for t, p in zip(dataset.labels, preds):
        mat[t, p] += 1
    return mat


def per_class_accuracy(ckpt, dataset, batch_size=256):
    mat = confusion_matrix(ckpt, dataset, batch_size)
    totals = mat.sum(axis=1)
    with np.errstate(invalid="ignore"):
        acc = np.where(totals > 0, np.diag(mat) / np.maximum(totals, 1), np.nan)
    return acc


# ---------------------------------------------------------------------------
# DMMC files
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt, path):
    header = {
        "kind": "checkpoint",
        "spec": ckpt.spec.to_dict(),
        "meta": ckpt.meta,
        "buffer_layers": sorted(ckpt.buffers) if ckpt.buffers is not None else None,
    }
    arrays = {f"param.{k}": v for k, v in ckpt.params.items()}
    if ckpt.buffers is not None:
        for i, st in ckpt.buffers.items():
            arrays[f"buffer.{i:03d}.mean"] = st.mean
            arrays[f"buffer.{i:03d}.var"] = st.var
            arrays[f"buffer.{i:03d}.count"] = np.array([st.count], dtype=np.float32)
    ser.write_container(path, ser.CHECKPOINT_MAGIC, header, arrays)


def load_checkpoint(path):
    header, arrays = ser.read_container(path, ser.CHECKPOINT_MAGIC)
    spec = ModelSpec.from_dict(header["spec"])
    params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    buffer_layers = header.get("buffer_layers")
    buffers = None
    if buffer_layers is not None:
        buffers = {}
        for i in buffer_layers:
            buffers[int(i)] = BufferStats(
                arrays[f"buffer.{int(i):03d}.mean"],
                arrays[f"buffer.{int(i):03d}.var"],
                int(round(float(arrays[f"buffer.{int(i):03d}.count"][0]))),
            )
    return Checkpoint(spec, params, buffers, header.get("meta", {}))


def checkpoints_equal(a, b):
    """Bitwise equality of spec, params, buffers (meta excluded)."""
    if a.spec != b.spec or set(a.params) != set(b.params):
        return False
    for k in a.params:
        if a.params[k].shape != b.params[k].shape or not (a.params[k] == b.params[k]).all():
            return False
    if (a.buffers is None) != (b.buffers is None):
        return False
    if a.buffers is not None:
        if set(a.buffers) != set(b.buffers):
            return False
        for i in a.buffers:
            x, y = a.buffers[i], b.buffers[i]
            if x.count != y.count or not (x.mean == y.mean).all() or not (x.var == y.var).all():
                return False
    return True
