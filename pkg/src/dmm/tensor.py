"""Dense tensors with reverse-mode automatic differentiation.

Small numpy-backed engine covering exactly the op vocabulary the rest of
the package needs: affine layers, stride-1 convolution, batch-statistic
collection for normalization layers, and the reductions used by the
inversion and distillation losses. Gradients flow to any leaf marked
``requires_grad`` -- including input data, which the inversion stage
optimizes directly.

Storage is float32 by default; reductions accumulate in float64. A full
float64 mode (pass float64 arrays in) exists for finite-difference
verification via :func:`grad_check`.
"""

from __future__ import annotations

import contextlib

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "GraphError",
    "set_checked",
    "checked_mode",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv2d",
    "relu",
    "batch_stats",
    "normalize_affine",
    "avgpool2d",
    "flatten",
    "softmax",
    "log_softmax",
    "log",
    "exp",
    "tsum",
    "tmean",
    "square",
    "sqrt",
    "concat",
    "cross_entropy",
    "total_variation",
    "scale",
    "backward",
    "forward_op",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN/Inf while checked mode is active."""


class GraphError(RuntimeError):
    """Backward called on an unusable graph (non-scalar or detached loss)."""


_CHECKED = True


def set_checked(enabled):
    """Toggle NaN/Inf checking on op outputs. Returns the previous setting."""
    global _CHECKED
    previous = _CHECKED
    _CHECKED = bool(enabled)
    return previous


@contextlib.contextmanager
def checked_mode(enabled):
    previous = set_checked(enabled)
    try:
        yield
    finally:
        set_checked(previous)


def _as_array(data, dtype=None):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """N-d array plus optional gradient bookkeeping.

    Tensors are immutable after creation except for ``grad``. Ops record
    their inputs only when some input requires gradients, so inference
    paths build no graph at all.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype).copy()
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bw = None
        self._op = None

    @classmethod
    def _from_op(cls, data, op, parents, bw):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._bw = bw
            out._op = op
        else:
            out._parents = ()
            out._bw = None
            out._op = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        """A copy of the underlying array."""
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar used in tests and composites; full shapes only.
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __truediv__(self, other):
        return div(self, _lift(other, self))


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _result_dtype(*tensors):
    for t in tensors:
        if t.data.dtype == np.float64:
            return np.float64
    return np.float32


def _quiet():
    return np.errstate(divide="ignore", invalid="ignore", over="ignore")


def _check(op, arr):
    # non-finite signalling is owned by checked mode, not numpy warnings
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: produced non-finite values")
    return arr


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.reshape(t.data.shape).copy()
    else:
        t.grad = t.grad + g.reshape(t.data.shape)


# ---------------------------------------------------------------------------
# broadcasting for elementwise binaries
#
# Supported operand pairs: identical shapes, scalar () against anything, and
# a per-channel vector [C] against [N, C] or [N, C, H, W]. That is the entire
# vocabulary the layer set needs; anything else is a shape error.
# ---------------------------------------------------------------------------


def _broadcast_view(op, small, big_shape):
    if small.shape == big_shape or small.shape == ():
        return small
    if small.ndim == 1:
        c = small.shape[0]
        if len(big_shape) == 2 and big_shape[1] == c:
            return small.reshape(1, c)
        if len(big_shape) == 4 and big_shape[1] == c:
            return small.reshape(1, c, 1, 1)
    raise ShapeError(f"{op}: cannot broadcast {small.shape} against {big_shape}")


def _reduce_to(g, shape):
    """Sum gradient over broadcast axes back down to the operand shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype)
    # channel vector: sum over all axes except the channel axis (1)
    axes = tuple(i for i in range(g.ndim) if i != 1)
    return g.sum(axis=axes, dtype=np.float64).astype(g.dtype)


def _binary(op, a, b, fwd, grad_a, grad_b):
    if a.shape != b.shape:
        if a.size >= b.size:
            bv = _broadcast_view(op, b.data, a.shape)
            av = a.data
        else:
            av = _broadcast_view(op, a.data, b.shape)
            bv = b.data
    else:
        av, bv = a.data, b.data
    with _quiet():
        out_data = _check(op, fwd(av, bv).astype(_result_dtype(a, b), copy=False))

    def bw(out):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, _reduce_to(grad_a(g, av, bv, out.data), a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(grad_b(g, av, bv, out.data), b.shape))

    out = Tensor._from_op(out_data, op, (a, b), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def add(a, b):
    return _binary(
        "add", a, b, lambda x, y: x + y,
        lambda g, x, y, o: g,
        lambda g, x, y, o: g,
    )


def sub(a, b):
    return _binary(
        "sub", a, b, lambda x, y: x - y,
        lambda g, x, y, o: g,
        lambda g, x, y, o: -g,
    )


def mul(a, b):
    return _binary(
        "mul", a, b, lambda x, y: x * y,
        lambda g, x, y, o: g * y,
        lambda g, x, y, o: g * x,
    )


def div(a, b):
    return _binary(
        "div", a, b, lambda x, y: x / y,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * x / (y * y),
    )


def scale(x, s):
    """Multiply by a python scalar (constant, no gradient to s)."""
    return mul(x, Tensor(np.asarray(s, dtype=x.data.dtype)))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not conform")
    out_data = _check("matmul", (a.data @ b.data).astype(_result_dtype(a, b), copy=False))

    def bw(out):
        g = out.grad
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    out = Tensor._from_op(out_data, "matmul", (a, b), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def _im2col(x, kh, kw, pad):
    n, c, h, w = x.shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + ho, j:j + wo]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(cols, x_shape, kh, kw, pad):
    n, c, h, w = x_shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + ho, j:j + wo] += cols[:, :, i, j]
    if pad:
        img = img[:, :, pad:pad + h, pad:pad + w]
    return img


def conv2d(x, w, padding=0):
    """Stride-1 2-d convolution with symmetric zero padding.

    x: [N, C, H, W], w: [O, C, kh, kw] -> [N, O, H', W'].
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h, wd)}")
    cols, ho, wo = _im2col(x.data, kh, kw, padding)
    wmat = w.data.reshape(o, -1)
    out_mat = cols @ wmat.T
    out_data = _check(
        "conv2d",
        out_mat.reshape(n, ho, wo, o).transpose(0, 3, 1, 2).astype(_result_dtype(x, w), copy=False),
    )

    def bw(out):
        g = out.grad.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.requires_grad:
            _accumulate(w, (g.T @ cols).reshape(w.shape))
        if x.requires_grad:
            _accumulate(x, _col2im(g @ wmat, x.shape, kh, kw, padding))

    out = Tensor._from_op(out_data, "conv2d", (x, w), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


# ---------------------------------------------------------------------------
# activations and shape ops
# ---------------------------------------------------------------------------


def relu(x):
    out_data = _check("relu", np.maximum(x.data, 0))

    def bw(out):
        _accumulate(x, out.grad * (x.data > 0))

    out = Tensor._from_op(out_data, "relu", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def avgpool2d(x, k):
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: spatial dims {(h, w)} not divisible by k={k}")
    pooled = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5), dtype=np.float64)
    out_data = _check("avgpool2d", pooled.astype(x.data.dtype, copy=False))

    def bw(out):
        g = out.grad / (k * k)
        _accumulate(x, np.repeat(np.repeat(g, k, axis=2), k, axis=3))

    out = Tensor._from_op(out_data, "avgpool2d", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def flatten(x):
    n = x.shape[0]
    out_data = x.data.reshape(n, -1)

    def bw(out):
        _accumulate(x, out.grad.reshape(x.shape))

    out = Tensor._from_op(out_data, "flatten", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def concat(tensors, axis=0):
    if not tensors:
        raise ShapeError("concat: empty input list")
    out_data = _check("concat", np.concatenate([t.data for t in tensors], axis=axis))

    def bw(out):
        offset = 0
        for t in tensors:
            span = t.shape[axis]
            idx = [slice(None)] * out.data.ndim
            idx[axis] = slice(offset, offset + span)
            _accumulate(t, out.grad[tuple(idx)])
            offset += span

    out = Tensor._from_op(out_data, "concat", tuple(tensors), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


# ---------------------------------------------------------------------------
# pointwise math
# ---------------------------------------------------------------------------


def square(x):
    out_data = _check("square", x.data * x.data)

    def bw(out):
        _accumulate(x, out.grad * 2 * x.data)

    out = Tensor._from_op(out_data, "square", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def sqrt(x, eps=0.0):
    """sqrt(x + eps); eps keeps variance terms away from the origin."""
    with _quiet():
        out_data = _check("sqrt", np.sqrt(x.data + eps))

    def bw(out):
        _accumulate(x, out.grad * 0.5 / out.data)

    out = Tensor._from_op(out_data, "sqrt", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def log(x):
    with _quiet():
        out_data = _check("log", np.log(x.data))

    def bw(out):
        _accumulate(x, out.grad / x.data)

    out = Tensor._from_op(out_data, "log", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def exp(x):
    with _quiet():
        out_data = _check("exp", np.exp(x.data))

    def bw(out):
        _accumulate(x, out.grad * out.data)

    out = Tensor._from_op(out_data, "exp", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def softmax(x):
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = _check("softmax", e / e.sum(axis=-1, keepdims=True))

    def bw(out):
        g, s = out.grad, out.data
        _accumulate(x, (g - (g * s).sum(axis=-1, keepdims=True)) * s)

    out = Tensor._from_op(out_data, "softmax", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def log_softmax(x):
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = _check("log_softmax", shifted - lse)

    def bw(out):
        g = out.grad
        _accumulate(x, g - np.exp(out.data) * g.sum(axis=-1, keepdims=True))

    out = Tensor._from_op(out_data, "log_softmax", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)
# ---------------------------------------------------------------------------


def tsum(x):
    out_data = _check("sum", np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype))

    def bw(out):
        _accumulate(x, np.broadcast_to(out.grad, x.shape))

    out = Tensor._from_op(out_data, "sum", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def tmean(x):
    out_data = _check("mean", np.asarray(x.data.mean(dtype=np.float64), dtype=x.data.dtype))

    def bw(out):
        _accumulate(x, np.broadcast_to(out.grad / x.size, x.shape))

    out = Tensor._from_op(out_data, "mean", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def batch_stats(x):
    """Per-channel mean and biased variance over batch (and spatial) dims.

    x: [N, C] or [N, C, H, W]. Returns (mean [C], var [C]). Both outputs
    backpropagate into x; the variance gradient uses 2*(x - mean)/M, the
    mean-centering term cancelling exactly.
    """
    if x.ndim == 2:
        axes = (0,)
    elif x.ndim == 4:
        axes = (0, 2, 3)
    else:
        raise ShapeError(f"batch_stats: expected 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    m = x.data.size // c
    mean64 = x.data.mean(axis=axes, dtype=np.float64)
    shape_c = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    centered = x.data.astype(np.float64) - mean64.reshape(shape_c)
    var64 = np.square(centered).mean(axis=axes, dtype=np.float64)

    mean_data = _check("batch_stats", mean64.astype(x.data.dtype))
    var_data = _check("batch_stats", var64.astype(x.data.dtype))

    def bw_mean(out):
        _accumulate(x, np.broadcast_to(out.grad.reshape(shape_c) / m, x.shape))

    def bw_var(out):
        _accumulate(x, out.grad.reshape(shape_c) * 2.0 * centered / m)

    mean_t = Tensor._from_op(mean_data, "batch_stats.mean", (x,), None)
    if mean_t.requires_grad:
        mean_t._bw = lambda: bw_mean(mean_t)
    var_t = Tensor._from_op(var_data, "batch_stats.var", (x,), None)
    if var_t.requires_grad:
        var_t._bw = lambda: bw_var(var_t)
    return mean_t, var_t


def normalize_affine(x, mean, var, gamma, beta, eps=1e-5):
    """gamma * (x - mean) / sqrt(var + eps) + beta, per channel.

    mean/var may be constants (stored buffers) or graph outputs of
    batch_stats, in which case gradients flow through them as well.
    """
    return add(mul(div(sub(x, mean), sqrt(var, eps)), gamma), beta)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [B, C] logits, got {logits.shape}")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy: label outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True, dtype=np.float64))
    ls = shifted - lse
    out_data = _check(
        "cross_entropy",
        np.asarray(-ls[np.arange(b), labels].mean(dtype=np.float64), dtype=logits.data.dtype),
    )

    def bw(out):
        p = np.exp(ls)
        p[np.arange(b), labels] -= 1.0
        _accumulate(logits, out.grad * p / b)

    out = Tensor._from_op(out_data, "cross_entropy", (logits,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


def total_variation(x):
    """Mean squared difference of horizontal/vertical neighbours. 4-d inputs."""
    if x.ndim != 4:
        raise ShapeError(f"total_variation: expected 4-d input, got {x.shape}")
    dh = x.data[:, :, 1:, :] - x.data[:, :, :-1, :]
    dw = x.data[:, :, :, 1:] - x.data[:, :, :, :-1]
    val = 0.0
    if dh.size:
        val += np.square(dh).mean(dtype=np.float64)
    if dw.size:
        val += np.square(dw).mean(dtype=np.float64)
    out_data = _check("total_variation", np.asarray(val, dtype=x.data.dtype))

    def bw(out):
        g = np.zeros_like(x.data)
        if dh.size:
            gh = out.grad * 2.0 * dh / dh.size
            g[:, :, 1:, :] += gh
            g[:, :, :-1, :] -= gh
        if dw.size:
            gw = out.grad * 2.0 * dw / dw.size
            g[:, :, :, 1:] += gw
            g[:, :, :, :-1] -= gw
        _accumulate(x, g)

    out = Tensor._from_op(out_data, "total_variation", (x,), None)
    if out.requires_grad:
        out._bw = lambda: bw(out)
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, leaves=None, accumulate=False):
    """Reverse-mode pass from a scalar loss.

    Returns a map of leaf tensor -> gradient array for every reachable
    ``requires_grad`` leaf, plus zero entries for any tensor in ``leaves``
    the loss does not depend on. Unless ``accumulate`` is set, gradients in
    the reachable graph are reset first, so repeated calls are idempotent.
    """
    if loss.shape != ():
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward: loss is detached from gradient-tracked leaves")
    order = _toposort(loss)
    for node in order:
        # interior grads are scratch space and always reset; leaf grads
        # survive only when accumulation across graphs was requested
        if node._parents or not accumulate:
            node.grad = None
    if loss.grad is None:
        loss.grad = np.ones((), dtype=loss.data.dtype)
    else:
        loss.grad = loss.grad + np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._bw is not None and node.grad is not None:
            node._bw()
    grads = {}
    for node in order:
        if node.requires_grad and not node._parents:
            grads[node] = node.grad if node.grad is not None else np.zeros_like(node.data)
    if leaves is not None:
        for leaf in leaves:
            if leaf not in grads:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)
                grads[leaf] = leaf.grad
    return grads


# ---------------------------------------------------------------------------
# generic dispatch and gradient verification
# ---------------------------------------------------------------------------

_OPS = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "conv2d": lambda inputs, attrs: conv2d(*inputs, padding=attrs.get("padding", 0)),
    "add": lambda inputs, attrs: add(*inputs),
    "sub": lambda inputs, attrs: sub(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "div": lambda inputs, attrs: div(*inputs),
    "relu": lambda inputs, attrs: relu(*inputs),
    "batch_stats": lambda inputs, attrs: batch_stats(*inputs),
    "normalize_affine": lambda inputs, attrs: normalize_affine(*inputs, eps=attrs.get("eps", 1e-5)),
    "avgpool2d": lambda inputs, attrs: avgpool2d(inputs[0], attrs["k"]),
    "flatten": lambda inputs, attrs: flatten(*inputs),
    "softmax": lambda inputs, attrs: softmax(*inputs),
    "log_softmax": lambda inputs, attrs: log_softmax(*inputs),
    "log": lambda inputs, attrs: log(*inputs),
    "exp": lambda inputs, attrs: exp(*inputs),
    "sum": lambda inputs, attrs: tsum(*inputs),
    "mean": lambda inputs, attrs: tmean(*inputs),
    "square": lambda inputs, attrs: square(*inputs),
    "sqrt": lambda inputs, attrs: sqrt(inputs[0], eps=attrs.get("eps", 0.0)),
    "concat": lambda inputs, attrs: concat(list(inputs), axis=attrs.get("axis", 0)),
    "cross_entropy": lambda inputs, attrs: cross_entropy(inputs[0], attrs["labels"]),
    "total_variation": lambda inputs, attrs: total_variation(*inputs),
}


def forward_op(kind, inputs, attrs=None):
    """Apply an op by name. batch_stats returns a (mean, var) pair."""
    if kind not in _OPS:
        raise KeyError(f"unknown op kind: {kind!r}")
    return _OPS[kind](list(inputs), attrs or {})


def grad_check(fn, shapes, seed=0, eps=1e-5, positive=()):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors (one per entry of ``shapes``) to a Tensor or tuple
    of Tensors. Runs in float64. Inputs listed in ``positive`` are shifted
    away from zero for ops with restricted domains. Error metric per
    element: |analytic - cd| / (|analytic| + |cd| + 1e-12).
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, 0xAD]))
    raw = []
    for i, shp in enumerate(shapes):
        x = rng.standard_normal(shp)
        if i in positive:
            x = np.abs(x) + 0.5
        raw.append(x)

    def projected_loss(arrays, build_graph):
        tensors = [Tensor(a, requires_grad=build_graph, dtype=np.float64) for a in arrays]
        out = fn(*tensors)
        outs = out if isinstance(out, tuple) else (out,)
        total = None
        for o, p in zip(outs, projections):
            term = tsum(mul(o, Tensor(p, dtype=np.float64)))
            total = term if total is None else add(total, term)
        return total, tensors

    # fixed projection weights make the scalar loss exercise every output
    probe = fn(*[Tensor(a, dtype=np.float64) for a in raw])
    probe_outs = probe if isinstance(probe, tuple) else (probe,)
    projections = [rng.standard_normal(o.shape) for o in probe_outs]

    loss, tensors = projected_loss(raw, build_graph=True)
    backward(loss, leaves=tensors)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for i, base in enumerate(raw):
        flat = base.reshape(-1)
        for j in range(flat.size):
            for sign, store in ((1.0, "hi"), (-1.0, "lo")):
                bumped = [a.copy() for a in raw]
                bumped[i].reshape(-1)[j] = flat[j] + sign * eps
                val, _ = projected_loss(bumped, build_graph=False)
                if store == "hi":
                    hi = val.item()
                else:
                    lo = val.item()
            cd = (hi - lo) / (2 * eps)
            an = analytic[i].reshape(-1)[j]
            err = abs(an - cd) / (abs(an) + abs(cd) + 1e-12)
            worst = max(worst, err)
    return worst
