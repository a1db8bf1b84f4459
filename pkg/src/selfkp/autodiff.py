"""Minimal reverse-mode automatic differentiation engine.

Tensors wrap numpy arrays (float32 for training, float64 for gradient
checks) and record a compute graph when gradients are tracked. The
primitive set is exactly what the network and losses need: conv2d,
batchnorm, relu, 2x2 maxpool, linear, channel softmax, log/exp,
elementwise add/mul/sub, affine (scalar scale + shift), reductions,
batched descriptor dot products and L2 normalization.

There is no general broadcasting: shapes must match exactly, with
`reshape` as the only shape adapter. The graph is freed after backward
unless the caller keeps it alive for multi-root (per-task) backward.

Image tensors use NHWC layout. Convolution arithmetic is delegated to
torch's CPU kernels (zero-copy from numpy, channels_last fast path);
the graph, backward rules and checking stay in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

torch.set_grad_enabled(False)

Array = np.ndarray


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible, naming the offending dim."""


class UnknownPrimitive(ValueError):
    pass


class Node:
    """Graph record for one primitive application."""

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def tracked(self):
        return self.requires_grad or self.node is not None

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data, op, inputs, backward):
    out = Tensor(data)
    if any(t.tracked() for t in inputs):
        out.node = Node(op, tuple(inputs), backward)
    return out


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        for i, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ShapeMismatch(f"{op}: dimension {i} differs ({da} vs {db})")
        raise ShapeMismatch(f"{op}: rank differs ({a.shape} vs {b.shape})")


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same_shape("add", a.data, b.data)
    return _result(a.data + b.data, "add", [a, b], lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same_shape("sub", a.data, b.data)
    return _result(a.data - b.data, "sub", [a, b], lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same_shape("mul", a.data, b.data)
    da, db = a.data, b.data
    return _result(da * db, "mul", [a, b], lambda g: (g * db, g * da))


def affine(x, scale=1.0, shift=0.0):
    """scale * x + shift with python scalars (the 'scalar scale' primitive)."""
    x = _as_tensor(x)
    s = float(scale)
    return _result(s * x.data + shift, "affine", [x], lambda g: (s * g,))


def relu(x):
    x = _as_tensor(x)
    if x.data.ndim >= 3:
        # large activation maps: fused torch kernels
        yt = torch.relu(torch.from_numpy(x.data))
        out = yt.numpy()

        def backward(g):
            gt = torch.from_numpy(np.ascontiguousarray(g))
            return (torch.ops.aten.threshold_backward(gt, yt, 0).numpy(),)

        return _result(out, "relu", [x], backward)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0), "relu", [x], lambda g: (g * mask,))


# Hinge terms are relu applied to shifted dot products.
clamp0 = relu


def log(x, eps=0.0):
    x = _as_tensor(x)
    shifted = x.data + eps if eps else x.data
    return _result(np.log(shifted), "log", [x], lambda g: (g / shifted,))


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _result(out, "exp", [x], lambda g: (g * out,))


def reduce_sum(x, axis=None):
    x = _as_tensor(x)
    shape = x.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _result(x.data.sum(axis=axis), "reduce_sum", [x], backward)


def reduce_mean(x, axis=None):
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return affine(reduce_sum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.data.shape
    if np.prod(shape) != x.data.size:
        raise ShapeMismatch(f"reshape: cannot view {old} as {tuple(shape)}")
    return _result(x.data.reshape(shape), "reshape", [x], lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# Linear algebra primitives
# ---------------------------------------------------------------------------

def linear(x, w, b=None):
    """x @ w (+ b). x: (..., K), w: (K, M), b: (M,)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(
            f"linear: inner dimension differs ({x.data.shape[-1]} vs {w.data.shape[0]})")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (wd.shape[1],):
            raise ShapeMismatch(
                f"linear: bias dimension 0 differs ({b.data.shape[0]} vs {wd.shape[1]})")
        out = out + b.data
        inputs.append(b)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if len(inputs) == 3:
            return gx, gw, g2.sum(axis=0)
        return gx, gw

    return _result(out.reshape(xd.shape[:-1] + (wd.shape[1],)), "linear", inputs, backward)


def dot(a, b):
    """Pairwise dot products over the trailing descriptor axis.

    a: (N, P, D), b: (N, Q, D) -> (N, P, Q); 2-D operands are also accepted.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-1]:
        raise ShapeMismatch(
            f"dot: descriptor dimension differs ({a.data.shape[-1]} vs {b.data.shape[-1]})")
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeMismatch(f"dot: expected matching 2-D or 3-D operands, "
                            f"got {a.data.shape} and {b.data.shape}")
    da, db = a.data, b.data
    bt = np.swapaxes(db, -1, -2)
    out = np.matmul(da, bt)

    def backward(g):
        ga = np.matmul(g, db)
        gb = np.matmul(np.swapaxes(g, -1, -2), da)
        return ga, gb

    return _result(out, "dot", [a, b], backward)


def channel_softmax(x, axis=-1):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _result(p, "channel_softmax", [x], backward)


def l2_normalize(x, axis=-1, eps=1e-12):
    x = _as_tensor(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x.data / safe

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * inner) / safe,)

    return _result(y, "l2_normalize", [x], backward)


# ---------------------------------------------------------------------------
# Spatial primitives (NHWC); conv arithmetic runs on torch CPU kernels
# ---------------------------------------------------------------------------

def _to_torch_image(a):
    # NHWC numpy -> torch NCHW view with channels_last strides (zero copy)
    return torch.from_numpy(a).permute(0, 3, 1, 2)


def conv2d(x, w, b=None, padding=None):
    """2-D convolution, stride 1. x: (N, H, W, Cin), w: (kh, kw, Cin, Cout).

    3x3 kernels default to padding 1, 1x1 kernels to padding 0, so the
    spatial shape is preserved.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: expected NHWC input, got rank {x.data.ndim}")
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[3] != cin:
        raise ShapeMismatch(
            f"conv2d: input dimension 3 (channels) differs ({x.data.shape[3]} vs {cin})")
    if padding is None:
        padding = kh // 2
    xt = _to_torch_image(x.data)
    wt = torch.from_numpy(w.data).permute(3, 2, 0, 1)
    if kh > 1:
        wt = wt.contiguous(memory_format=torch.channels_last)
    inputs = [x, w]
    bt = None
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeMismatch(
                f"conv2d: bias dimension 0 differs ({b.data.shape[0]} vs {cout})")
        bt = torch.from_numpy(b.data)
        inputs.append(b)
    yt = F.conv2d(xt, wt, bt, stride=1, padding=padding)
    out = np.ascontiguousarray(yt.permute(0, 2, 3, 1).numpy())

    def backward(g):
        gt = _to_torch_image(np.ascontiguousarray(g))
        gx, gw, gb = torch.ops.aten.convolution_backward(
            gt, xt, wt, [cout] if bt is not None else None,
            [1, 1], [padding, padding], [1, 1], False, [0, 0], 1,
            [True, True, bt is not None])
        gx = np.ascontiguousarray(gx.permute(0, 2, 3, 1).numpy())
        gw = np.ascontiguousarray(gw.permute(2, 3, 1, 0).numpy())
        if bt is not None:
            return gx, gw, gb.numpy()
        return gx, gw

    return _result(out, "conv2d", inputs, backward)


def maxpool2(x):
    """2x2 max pooling, stride 2, NHWC. Ties route the gradient to the
    first (row-major) maximal element."""
    x = _as_tensor(x)
    n, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"maxpool2: spatial dims must be even, got {h}x{w}")
    xt = _to_torch_image(x.data)
    yt, idx = torch.ops.aten.max_pool2d_with_indices(xt, [2, 2], [2, 2])
    out = np.ascontiguousarray(yt.permute(0, 2, 3, 1).numpy())

    def backward(g):
        gt = _to_torch_image(np.ascontiguousarray(g))
        gx = torch.ops.aten.max_pool2d_with_indices_backward(
            gt, xt, [2, 2], [2, 2], [0, 0], [1, 1], False, idx)
        return (np.ascontiguousarray(gx.permute(0, 2, 3, 1).numpy()),)

    return _result(out, "maxpool2", [x], backward)


@dataclass
class BatchNormState:
    """Running statistics, used only in eval mode."""
    mean: Array
    var: Array
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, dtype=np.float32):
        return cls(mean=np.zeros(channels, dtype=dtype),
                   var=np.ones(channels, dtype=dtype))

    def copy(self):
        return BatchNormState(self.mean.copy(), self.var.copy(),
                              self.momentum, self.eps)


def batchnorm(x, gamma, beta, state: BatchNormState, mode="train"):
    """Per-channel batch normalization over all non-channel axes.

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode uses the running buffers.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatch(
            f"batchnorm: scale/shift dimension 0 differs ({gamma.data.shape[0]} vs {c})")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    train = mode == "train"
    if x.data.ndim == 4:
        xt = _to_torch_image(x.data)
    elif x.data.ndim == 2:
        xt = torch.from_numpy(x.data).reshape(x.data.shape + (1, 1)).permute(0, 3, 1, 2)
    else:
        raise ShapeMismatch(f"batchnorm: expected rank 2 or 4, got {x.data.ndim}")
    if state.mean.dtype != x.dtype:
        state.mean = state.mean.astype(x.dtype)
        state.var = state.var.astype(x.dtype)
    gt = torch.from_numpy(gamma.data)
    bt = torch.from_numpy(beta.data)
    rm = torch.from_numpy(state.mean)
    rv = torch.from_numpy(state.var)
    # torch momentum is the weight of the batch statistic
    yt, save_mean, save_invstd = torch.ops.aten.native_batch_norm(
        xt, gt, bt, rm, rv, train, 1.0 - state.momentum, state.eps)
    if x.data.ndim == 4:
        out = np.ascontiguousarray(yt.permute(0, 2, 3, 1).numpy())
    else:
        out = yt.reshape(x.data.shape).numpy()

    def backward(g):
        if x.data.ndim == 4:
            gt_out = _to_torch_image(np.ascontiguousarray(g))
        else:
            gt_out = torch.from_numpy(np.ascontiguousarray(g)) \
                .reshape(g.shape + (1, 1)).permute(0, 3, 1, 2)
        gx, ggamma, gbeta = torch.ops.aten.native_batch_norm_backward(
            gt_out, xt, gt, rm, rv, save_mean, save_invstd, train,
            state.eps, [True, True, True])
        if x.data.ndim == 4:
            gx = np.ascontiguousarray(gx.permute(0, 2, 3, 1).numpy())
        else:
            gx = gx.reshape(x.data.shape).numpy()
        return gx, ggamma.numpy(), gbeta.numpy()

    return _result(out, "batchnorm", [x, gamma, beta], backward)


# ---------------------------------------------------------------------------
# Dispatch, backward pass, finite differences
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "affine": affine,
    "relu": relu,
    "clamp0": clamp0,
    "log": log,
    "exp": exp,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "reshape": reshape,
    "linear": linear,
    "dot": dot,
    "channel_softmax": channel_softmax,
    "l2_normalize": l2_normalize,
    "conv2d": conv2d,
    "maxpool2": maxpool2,
    "batchnorm": batchnorm,
}


def forward_primitive(kind, inputs, **attrs):
    """Apply a primitive by name. Unknown kinds are rejected."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitive(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **attrs)


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t.node.inputs:
            stack.append((inp, False))
    return order


def backward(root: Tensor, free=True):
    """Accumulate d(root)/d(param) into .grad of every tracked leaf.

    root must be scalar. Each node is visited exactly once, in reverse
    topological order; a tensor feeding several consumers receives the
    sum of their contributions. The graph is freed afterwards unless
    free=False (needed for per-task backward from several roots).
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    if root.node is None:
        if root.requires_grad:
            g = np.ones_like(root.data)
            root.grad = g if root.grad is None else root.grad + g
        return
    order = _toposort(root)
    grads = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.tracked():
                continue
            if inp.node is None:
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    if free:
        for t in order:
            t.node = None


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    tolerance: float
    passed: bool
    per_param: dict = field(default_factory=dict)


def finite_diff_check(f, params, step=1e-5, tolerance=1e-4):
    """Compare analytic gradients of f(params) against central differences.

    f must be deterministic and return a scalar Tensor; params should be
    float64 for the stated tolerances to be reachable. The relative error
    per element is |analytic - numeric| / max(1, |numeric|), so it decays
    to an absolute criterion for near-zero gradients.
    """
    for p in params:
        p.zero_grad()
    out = f(params)
    backward(out)
    report = FiniteDiffReport(0.0, tolerance, True)
    for idx, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(params).item()
            flat[i] = orig - step
            lo = f(params).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * step)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        worst = float(err.max()) if err.size else 0.0
        report.per_param[p.name or f"param{idx}"] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    report.passed = report.max_rel_err < tolerance
    return report
