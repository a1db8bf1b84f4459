"""Shared-encoder network with detector, descriptor and semantic heads.

The encoder is 4 double_conv blocks (2x conv3x3-BN-ReLU each) with three
interleaved 2x2 maxpools, so features live on the H/8 x W/8 cell grid.
Heads are conv3x3-BN-ReLU followed by conv1x1: the detector emits 65
channels (64 in-cell positions + dustbin), the descriptor D channels and
the semantic head one channel per class. The semantic head exists only
for training; inference shapes are identical with or without it.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import KeypointSet

Array = np.ndarray

_MAGIC = b"SSPC"
_VERSION = 1

CELL = 8
DUSTBIN = 64


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class ModelConfig:
    c_enc: int = 64
    descriptor_dim: int = 64
    num_classes: int = 5
    # desk-scale schedule; paper_scale() restores the reference widths
    widths: tuple = (16, 16, 32, 32)
    head_hidden: int = 128
    with_semantic: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.c_enc < 8 or self.descriptor_dim < 8:
            raise ConfigError("c_enc and descriptor_dim must be >= 8")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if len(self.widths) != 4:
            raise ConfigError("widths schedule must have 4 entries")

    @classmethod
    def desk(cls, with_semantic=True):
        return cls(with_semantic=with_semantic)

    @classmethod
    def paper_scale(cls, with_semantic=True):
        return cls(c_enc=256, descriptor_dim=256, num_classes=5,
                   widths=(64, 64, 128, 128), head_hidden=256,
                   with_semantic=with_semantic)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)          # name -> ad.Tensor
    bn_states: dict = field(default_factory=dict)        # name -> BatchNormState

    def trainable(self):
        return self.tensors

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self):
        out = ModelParams(self.config)
        out.tensors = {k: ad.Tensor(v.data.copy(), requires_grad=True, name=k)
                       for k, v in self.tensors.items()}
        out.bn_states = {k: v.copy() for k, v in self.bn_states.items()}
        return out

    def encoder_names(self):
        return [k for k in self.tensors if k.startswith("enc.")]


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _add_conv_block(params, rng, prefix, cin, cout, ksize=3):
    w = _kaiming_uniform(rng, (ksize, ksize, cin, cout), fan_in=ksize * ksize * cin)
    params.tensors[f"{prefix}.w"] = ad.Tensor(w, requires_grad=True, name=f"{prefix}.w")
    params.tensors[f"{prefix}.b"] = ad.Tensor(
        np.zeros(cout, dtype=np.float32), requires_grad=True, name=f"{prefix}.b")


def _add_bn(params, prefix, channels):
    params.tensors[f"{prefix}.gamma"] = ad.Tensor(
        np.ones(channels, dtype=np.float32), requires_grad=True, name=f"{prefix}.gamma")
    params.tensors[f"{prefix}.beta"] = ad.Tensor(
        np.zeros(channels, dtype=np.float32), requires_grad=True, name=f"{prefix}.beta")
    params.bn_states[prefix] = ad.BatchNormState.create(channels)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Kaiming-uniform conv weights, zero biases, BN scale 1 / shift 0."""
    params = ModelParams(config)
    w1, w2, w3, w4 = config.widths
    plan = [("enc.b1c1", 1, w1), ("enc.b1c2", w1, w1),
            ("enc.b2c1", w1, w2), ("enc.b2c2", w2, w2),
            ("enc.b3c1", w2, w3), ("enc.b3c2", w3, w3),
            ("enc.b4c1", w3, w4), ("enc.b4c2", w4, config.c_enc)]
    for name, cin, cout in plan:
        _add_conv_block(params, rng, name, cin, cout)
        _add_bn(params, name + ".bn", cout)
    heads = [("det", 65), ("desc", config.descriptor_dim)]
    if config.with_semantic:
        heads.append(("sem", config.num_classes))
    for head, cout in heads:
        _add_conv_block(params, rng, f"{head}.c1", config.c_enc, config.head_hidden)
        _add_bn(params, f"{head}.c1.bn", config.head_hidden)
        _add_conv_block(params, rng, f"{head}.c2", config.head_hidden, cout, ksize=1)
    return params


def _conv_bn_relu(x, params, prefix, mode):
    t = params.tensors
    y = ad.conv2d(x, t[f"{prefix}.w"], t[f"{prefix}.b"])
    y = ad.batchnorm(y, t[f"{prefix}.bn.gamma"], t[f"{prefix}.bn.beta"],
                     params.bn_states[f"{prefix}.bn"], mode=mode)
    return ad.relu(y)


def encoder_forward(image, params: ModelParams, mode="train"):
    """image: Tensor or array (N, H, W, 1), H and W divisible by 8."""
    x = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    n, h, w, c = x.shape
    if h % 8 or w % 8:
        raise ad.ShapeMismatch(f"encoder: spatial dims must divide 8, got {h}x{w}")
    if c != 1:
        raise ad.ShapeMismatch(f"encoder: input dimension 3 must be 1, got {c}")
    x = _conv_bn_relu(x, params, "enc.b1c1", mode)
    x = _conv_bn_relu(x, params, "enc.b1c2", mode)
    x = ad.maxpool2(x)
    x = _conv_bn_relu(x, params, "enc.b2c1", mode)
    x = _conv_bn_relu(x, params, "enc.b2c2", mode)
    x = ad.maxpool2(x)
    x = _conv_bn_relu(x, params, "enc.b3c1", mode)
    x = _conv_bn_relu(x, params, "enc.b3c2", mode)
    x = ad.maxpool2(x)
    x = _conv_bn_relu(x, params, "enc.b4c1", mode)
    x = _conv_bn_relu(x, params, "enc.b4c2", mode)
    return x


def _head_forward(features, params, head, mode):
    t = params.tensors
    x = _conv_bn_relu(features, params, f"{head}.c1", mode)
    return ad.conv2d(x, t[f"{head}.c2.w"], t[f"{head}.c2.b"])


def detector_head(features, params: ModelParams, mode="train"):
    return _head_forward(features, params, "det", mode)


def descriptor_head(features, params: ModelParams, mode="train"):
    """Raw coarse descriptors; consumers normalize."""
    return _head_forward(features, params, "desc", mode)


def semantic_head(features, params: ModelParams, mode="train"):
    if not params.config.with_semantic:
        raise ConfigError("semantic head is disabled in this model config")
    return _head_forward(features, params, "sem", mode)


def extract_heatmap(cell_logits) -> Array:
    """Cell logits (N, H/8, W/8, 65) -> full-resolution scores (N, H, W).

    Softmax over the 65 channels, drop the dustbin, spread each cell's 64
    values onto its 8x8 pixel block (channel k -> in-cell pixel (k//8, k%8)).
    """
    logits = cell_logits.data if isinstance(cell_logits, ad.Tensor) else np.asarray(cell_logits)
    n, hc, wc, ch = logits.shape
    if ch != DUSTBIN + 1:
        raise ad.ShapeMismatch(f"extract_heatmap: dimension 3 must be 65, got {ch}")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    cells = p[..., :DUSTBIN].reshape(n, hc, wc, CELL, CELL)
    return cells.transpose(0, 1, 3, 2, 4).reshape(n, hc * CELL, wc * CELL)


def _keys_cubic_weights(t: Array) -> Array:
    """Keys convolution kernel, a = -0.5, for offsets t in [-2, 2]."""
    a = -0.5
    at = np.abs(t)
    w = np.where(at < 1,
                 (a + 2) * at ** 3 - (a + 3) * at ** 2 + 1,
                 np.where(at < 2,
                          a * (at ** 3 - 5 * at ** 2 + 8 * at - 4),
                          0.0))
    return w


def sample_descriptors(coarse, keypoints: KeypointSet):
    """Bicubic interpolation of the coarse map at cell-grid coordinates of
    each keypoint ((pixel - 3.5) / 8, so a cell-center keypoint lands on a
    grid node), then per-keypoint L2 normalization.

    Returns (descriptors (K, D) float32, count of degenerate descriptors
    that were replaced by the first basis vector).
    """
    cmap = coarse.data if isinstance(coarse, ad.Tensor) else np.asarray(coarse)
    if cmap.ndim == 4:
        if cmap.shape[0] != 1:
            raise ad.ShapeMismatch("sample_descriptors expects a single image map")
        cmap = cmap[0]
    hc, wc, d = cmap.shape
    k = len(keypoints)
    if k == 0:
        return np.zeros((0, d), dtype=np.float32), 0
    gy = (keypoints.rows - (CELL - 1) / 2.0) / CELL
    gx = (keypoints.cols - (CELL - 1) / 2.0) / CELL
    y0 = np.floor(gy).astype(int)
    x0 = np.floor(gx).astype(int)
    out = np.zeros((k, d), dtype=np.float64)
    wsum = np.zeros(k, dtype=np.float64)
    for dy in range(-1, 3):
        wy = _keys_cubic_weights(gy - (y0 + dy))
        yi = np.clip(y0 + dy, 0, hc - 1)
        for dx in range(-1, 3):
            wx = _keys_cubic_weights(gx - (x0 + dx))
            xi = np.clip(x0 + dx, 0, wc - 1)
            wgt = wy * wx
            out += wgt[:, None] * cmap[yi, xi]
            wsum += wgt
    # border clamping can leave the kernel slightly unnormalized
    out /= np.maximum(wsum, 1e-12)[:, None]
    norms = np.sqrt((out ** 2).sum(axis=1))
    degenerate = norms < 1e-12
    n_degenerate = int(degenerate.sum())
    if n_degenerate:
        out[degenerate] = 0.0
        out[degenerate, 0] = 1.0
        norms[degenerate] = 1.0
    return (out / norms[:, None]).astype(np.float32), n_degenerate


# ---------------------------------------------------------------------------
# Checkpoint format (magic "SSPC", little-endian)
# ---------------------------------------------------------------------------

def _serialize_tensor(fh, name, arr):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.astype("<f4").tobytes())


def save_checkpoint(params: ModelParams, path):
    cfg = params.config
    entries = [(name, t.data) for name, t in sorted(params.tensors.items())]
    for name, st in sorted(params.bn_states.items()):
        entries.append((name + ".running_mean", st.mean))
        entries.append((name + ".running_var", st.var))
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<IIII", cfg.c_enc, cfg.descriptor_dim,
                             cfg.num_classes, cfg.head_hidden))
        fh.write(struct.pack("<B", 1 if cfg.with_semantic else 0))
        fh.write(struct.pack("<B", len(cfg.widths)))
        fh.write(struct.pack(f"<{len(cfg.widths)}I", *cfg.widths))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _serialize_tensor(fh, name, arr)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        buf = fh.read()
    fh = io.BytesIO(buf)
    if fh.read(4) != _MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    (version,) = struct.unpack("<H", fh.read(2))
    if version != _VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    c_enc, d, c, hidden = struct.unpack("<IIII", fh.read(16))
    (sem_flag,) = struct.unpack("<B", fh.read(1))
    (nw,) = struct.unpack("<B", fh.read(1))
    widths = struct.unpack(f"<{nw}I", fh.read(4 * nw))
    config = ModelConfig(c_enc=c_enc, descriptor_dim=d, num_classes=c,
                         widths=widths, head_hidden=hidden,
                         with_semantic=bool(sem_flag))
    (count,) = struct.unpack("<I", fh.read(4))
    params = ModelParams(config)
    raw_bn = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape).copy()
        if name.endswith(".running_mean") or name.endswith(".running_var"):
            raw_bn[name] = arr
        else:
            params.tensors[name] = ad.Tensor(arr, requires_grad=True, name=name)
    for name, arr in raw_bn.items():
        if name.endswith(".running_mean"):
            base = name[: -len(".running_mean")]
            st = params.bn_states.setdefault(base, ad.BatchNormState.create(len(arr)))
            st.mean = arr
        else:
            base = name[: -len(".running_var")]
            st = params.bn_states.setdefault(base, ad.BatchNormState.create(len(arr)))
            st.var = arr
    return params
