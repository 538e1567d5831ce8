"""Convolutional patch classifier on 2.5D patches: forward/backward passes in
numpy, SGD-with-momentum training with inverted dropout, and finite-difference
gradient verification.

Activations are tanh; the head is a 2-way softmax. Training runs in single
precision, gradient checks in double.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volume import INTENSITY_MAX, Volume3D

logger = logging.getLogger(__name__)

MAGIC = b"CSNN"
VERSION = 1


class NumericError(RuntimeError):
    """Raised when training diverges (non-finite loss)."""


ARCH_PRESETS = {
    # test-scale default: 2 conv + 1 fully-connected on 32x32 inputs
    "desk": {
        "input_size": 32,
        "layers": [
            {"type": "conv", "filters": 8, "kernel": 5},
            {"type": "tanh"},
            {"type": "pool", "size": 2},
            {"type": "conv", "filters": 16, "kernel": 5},
            {"type": "tanh"},
            {"type": "pool", "size": 2},
            {"type": "dropout", "rate": 0.5},
            {"type": "fc", "units": 2},
        ],
    },
    # five conv layers with max-pooling, two fully-connected layers with dropout
    "paper": {
        "input_size": 64,
        "layers": [
            {"type": "conv", "filters": 32, "kernel": 5},
            {"type": "tanh"},
            {"type": "pool", "size": 2},
            {"type": "conv", "filters": 32, "kernel": 5},
            {"type": "tanh"},
            {"type": "pool", "size": 2},
            {"type": "conv", "filters": 64, "kernel": 3},
            {"type": "tanh"},
            {"type": "conv", "filters": 64, "kernel": 3},
            {"type": "tanh"},
            {"type": "conv", "filters": 64, "kernel": 3},
            {"type": "tanh"},
            {"type": "pool", "size": 2},
            {"type": "fc", "units": 256},
            {"type": "tanh"},
            {"type": "dropout", "rate": 0.5},
            {"type": "fc", "units": 2},
        ],
    },
}


# ---------------------------------------------------------------------------
# Layers. Each stores its parameters, gradients and forward cache.
# ---------------------------------------------------------------------------

class ConvLayer:
    def __init__(self, in_ch, filters, kernel, rng, dtype):
        fan_in = in_ch * kernel * kernel
        self.w = (rng.standard_normal((filters, in_ch, kernel, kernel)) / np.sqrt(fan_in)).astype(dtype)
        self.b = np.zeros(filters, dtype=dtype)
        self.kernel = kernel

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x, train, rng):
        k = self.kernel
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        self._win = win
        return np.einsum("bchwij,fcij->bfhw", win, self.w, optimize=True) + self.b[None, :, None, None]

    def backward(self, dout):
        k = self.kernel
        dw = np.einsum("bchwij,bfhw->fcij", self._win, dout, optimize=True)
        db = dout.sum(axis=(0, 2, 3))
        pad = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        pwin = sliding_window_view(pad, (k, k), axis=(2, 3))
        dx = np.einsum("bfhwij,fcij->bchw", pwin, self.w[:, :, ::-1, ::-1], optimize=True)
        self.grads = [dw, db]
        return dx


class TanhLayer:
    params = []

    def forward(self, x, train, rng):
        self._out = np.tanh(x)
        return self._out

    def backward(self, dout):
        return dout * (1.0 - self._out * self._out)


class PoolLayer:
    """2x2 max pooling with stride 2; trailing odd rows/cols are dropped."""

    params = []

    def __init__(self, size=2):
        if size != 2:
            raise ValueError("only 2x2 pooling is supported")

    def forward(self, x, train, rng):
        b, c, h, w = x.shape
        h2, w2 = h // 2 * 2, w // 2 * 2
        v = x[:, :, :h2, :w2].reshape(b, c, h2 // 2, 2, w2 // 2, 2)
        v = v.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2 // 2, w2 // 2, 4)
        self._arg = v.argmax(axis=4)  # first max wins ties
        self._xshape = x.shape
        return np.take_along_axis(v, self._arg[..., None], axis=4)[..., 0]

    def backward(self, dout):
        b, c, h, w = self._xshape
        h2, w2 = h // 2 * 2, w // 2 * 2
        dv = np.zeros((b, c, h2 // 2, w2 // 2, 4), dtype=dout.dtype)
        np.put_along_axis(dv, self._arg[..., None], dout[..., None], axis=4)
        dv = dv.reshape(b, c, h2 // 2, w2 // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(self._xshape, dtype=dout.dtype)
        dx[:, :, :h2, :w2] = dv.reshape(b, c, h2, w2)
        return dx


class DropoutLayer:
    """Inverted dropout: train-mode scaling by 1/(1-rate), identity at eval."""

    params = []

    def __init__(self, rate=0.5):
        self.rate = rate

    def forward(self, x, train, rng):
        if not train:
            self._mask = None
            return x
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask.astype(x.dtype)

    def backward(self, dout):
        if self._mask is None:
            return dout
        return dout * self._mask.astype(dout.dtype)


class DenseLayer:
    def __init__(self, in_features, units, rng, dtype):
        self.w = (rng.standard_normal((units, in_features)) / np.sqrt(in_features)).astype(dtype)
        self.b = np.zeros(units, dtype=dtype)

    @property
    def params(self):
        return [self.w, self.b]

    def forward(self, x, train, rng):
        self._xshape = x.shape
        self._x = x.reshape(len(x), -1)
        return self._x @ self.w.T + self.b

    def backward(self, dout):
        dw = dout.T @ self._x
        db = dout.sum(axis=0)
        self.grads = [dw, db]
        return (dout @ self.w).reshape(self._xshape)


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Model.
# ---------------------------------------------------------------------------

@dataclass
class ConvNetModel:
    arch: dict
    layers: list
    seed: int
    dtype: type = np.float32
    loss_history: list = field(default_factory=list)

    @property
    def input_size(self) -> int:
        return self.arch["input_size"]


def _resolve_arch(arch) -> dict:
    if isinstance(arch, str):
        if arch not in ARCH_PRESETS:
            raise ValueError(f"unknown architecture preset {arch!r}")
        return ARCH_PRESETS[arch]
    return arch


def build_model(arch="desk", seed: int = 0, dtype=np.float32) -> ConvNetModel:
    """Instantiate layers and statically validate the shape chain."""
    arch = _resolve_arch(arch)
    rng = np.random.default_rng(seed)
    s = arch["input_size"]
    shape = (3, s, s)  # channels = axial/coronal/sagittal planes
    layers = []
    flat = None
    for i, spec in enumerate(arch["layers"]):
        kind = spec["type"]
        if flat is not None and kind != "fc" and kind not in ("dropout", "tanh"):
            raise ValueError(f"layer {i}: {kind} after flattening fc")
        if kind == "conv":
            c, h, w = shape
            k = spec["kernel"]
            if h < k or w < k:
                raise ValueError(f"layer {i}: {h}x{w} input smaller than {k}x{k} kernel")
            layers.append(ConvLayer(c, spec["filters"], k, rng, dtype))
            shape = (spec["filters"], h - k + 1, w - k + 1)
        elif kind == "tanh":
            layers.append(TanhLayer())
        elif kind == "pool":
            c, h, w = shape
            if h < 2 or w < 2:
                raise ValueError(f"layer {i}: {h}x{w} input too small to pool")
            layers.append(PoolLayer(spec.get("size", 2)))
            shape = (c, h // 2, w // 2)
        elif kind == "dropout":
            layers.append(DropoutLayer(spec.get("rate", 0.5)))
        elif kind == "fc":
            n_in = flat if flat is not None else int(np.prod(shape))
            layers.append(DenseLayer(n_in, spec["units"], rng, dtype))
            flat = spec["units"]
            last_fc = layers[-1]
        else:
            raise ValueError(f"unknown layer type {kind!r}")
    if flat != 2:
        raise ValueError("final layer must be a 2-way fully-connected softmax")
    # zero-init the classifier head: the untrained net outputs (0.5, 0.5)
    last_fc.w[...] = 0
    last_fc.b[...] = 0
    return ConvNetModel(arch=arch, layers=layers, seed=seed, dtype=dtype)


def forward_batch(model: ConvNetModel, x: np.ndarray, train_mode: bool = False,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """(B, 2) class probabilities; dropout only applies in train mode."""
    if train_mode and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")
    x = np.asarray(x, dtype=model.dtype)
    expect = (3, model.input_size, model.input_size)
    if x.shape[1:] != expect:
        raise ValueError(f"expected patches of shape {expect}, got {x.shape[1:]}")
    for layer in model.layers:
        x = layer.forward(x, train_mode, rng)
    return _softmax(x)


def forward(model: ConvNetModel, patch, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Probability pair (non-target, target) for a single patch."""
    planes = patch.planes if isinstance(patch, Patch25D) else np.asarray(patch)
    return forward_batch(model, planes[None], train_mode, rng)[0]


def _backward_batch(model: ConvNetModel, probs: np.ndarray, labels: np.ndarray) -> None:
    b = len(labels)
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    grad = dlogits.astype(model.dtype) / b
    for layer in reversed(model.layers):
        grad = layer.backward(grad)


def _loss(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(-np.log(np.maximum(p, 1e-300)).mean())


# ---------------------------------------------------------------------------
# 2.5D patches.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Patch25D:
    """Axial, coronal and sagittal planes through one voxel, rescaled to [0,1]."""

    planes: np.ndarray  # (3, s, s) float32
    center: tuple[int, int, int]  # (z, y, x)
    clamped: bool


def extract_25d_patch(v: Volume3D, voxel: tuple[int, int, int], s: int = 64) -> Patch25D:
    """Three s x s planes centered on (z, y, x); borders are edge-clamped."""
    nz, ny, nx = v.values.shape
    z, y, x = voxel
    if not (0 <= z < nz and 0 <= y < ny and 0 <= x < nx):
        raise ValueError(f"voxel {voxel} outside volume of shape {v.values.shape}")
    half = s // 2
    offs = np.arange(s) - half
    iz, iy, ix = z + offs, y + offs, x + offs
    clamped = bool((iz[0] < 0 or iz[-1] >= nz) or (iy[0] < 0 or iy[-1] >= ny)
                   or (ix[0] < 0 or ix[-1] >= nx))
    cz = np.clip(iz, 0, nz - 1)
    cy = np.clip(iy, 0, ny - 1)
    cx = np.clip(ix, 0, nx - 1)
    axial = v.values[z][np.ix_(cy, cx)]
    coronal = v.values[:, y, :][np.ix_(cz, cx)]
    sagittal = v.values[:, :, x][np.ix_(cz, cy)]
    planes = np.stack([axial, coronal, sagittal]).astype(np.float32) / INTENSITY_MAX
    return Patch25D(planes=planes, center=(z, y, x), clamped=clamped)


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CnnHyper:
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 32
    epochs: int = 20
    seed: int = 0


def train_cnn(patches, labels, hyper: CnnHyper = CnnHyper(), arch="desk") -> ConvNetModel:
    """Mini-batch SGD with momentum on the cross-entropy loss.

    Deterministic for a fixed seed (init, shuffling and dropout masks all
    derive from it). Mean loss per epoch lands in model.loss_history.
    """
    X = np.stack([p.planes if isinstance(p, Patch25D) else p for p in patches]) \
        if not isinstance(patches, np.ndarray) else patches
    X = X.astype(np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) != len(y) or len(X) == 0:
        raise ValueError("patches and labels must be non-empty and congruent")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    model = build_model(arch, seed=hyper.seed, dtype=np.float32)
    rng = np.random.default_rng(hyper.seed + 1)
    velocity = [np.zeros_like(p) for layer in model.layers for p in layer.params]
    n = len(X)
    for epoch in range(hyper.epochs):
        perm = rng.permutation(n)
        losses = []
        for i in range(0, n, hyper.batch):
            idx = perm[i:i + hyper.batch]
            probs = forward_batch(model, X[idx], train_mode=True, rng=rng)
            losses.append(_loss(probs, y[idx]))
            _backward_batch(model, probs, y[idx])
            j = 0
            for layer in model.layers:
                for p, g in zip(layer.params, layer.grads if layer.params else []):
                    velocity[j] = hyper.momentum * velocity[j] - hyper.lr * g
                    p += velocity[j]
                    j += 1
        epoch_loss = float(np.mean(losses))
        model.loss_history.append(epoch_loss)
        logger.info("epoch %d: loss %.4f", epoch + 1, epoch_loss)
        if not np.isfinite(epoch_loss):
            raise NumericError(f"training diverged (non-finite loss) at epoch {epoch + 1}")
    return model


def training_accuracy(model: ConvNetModel, patches: np.ndarray, labels) -> float:
    probs = forward_batch(model, patches)
    return float(((probs[:, 1] >= 0.5).astype(int) == np.asarray(labels)).mean())


# ---------------------------------------------------------------------------
# Gradient verification.
# ---------------------------------------------------------------------------

def model_to_float64(model: ConvNetModel) -> ConvNetModel:
    clone = build_model(model.arch, seed=model.seed, dtype=np.float64)
    for src, dst in zip(model.layers, clone.layers):
        for ps, pd in zip(src.params, dst.params):
            pd[...] = ps.astype(np.float64)
    return clone


def numeric_gradient(model: ConvNetModel, x: np.ndarray, label: int,
                     layer_idx: int, param_idx: int, flat_idx: int, eps: float) -> float:
    """Central-difference derivative of the eval-mode loss for one parameter."""
    p = model.layers[layer_idx].params[param_idx]
    orig = p.flat[flat_idx]
    p.flat[flat_idx] = orig + eps
    lp = _loss(forward_batch(model, x), np.array([label]))
    p.flat[flat_idx] = orig - eps
    lm = _loss(forward_batch(model, x), np.array([label]))
    p.flat[flat_idx] = orig
    return (lp - lm) / (2.0 * eps)


def gradient_check(model: ConvNetModel, patch, label: int, eps: float = 1e-4,
                   samples_per_layer: int = 200, seed: int = 0) -> dict:
    """Max relative error between analytic and central-difference gradients.

    Runs in double precision with dropout disabled; checks up to
    samples_per_layer randomly chosen parameters per parametric layer.
    Relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    planes = patch.planes if isinstance(patch, Patch25D) else np.asarray(patch)
    m64 = model_to_float64(model)
    x = planes[None].astype(np.float64)
    probs = forward_batch(m64, x)
    _backward_batch(m64, probs, np.array([label]))
    analytic = [[g.copy() for g in (layer.grads if layer.params else [])]
                for layer in m64.layers]
    rng = np.random.default_rng(seed)
    per_layer = {}
    worst = 0.0
    for li, layer in enumerate(m64.layers):
        if not layer.params:
            continue
        layer_worst = 0.0
        for pi, p in enumerate(layer.params):
            k = min(p.size, samples_per_layer)
            flat = rng.choice(p.size, size=k, replace=False)
            for fi in flat:
                a = analytic[li][pi].flat[fi]
                n = numeric_gradient(m64, x, label, li, pi, int(fi), eps)
                err = abs(a - n) / max(abs(a), abs(n), 1e-8)
                layer_worst = max(layer_worst, err)
        per_layer[f"layer{li}_{type(layer).__name__}"] = layer_worst
        worst = max(worst, layer_worst)
    return {"max_relative_error": worst, "per_layer": per_layer}


# ---------------------------------------------------------------------------
# Serialization: CSNN magic, JSON descriptor, f32le parameter blobs.
# ---------------------------------------------------------------------------

class CnnFormatError(ValueError):
    pass


def serialize_cnn(model: ConvNetModel) -> bytes:
    doc = {"arch": model.arch, "seed": model.seed, "loss_history": model.loss_history}
    blob = json.dumps(doc, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for layer in model.layers:
        for p in layer.params:
            parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize_cnn(data: bytes) -> ConvNetModel:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CnnFormatError("bad magic: not a convnet model")
    version, blob_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CnnFormatError(f"unsupported version {version}")
    off = 12
    doc = json.loads(data[off:off + blob_len])
    off += blob_len
    model = build_model(doc["arch"], seed=doc["seed"], dtype=np.float32)
    model.loss_history = doc.get("loss_history", [])
    for layer in model.layers:
        for p in layer.params:
            nbytes = p.size * 4
            if off + nbytes > len(data):
                raise CnnFormatError("truncated parameter blob")
            p[...] = np.frombuffer(data[off:off + nbytes], dtype="<f4").reshape(p.shape)
            off += nbytes
    if off != len(data):
        raise CnnFormatError("trailing bytes after parameters")
    return model


def save_cnn(model: ConvNetModel, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_cnn(model))


def load_cnn(path) -> ConvNetModel:
    with open(path, "rb") as f:
        return deserialize_cnn(f.read())
