"""Attention CNN classifier with hand-written forward/backward passes.

Architecture (single input channel)::

    conv 3x3 (1 -> c1, pad 1) -> ReLU
    -> channel gate  (squeeze-excite, bottleneck c1 -> c1/2 -> c1)
    -> spatial gate  (3x3 conv over [channel-mean, channel-max])
    -> conv 3x3 (c1 -> c2, stride 2, pad 1) -> ReLU
    -> global average pool -> dense (c2 -> K) -> softmax

Parameters live in one flat ``float64`` vector; ``Layout`` records where
each layer's weight and bias sit inside it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from fedsar import kernels
from fedsar.errors import ContractViolation

FORMAT_VERSION = 1
_MAGIC = b"FSRP"
_KIND_CODES = {"conv": 1, "dense": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "dense"
    cin: int
    cout: int
    ksize: int  # 1 for dense layers
    offset: int

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv":
            return (self.cout, self.cin, self.ksize, self.ksize)
        return (self.cout, self.cin)

    @property
    def weight_size(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def size(self) -> int:
        return self.weight_size + self.cout

    @property
    def fans(self) -> tuple[int, int]:
        k2 = self.ksize * self.ksize
        return self.cin * k2, self.cout * k2


@dataclass(frozen=True)
class Architecture:
    num_classes: int = 10
    height: int = 32
    width: int = 32
    c1: int = 8
    c2: int = 16
    reduction: int = 2

    def layout(self) -> tuple[LayerSpec, ...]:
        hidden = max(1, self.c1 // self.reduction)
        rows = [
            ("conv1", "conv", 1, self.c1, 3),
            ("ca_squeeze", "dense", self.c1, hidden, 1),
            ("ca_excite", "dense", hidden, self.c1, 1),
            ("sa_conv", "conv", 2, 1, 3),
            ("conv2", "conv", self.c1, self.c2, 3),
            ("fc", "dense", self.c2, self.num_classes, 1),
        ]
        specs, offset = [], 0
        for name, kind, cin, cout, k in rows:
            spec = LayerSpec(name, kind, cin, cout, k, offset)
            specs.append(spec)
            offset += spec.size
        return tuple(specs)

    @property
    def num_params(self) -> int:
        last = self.layout()[-1]
        return last.offset + last.size


@dataclass
class ModelParams:
    flat: np.ndarray
    arch: Architecture = field(default_factory=Architecture)

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.arch.num_params,):
            raise ContractViolation(
                f"parameter vector has length {self.flat.size}, layout needs {self.arch.num_params}"
            )

    @property
    def layout(self) -> tuple[LayerSpec, ...]:
        return self.arch.layout()

    def copy(self) -> "ModelParams":
        return ModelParams(self.flat.copy(), self.arch)

    def unpack(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Views of each layer's ``(weight, bias)`` into the flat vector."""
        out = {}
        for spec in self.layout:
            w = self.flat[spec.offset:spec.offset + spec.weight_size].reshape(spec.weight_shape)
            b = self.flat[spec.offset + spec.weight_size:spec.offset + spec.size]
            out[spec.name] = (w, b)
        return out


def init_params(arch: Architecture, rng: np.random.Generator, scheme: str = "he") -> ModelParams:
    """Uniform weights with zero biases.

    ``scheme="he"`` draws from ``[-sqrt(6/fan_in), +sqrt(6/fan_in)]``;
    ``scheme="glorot"`` from ``[-sqrt(6/(fan_in+fan_out)), ...]``.
    """
    if scheme not in ("he", "glorot"):
        raise ContractViolation(f"unknown init scheme {scheme!r}")
    flat = np.zeros(arch.num_params)
    for spec in arch.layout():
        fan_in, fan_out = spec.fans
        denom = fan_in if scheme == "he" else fan_in + fan_out
        limit = math.sqrt(6.0 / denom)
        flat[spec.offset:spec.offset + spec.weight_size] = rng.uniform(-limit, limit, spec.weight_size)
    return ModelParams(flat, arch)


def zeros_like_arch(arch: Architecture) -> ModelParams:
    return ModelParams(np.zeros(arch.num_params), arch)


# --------------------------------------------------------------------------
# Serialization: header + little-endian float64 payload


def params_to_bytes(params: ModelParams) -> bytes:
    arch = params.arch
    head = [_MAGIC, struct.pack("<B", FORMAT_VERSION)]
    head.append(struct.pack("<6I", arch.num_classes, arch.height, arch.width, arch.c1, arch.c2, arch.reduction))
    layout = params.layout
    head.append(struct.pack("<I", len(layout)))
    for spec in layout:
        name = spec.name.encode("ascii")
        head.append(struct.pack("<B", len(name)) + name)
        head.append(struct.pack("<B4I", _KIND_CODES[spec.kind], spec.cin, spec.cout, spec.ksize, spec.offset))
    head.append(struct.pack("<Q", params.flat.size))
    return b"".join(head) + params.flat.astype("<f8").tobytes()


def params_from_bytes(blob: bytes) -> ModelParams:
    if blob[:4] != _MAGIC:
        raise ContractViolation("not a parameter snapshot (bad magic)")
    pos = 4
    (version,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    if version != FORMAT_VERSION:
        raise ContractViolation(f"unsupported snapshot version {version}")
    k, h, w, c1, c2, red = struct.unpack_from("<6I", blob, pos)
    pos += 24
    arch = Architecture(k, h, w, c1, c2, red)
    (n_layers,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    specs = []
    for _ in range(n_layers):
        (n,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        name = blob[pos:pos + n].decode("ascii")
        pos += n
        code, cin, cout, ks, off = struct.unpack_from("<B4I", blob, pos)
        pos += 17
        specs.append(LayerSpec(name, _KIND_NAMES[code], cin, cout, ks, off))
    if tuple(specs) != arch.layout():
        raise ContractViolation("snapshot layout does not match its architecture header")
    (d,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    flat = np.frombuffer(blob, dtype="<f8", count=d, offset=pos).astype(np.float64)
    return ModelParams(flat, arch)


# --------------------------------------------------------------------------
# Building blocks


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# Layers with fan-in up to this size (conv1, the spatial gate) use direct
# convolution; wider ones go through im2col and one GEMM.
DIRECT_MAX_FANIN = 18


def _is_direct(w) -> bool:
    return w.shape[1] * w.shape[2] * w.shape[3] <= DIRECT_MAX_FANIN


def _conv_forward(x, w, b, stride, pad):
    """``x`` is channel-major ``(C, B, H, W)``; so is the output.

    Returns the output and the cache needed by :func:`_conv_backward`.
    """
    x = np.ascontiguousarray(x)
    if _is_direct(w):
        return kernels.conv_direct_forward(x, np.ascontiguousarray(w), b, stride, pad), x
    _, B, H, W = x.shape
    cout, _, k, _ = w.shape
    cols = kernels.im2col(x, k, stride, pad)
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = w.reshape(cout, -1) @ cols + b[:, None]
    return out.reshape(cout, B, Ho, Wo), cols


def _conv_backward(dout, cache, w, in_shape, stride, pad, need_input=True):
    dout = np.ascontiguousarray(dout)
    if _is_direct(w):
        return kernels.conv_direct_backward(dout, cache, np.ascontiguousarray(w), stride, pad, need_input)
    cout = dout.shape[0]
    d2 = dout.reshape(cout, -1)
    dw = (d2 @ cache.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dx = None
    if need_input:
        dcols = w.reshape(cout, -1).T @ d2
        cin, B, H, W = in_shape
        dx = kernels.col2im(np.ascontiguousarray(dcols), cin, B, H, W, w.shape[2], stride, pad)
    return dx, dw, db


def attention_forward(x, wc1, bc1, wc2, bc2, ws, bs):
    """Channel gate then spatial gate on channel-major ``x`` of shape
    ``(C, B, H, W)``.

    Returns the gated features (same shape) and a cache for
    :func:`attention_backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ContractViolation(f"attention gates need (C, B, H, W) features, got {x.shape}")
    squeeze = x.mean(axis=(2, 3))  # (C, B)
    u = wc1 @ squeeze + bc1[:, None]
    hidden = np.maximum(u, 0.0)
    cgate = _sigmoid(wc2 @ hidden + bc2[:, None])
    y, maps, argmax = kernels.gate_forward(np.ascontiguousarray(x), np.ascontiguousarray(cgate))
    t, cols = _conv_forward(maps, ws, bs, 1, 1)
    sgate = _sigmoid(t[0])
    out = y * sgate
    cache = (x, squeeze, u, hidden, cgate, y, argmax, maps, cols, sgate, wc1, wc2, ws)
    return out, cache


def attention_backward(dout, cache):
    """Gradients of the gates: ``(dx, dwc1, dbc1, dwc2, dbc2, dws, dbs)``."""
    x, squeeze, u, hidden, cgate, y, argmax, maps, cols, sgate, wc1, wc2, ws = cache
    C, B, H, W = x.shape
    dsgate = (dout * y).sum(axis=0)
    dt = (dsgate * sgate * (1.0 - sgate))[None]
    dmaps, dws, dbs = _conv_backward(dt, cols, ws, maps.shape, 1, 1)
    dx, dcgate = kernels.gate_backward(np.ascontiguousarray(dout), x, sgate, cgate, dmaps, argmax)
    dv = dcgate * cgate * (1.0 - cgate)
    dwc2 = dv @ hidden.T
    dbc2 = dv.sum(axis=1)
    du = (wc2.T @ dv) * (u > 0)
    dwc1 = du @ squeeze.T
    dbc1 = du.sum(axis=1)
    dsq = wc1.T @ du
    dx += dsq[:, :, None, None] / (H * W)
    return dx, dwc1, dbc1, dwc2, dbc2, dws, dbs


def attention_gates(features, params: ModelParams) -> np.ndarray:
    """Apply the model's channel and spatial gates to features of shape
    ``(B, C, H, W)`` or ``(C, H, W)``."""
    feats = np.asarray(features, dtype=np.float64)
    squeeze_dims = feats.ndim == 3
    if squeeze_dims:
        feats = feats[None]
    if feats.ndim != 4:
        raise ContractViolation(f"attention gates need (B, C, H, W) features, got {feats.shape}")
    p = params.unpack()
    out, _ = attention_forward(feats.transpose(1, 0, 2, 3), *p["ca_squeeze"], *p["ca_excite"], *p["sa_conv"])
    out = out.transpose(1, 0, 2, 3)
    return out[0] if squeeze_dims else out


# --------------------------------------------------------------------------
# Full network


def _check_inputs(params: ModelParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    arch = params.arch
    if x.ndim != 3 or x.shape[0] == 0 or x.shape[1:] != (arch.height, arch.width):
        raise ContractViolation(
            f"inputs of shape {x.shape} do not match chip size {(arch.height, arch.width)}"
        )
    return x


def _forward(params: ModelParams, x):
    # Activations are channel-major (C, B, H, W) so each conv is one GEMM.
    p = params.unpack()
    z1, cols1 = _conv_forward(x[None], *p["conv1"], 1, 1)
    a1 = np.maximum(z1, 0.0)
    g, att_cache = attention_forward(a1, *p["ca_squeeze"], *p["ca_excite"], *p["sa_conv"])
    z2, cols2 = _conv_forward(g, *p["conv2"], 2, 1)
    a2 = np.maximum(z2, 0.0)
    pooled = a2.mean(axis=(2, 3))  # (c2, B)
    wf, bf = p["fc"]
    logits = (wf @ pooled + bf[:, None]).T
    cache = (x, p, z1, cols1, a1, att_cache, g, z2, cols2, a2, pooled)
    return logits, cache


def forward(params: ModelParams, inputs) -> np.ndarray:
    """Class probabilities, one row per input chip."""
    logits, _ = _forward(params, _check_inputs(params, inputs))
    return _softmax(logits)


def predict(params: ModelParams, inputs, batch_size: int = 128) -> np.ndarray:
    x = _check_inputs(params, inputs)
    out = [forward(params, x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def backward(params: ModelParams, inputs, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the flat parameters."""
    x = _check_inputs(params, inputs)
    y = np.asarray(labels, dtype=np.int64).ravel()
    if y.shape[0] != x.shape[0]:
        raise ContractViolation(f"{x.shape[0]} inputs but {y.shape[0]} labels")
    if y.min() < 0 or y.max() >= params.arch.num_classes:
        raise ContractViolation("label outside [0, K)")
    logits, cache = _forward(params, x)
    x, p, z1, cols1, a1, att_cache, g, z2, cols2, a2, pooled = cache
    B = x.shape[0]
    probs = _softmax(logits)
    rows = np.arange(B)
    loss = float(-np.mean(np.log(probs[rows, y])))

    grads = {}
    dlogits = probs.copy()
    dlogits[rows, y] -= 1.0
    dlogits /= B
    wf, _ = p["fc"]
    grads["fc"] = (dlogits.T @ pooled.T, dlogits.sum(axis=0))
    dpooled = wf.T @ dlogits.T  # (c2, B)
    hw2 = a2.shape[2] * a2.shape[3]
    dz2 = (dpooled / hw2)[:, :, None, None] * (z2 > 0)
    dg, dw2, db2 = _conv_backward(dz2, cols2, p["conv2"][0], g.shape, 2, 1)
    grads["conv2"] = (dw2, db2)
    da1, dwc1, dbc1, dwc2, dbc2, dws, dbs = attention_backward(dg, att_cache)
    grads["ca_squeeze"] = (dwc1, dbc1)
    grads["ca_excite"] = (dwc2, dbc2)
    grads["sa_conv"] = (dws, dbs)
    dz1 = da1 * (z1 > 0)
    _, dw1, db1 = _conv_backward(dz1, cols1, p["conv1"][0], (1,) + x.shape, 1, 1, need_input=False)
    grads["conv1"] = (dw1, db1)

    flat = np.empty_like(params.flat)
    for spec in params.layout:
        dw, db = grads[spec.name]
        flat[spec.offset:spec.offset + spec.weight_size] = dw.ravel()
        flat[spec.offset + spec.weight_size:spec.offset + spec.size] = db
    return loss, flat


# --------------------------------------------------------------------------
# Optimizer


@dataclass
class OptState:
    buffer: np.ndarray
    round_index: int = 0
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_rounds: int = 200

    @classmethod
    def fresh(cls, d: int, **kwargs) -> "OptState":
        return cls(np.zeros(d), **kwargs)

    def learning_rate(self) -> float:
        """Cosine-decayed step size for the current round."""
        r = min(self.round_index, self.total_rounds)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * r / self.total_rounds))


def sgd_step(params: ModelParams, gradient, opt: OptState) -> tuple[ModelParams, OptState]:
    grad = np.asarray(gradient, dtype=np.float64)
    if grad.shape != params.flat.shape or opt.buffer.shape != params.flat.shape:
        raise ContractViolation("gradient, buffer and parameters must have the same length")
    buffer = opt.momentum * opt.buffer + grad + opt.weight_decay * params.flat
    new_flat = params.flat - opt.learning_rate() * buffer
    return ModelParams(new_flat, params.arch), replace(opt, buffer=buffer)
