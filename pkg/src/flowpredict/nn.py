"""Minimal layer kit: conv, LRN, max-pool, fully connected, ReLU, spatial softmax.

Every layer has a numpy forward and backward pass over ``(batch, channels,
height, width)`` arrays. A :class:`Network` chains layers described by
:class:`LayerSpec` records and keeps its learnable tensors in a separate
:class:`NetworkParams` container so that the same graph can be evaluated
with several parameter sets (gradient checks, worker copies).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

CONV = "Conv"
LRN = "LRN"
MAXPOOL = "MaxPool"
FC = "FullyConnected"
RELU = "ReLU"
SOFTMAX = "SpatialSoftmax"
KINDS = (CONV, LRN, MAXPOOL, FC, RELU, SOFTMAX)

NET_MAGIC = b"FCNET1\0\0"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernels: int = 0
    size: int = 0
    stride: int = 1
    pad: int = 0
    n: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k_bias: float = 1.0
    neurons: int = 0
    classes: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV:
            if self.kernels < 1 or self.size < 1 or self.stride < 1 or self.pad < 0:
                raise ValueError(f"invalid conv parameters: {self}")
        elif self.kind == MAXPOOL:
            if self.size < 1 or self.stride < 1:
                raise ValueError(f"invalid pool parameters: {self}")
        elif self.kind == LRN:
            if self.n < 1 or self.n % 2 == 0:
                raise ValueError("LRN window must be odd and >= 1")
            if self.k_bias <= 0:
                raise ValueError("LRN k_bias must be positive")
        elif self.kind == FC:
            if self.neurons < 1:
                raise ValueError("fully connected layer needs >= 1 neuron")
        elif self.kind == SOFTMAX:
            if self.classes < 1:
                raise ValueError("spatial softmax needs >= 1 class")

    def __str__(self):
        if self.kind == CONV:
            return f"C({self.kernels},{self.size},s{self.stride},p{self.pad})"
        if self.kind == MAXPOOL:
            return f"MP({self.size},s{self.stride})"
        if self.kind == FC:
            return f"F({self.neurons})"
        return self.kind


def conv(kernels, size, stride=1, pad=0):
    return LayerSpec(CONV, kernels=kernels, size=size, stride=stride, pad=pad)


def lrn(n=5, alpha=1e-4, beta=0.75, k_bias=1.0):
    return LayerSpec(LRN, n=n, alpha=alpha, beta=beta, k_bias=k_bias)


def maxpool(size=3, stride=2):
    return LayerSpec(MAXPOOL, size=size, stride=stride)


def fc(neurons):
    return LayerSpec(FC, neurons=neurons)


def relu():
    return LayerSpec(RELU)


def spatial_softmax(classes):
    return LayerSpec(SOFTMAX, classes=classes)


def out_size(n, size, stride, pad=0):
    return (n + 2 * pad - size) // stride + 1


# ---------------------------------------------------------------------------
# layer math
# ---------------------------------------------------------------------------

def conv_forward(x, w, b, stride=1, pad=0):
    """Cross-correlate ``x`` (B, Cin, H, W) with ``w`` (K, Cin, s, s).

    Returns the output and a cache for :func:`conv_backward`.
    """
    bsz, cin, h, wd = x.shape
    k, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv expects {wcin} input channels, got {cin}")
    ho, wo = out_size(h, kh, stride, pad), out_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output would be {ho}x{wo}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xt = xp.transpose(1, 0, 2, 3)
    # columns laid out as (Cin*kh*kw, B*Ho*Wo) so both GEMMs run without transposed copies
    cols = np.empty((cin, kh, kw, bsz, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * (ho - 1) + 1:stride,
                               j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(cin * kh * kw, bsz * ho * wo)
    out = w.reshape(k, -1) @ cols + b[:, None]
    out = out.reshape(k, bsz, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), (x.shape, cols, w, stride, pad)


def conv_backward(dout, cache):
    xshape, cols, w, stride, pad = cache
    bsz, cin, h, wd = xshape
    k, _, kh, kw = w.shape
    ho, wo = dout.shape[2:]
    d2 = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(k, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dcols = (w.reshape(k, -1).T @ d2).reshape(cin, kh, kw, bsz, ho, wo)
    dxp = np.zeros((cin, bsz, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx.transpose(1, 0, 2, 3)), dw, db


def _channel_window_sum(a, n):
    """Sum over a clipped window of ``n`` neighbouring channels (axis 1)."""
    half = n // 2
    c = a.shape[1]
    out = np.zeros_like(a)
    for off in range(-half, half + 1):
        lo, hi = max(0, -off), min(c, c - off)
        if lo < hi:
            out[:, lo:hi] += a[:, lo + off:hi + off]
    return out


def lrn_forward(x, n=5, alpha=1e-4, beta=0.75, k_bias=1.0):
    scale = k_bias + (alpha / n) * _channel_window_sum(x * x, n)
    out = x * scale ** (-beta)
    return out, (x, scale, n, alpha, beta)


def lrn_backward(dout, cache):
    x, scale, n, alpha, beta = cache
    t = dout * x * scale ** (-beta - 1.0)
    # the clipped window is symmetric, so the adjoint is the same window sum
    return dout * scale ** (-beta) - (2.0 * alpha * beta / n) * x * _channel_window_sum(t, n)


def maxpool_forward(x, size=3, stride=2):
    """Max over ``size``x``size`` windows.

    The returned argmax holds, per output cell, the flat offset
    ``i * size + j`` of the winning element inside its window (first maximum
    wins).
    """
    bsz, c, h, wd = x.shape
    ho, wo = out_size(h, size, stride), out_size(wd, size, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool output would be {ho}x{wo}")
    views = [x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
             for i in range(size) for j in range(size)]
    best = views[0].copy()
    for v in views[1:]:
        np.maximum(best, v, out=best)
    arg = np.zeros(best.shape, dtype=np.int64)
    # scan backwards so the lowest matching offset wins
    for k in range(len(views) - 1, 0, -1):
        arg = np.where(views[k] == best, k, arg)
    return best, arg


def maxpool_backward(dout, arg, xshape, size=3, stride=2):
    ho, wo = dout.shape[2:]
    dx = np.zeros(xshape, dtype=dout.dtype)
    for i in range(size):
        for j in range(size):
            hit = arg == i * size + j
            if hit.any():
                dx[:, :, i:i + stride * (ho - 1) + 1:stride,
                   j:j + stride * (wo - 1) + 1:stride] += np.where(hit, dout, 0)
    return dx


def fc_forward(x, w, b):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeError(f"fully connected layer expects {w.shape[1]} inputs, got {flat.shape[1]}")
    return flat @ w.T + b, flat


def fc_backward(dout, flat, w, xshape):
    return (dout @ w).reshape(xshape), dout.T @ flat, dout.sum(axis=0)


def softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def spatial_softmax_forward(logits, classes):
    """Reshape (B, M*N*C) or (M*N*C,) logits into cells and softmax each one.

    The flat logit index is ``cell * classes + r`` with cells in row-major
    order. The result has shape (B, M*N, C) (or (M*N, C) for a single
    vector).
    """
    z = np.asarray(logits)
    if z.shape[-1] % classes:
        raise ShapeError(f"{z.shape[-1]} logits do not split into cells of {classes} classes")
    return softmax(z.reshape(z.shape[:-1] + (-1, classes)))


def spatial_softmax_backward(dprob, prob):
    dz = prob * (dprob - (dprob * prob).sum(axis=-1, keepdims=True))
    return dz.reshape(dz.shape[:-2] + (-1,))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class NetworkParams:
    tensors: dict = field(default_factory=dict)
    iteration: int = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def copy(self):
        return NetworkParams({k: v.copy() for k, v in self.tensors.items()}, self.iteration)

    def astype(self, dtype):
        return NetworkParams({k: v.astype(dtype) for k, v in self.tensors.items()}, self.iteration)


def xavier_init(spec, in_shape, seed, dtype=np.float64):
    """Uniform Xavier weights in [-a, a] with a = sqrt(3 / fan_in); zero bias.

    ``in_shape`` is the (channels, height, width) shape feeding the layer.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    if spec.kind == CONV:
        shape = (spec.kernels, in_shape[0], spec.size, spec.size)
    elif spec.kind == FC:
        shape = (spec.neurons, int(np.prod(in_shape)))
    else:
        raise ValueError(f"{spec.kind} has no parameters")
    fan_in = int(np.prod(shape[1:]))
    a = np.sqrt(3.0 / fan_in)
    if np.dtype(dtype) == np.float32:
        w = rng.random(shape, dtype=np.float32)
        w *= np.float32(2 * a)
        w -= np.float32(a)
    else:
        w = rng.uniform(-a, a, size=shape).astype(dtype)
    return w, np.zeros(shape[0], dtype=dtype)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """A fixed chain of layers over inputs of shape (channels, height, width)."""

    def __init__(self, specs, input_shape):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.names = []
        self.shapes = [self.input_shape]
        counters = {}
        shape = self.input_shape
        for idx, spec in enumerate(self.specs):
            spec.validate()
            prefix = {CONV: "conv", FC: "fc", LRN: "lrn", MAXPOOL: "pool",
                      RELU: "relu", SOFTMAX: "softmax"}[spec.kind]
            counters[prefix] = counters.get(prefix, 0) + 1
            name = f"{prefix}{counters[prefix]}"
            self.names.append(name)
            shape = self._out_shape(name, spec, shape)
            self.shapes.append(shape)
        self._cache = None

    @staticmethod
    def _out_shape(name, spec, shape):
        if spec.kind == CONV:
            if len(shape) != 3:
                raise ShapeError(f"{name}: convolution needs a spatial input, got {shape}")
            h = out_size(shape[1], spec.size, spec.stride, spec.pad)
            w = out_size(shape[2], spec.size, spec.stride, spec.pad)
            if h < 1 or w < 1:
                raise ShapeError(f"{name}: {spec} on {shape} gives {h}x{w}")
            return (spec.kernels, h, w)
        if spec.kind == MAXPOOL:
            if len(shape) != 3:
                raise ShapeError(f"{name}: pooling needs a spatial input, got {shape}")
            h = out_size(shape[1], spec.size, spec.stride)
            w = out_size(shape[2], spec.size, spec.stride)
            if h < 1 or w < 1:
                raise ShapeError(f"{name}: {spec} on {shape} gives {h}x{w}")
            return (shape[0], h, w)
        if spec.kind == FC:
            return (spec.neurons,)
        if spec.kind == SOFTMAX:
            total = int(np.prod(shape))
            if total % spec.classes:
                raise ShapeError(f"{name}: {total} values do not split into {spec.classes} classes")
            return (total // spec.classes, spec.classes)
        return shape

    @property
    def output_shape(self):
        return self.shapes[-1]

    def param_shapes(self):
        out = {}
        for name, spec, shape in zip(self.names, self.specs, self.shapes):
            if spec.kind == CONV:
                out[f"{name}.weight"] = (spec.kernels, shape[0], spec.size, spec.size)
                out[f"{name}.bias"] = (spec.kernels,)
            elif spec.kind == FC:
                out[f"{name}.weight"] = (spec.neurons, int(np.prod(shape)))
                out[f"{name}.bias"] = (spec.neurons,)
        return out

    def init_params(self, seed, dtype=np.float64):
        params = NetworkParams()
        for idx, (name, spec, shape) in enumerate(zip(self.names, self.specs, self.shapes)):
            if spec.kind in (CONV, FC):
                w, b = xavier_init(spec, shape, np.random.SeedSequence([seed, idx]), dtype)
                params[f"{name}.weight"] = w
                params[f"{name}.bias"] = b
        return params

    def check_params(self, params):
        expected = self.param_shapes()
        for key, shape in expected.items():
            if key not in params:
                raise ShapeError(f"{key.split('.')[0]}: missing parameter {key}")
            if tuple(params[key].shape) != shape:
                raise ShapeError(f"{key.split('.')[0]}: {key} has shape "
                                 f"{tuple(params[key].shape)}, expected {shape}")

    def forward(self, x, params, upto=None, keep=True):
        """Run layers ``[0, upto)`` (all by default) on a batch ``x``."""
        if x.ndim == len(self.input_shape):
            x = x[None]
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input: expected (B, {', '.join(map(str, self.input_shape))}), "
                             f"got {x.shape}")
        stop = len(self.specs) if upto is None else upto
        caches = []
        for name, spec in zip(self.names[:stop], self.specs[:stop]):
            kind = spec.kind
            if kind == CONV:
                w, b = params[f"{name}.weight"], params[f"{name}.bias"]
                if w.shape[1] != x.shape[1]:
                    raise ShapeError(f"{name}: weight expects {w.shape[1]} channels, got {x.shape[1]}")
                x, cache = conv_forward(x, w, b, spec.stride, spec.pad)
            elif kind == LRN:
                x, cache = lrn_forward(x, spec.n, spec.alpha, spec.beta, spec.k_bias)
            elif kind == MAXPOOL:
                shape = x.shape
                x, arg = maxpool_forward(x, spec.size, spec.stride)
                cache = (arg, shape)
            elif kind == FC:
                w, b = params[f"{name}.weight"], params[f"{name}.bias"]
                shape = x.shape
                try:
                    x, flat = fc_forward(x, w, b)
                except ShapeError as exc:
                    raise ShapeError(f"{name}: {exc}") from None
                cache = (flat, shape)
            elif kind == RELU:
                cache = x > 0
                x = np.where(cache, x, 0)
            else:
                shape = x.shape
                x = spatial_softmax_forward(x.reshape(x.shape[0], -1), spec.classes)
                cache = (x, shape)
            caches.append(cache)
        self._cache = (caches, params, stop) if keep else None
        return x

    def backward(self, dout):
        """Backpropagate ``dout`` through the layers run by the last forward.

        Returns (parameter gradients, input gradient).
        """
        if self._cache is None:
            raise RuntimeError("backward called without a matching forward pass")
        caches, params, stop = self._cache
        self._cache = None
        grads = {}
        for name, spec, cache in reversed(list(zip(self.names[:stop], self.specs[:stop], caches))):
            kind = spec.kind
            if kind == CONV:
                dout, dw, db = conv_backward(dout, cache)
                grads[f"{name}.weight"], grads[f"{name}.bias"] = dw, db
            elif kind == LRN:
                dout = lrn_backward(dout, cache)
            elif kind == MAXPOOL:
                arg, shape = cache
                dout = maxpool_backward(dout, arg, shape, spec.size, spec.stride)
            elif kind == FC:
                flat, shape = cache
                dout, dw, db = fc_backward(dout, flat, params[f"{name}.weight"], shape)
                grads[f"{name}.weight"], grads[f"{name}.bias"] = dw, db
            elif kind == RELU:
                dout = np.where(cache, dout, 0)
            else:
                prob, shape = cache
                dout = spatial_softmax_backward(dout, prob).reshape(shape)
        ordered = {k: grads[k] for k in self.param_shapes() if k in grads}
        return ordered, dout


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class SgdConfig:
    base_lr: float = 1e-4
    stepsize: int = 50000
    gamma: float = 0.1
    batch: int = 16
    max_iters: int = 100000
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.stepsize < 1:
            raise ValueError("stepsize must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch < 1 or self.max_iters < 1:
            raise ValueError("batch and max_iters must be positive")

    def lr(self, iteration):
        return self.base_lr * self.gamma ** (iteration // self.stepsize)


def sgd_step(params, grads, config, velocity=None):
    """One in-place SGD update; bumps ``params.iteration``.

    ``velocity`` is a dict used as momentum buffer when ``config.momentum``
    is non-zero.
    """
    lr = config.lr(params.iteration)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if config.weight_decay:
            g = g + config.weight_decay * p
        if config.momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity buffer")
            v = velocity.get(name)
            v = g.copy() if v is None else config.momentum * v + g
            velocity[name] = v
            g = v
        p -= np.asarray(lr * g, dtype=p.dtype)
    params.iteration += 1
    return params


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numerical_gradient(f, array, index, eps=1e-4):
    """Central difference of scalar ``f()`` w.r.t. ``array[index]`` (mutated in place)."""
    old = array[index]
    array[index] = old + eps
    fp = f()
    array[index] = old - eps
    fm = f()
    array[index] = old
    return (fp - fm) / (2 * eps)


def check_gradient(f, array, analytic, eps=1e-4, samples=None, rng=None):
    """Max relative error between ``analytic`` and central differences of ``f``.

    Checks every entry of ``array`` or ``samples`` random ones.
    """
    if samples is None or samples >= array.size:
        indices = list(np.ndindex(array.shape))
    else:
        rng = np.random.default_rng(rng)
        flat = rng.choice(array.size, size=samples, replace=False)
        indices = [np.unravel_index(i, array.shape) for i in flat]
    worst = 0.0
    for idx in indices:
        num = numerical_gradient(f, array, idx, eps)
        worst = max(worst, float(relative_error(analytic[idx], num)))
    return worst


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, magic=NET_MAGIC):
    if len(magic) != 8:
        raise ValueError("checkpoint magic must be 8 bytes")
    parts = [magic, struct.pack("<IQI", CHECKPOINT_VERSION, params.iteration, len(params.tensors))]
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, magic=NET_MAGIC):
    """Read a checkpoint; tensors come back as float32 arrays."""
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise FormatError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, iteration, count = take("<IQI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    params = NetworkParams(iteration=iteration)
    for _ in range(count):
        (nlen,) = take("<I")
        (raw,) = take(f"<{nlen}s")
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(data):
            raise FormatError(f"{path}: truncated tensor payload at byte {pos}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        params[raw.decode("utf-8")] = arr.astype(np.float32)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes at byte {pos}")
    return params
