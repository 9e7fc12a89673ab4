"""
Small 1-D CNN with hand-written backpropagation, and its weight file format.

Input is a batch of (M, C) normalized CIR magnitudes; output is a batch of
2-D positions. Everything runs in float64.

Weight file (big-endian)::

    magic u32 0x43435731 ("CCW1"), version u8, M u16, C u32, N_fft u32,
    alpha f64, n_layers u16,
    n_layers x (kind u8, a u32, b u32, k u32, s u32),
    float64 payload: for each layer with parameters, W then b (C order)

kinds: 1 conv1d(a=in, b=out, k=kernel, s=stride), 2 tanh, 3 flatten,
4 dense(a=in, b=out).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ModelError(ValueError):
    code = "MODEL_ERROR"


class DimensionMismatch(ModelError):
    code = "DIMENSION_MISMATCH"


class BadWeightsMagic(ModelError):
    code = "BAD_MAGIC"


class ManifestMismatch(ModelError):
    code = "MANIFEST_MISMATCH"


class Conv1D:
    kind = 1

    def __init__(self, in_ch, out_ch, kernel, stride=1):
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.W = np.zeros((out_ch, in_ch, kernel))
        self.b = np.zeros(out_ch)

    def params(self):
        return [self.W, self.b]

    def out_shape(self, shape):
        ch, length = shape
        if ch != self.in_ch or length < self.kernel:
            raise DimensionMismatch(f"conv1d({self.in_ch}, k={self.kernel}) cannot take {shape}")
        return self.out_ch, (length - self.kernel) // self.stride + 1

    def init(self, rng):
        fan_in, fan_out = self.in_ch * self.kernel, self.out_ch * self.kernel
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        self.W[...] = rng.uniform(-lim, lim, self.W.shape)
        self.b[...] = 0.0

    def forward(self, x):
        batch = x.shape[0]
        cols = sliding_window_view(x, self.kernel, axis=2)[:, :, ::self.stride, :]
        n_out = cols.shape[2]
        cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(batch * n_out, -1)
        y = cols @ self.W.reshape(self.out_ch, -1).T + self.b
        return y.reshape(batch, n_out, self.out_ch).transpose(0, 2, 1), (x.shape, cols)

    def backward(self, dy, cache):
        x_shape, cols = cache
        batch, _, n_out = dy.shape
        dy2 = dy.transpose(0, 2, 1).reshape(batch * n_out, self.out_ch)
        dW = (dy2.T @ cols).reshape(self.W.shape)
        db = dy2.sum(axis=0)
        dcols = (dy2 @ self.W.reshape(self.out_ch, -1)).reshape(batch, n_out, self.in_ch, self.kernel)
        dx = np.zeros(x_shape)
        span = self.stride * (n_out - 1) + 1
        for k in range(self.kernel):
            dx[:, :, k:k + span:self.stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        return dx, [dW, db]

    def dims(self):
        return self.in_ch, self.out_ch, self.kernel, self.stride


class Tanh:
    kind = 2

    def params(self):
        return []

    def out_shape(self, shape):
        return shape

    def init(self, rng):
        pass

    def forward(self, x):
        y = np.tanh(x)
        return y, y

    def backward(self, dy, y):
        return dy * (1.0 - y * y), []

    def dims(self):
        return 0, 0, 0, 0


class Flatten:
    kind = 3

    def params(self):
        return []

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def init(self, rng):
        pass

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), []

    def dims(self):
        return 0, 0, 0, 0


class Dense:
    kind = 4

    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out
        self.W = np.zeros((n_out, n_in))
        self.b = np.zeros(n_out)

    def params(self):
        return [self.W, self.b]

    def out_shape(self, shape):
        if shape != (self.n_in,):
            raise DimensionMismatch(f"dense({self.n_in}) cannot take {shape}")
        return (self.n_out,)

    def init(self, rng):
        lim = np.sqrt(6.0 / (self.n_in + self.n_out))
        self.W[...] = rng.uniform(-lim, lim, self.W.shape)
        self.b[...] = 0.0

    def forward(self, x):
        return x @ self.W.T + self.b, x

    def backward(self, dy, x):
        return dy @ self.W, [dy.T @ x, dy.sum(axis=0)]

    def dims(self):
        return self.n_in, self.n_out, 0, 0


_KINDS = {1: Conv1D, 2: Tanh, 3: Flatten, 4: Dense}


class Network:
    """Layer stack mapping (batch, M, C) -> (batch, 2)."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (2,):
            raise DimensionMismatch(f"network output shape {shape}, expected (2,)")

    @property
    def num_trps(self) -> int:
        return self.input_shape[0]

    @property
    def taps(self) -> int:
        return self.input_shape[1]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def init(self, rng, output_bias=(0.0, 0.0)):
        for layer in self.layers:
            layer.init(rng)
        self.layers[-1].b[...] = output_bias

    def _check(self, x):
        if x.shape[1:] != self.input_shape:
            raise DimensionMismatch(f"input {x.shape[1:]} does not match model {self.input_shape}")

    def forward(self, x, keep=False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        self._check(x)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        if single:
            x = x[0]
        return (x, caches) if keep else x

    def backward(self, dout, caches) -> list[np.ndarray]:
        grads = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dout, g = layer.backward(dout, cache)
            grads[:0] = g
        return grads

    def copy(self) -> Network:
        net = Network([_clone(layer) for layer in self.layers], self.input_shape)
        for dst, src in zip(net.params(), self.params()):
            dst[...] = src
        return net

    def lipschitz_bound(self) -> float:
        """Upper bound on the Euclidean Lipschitz constant of the whole map."""
        bound = 1.0
        for layer in self.layers:
            if isinstance(layer, Conv1D):
                # each input tap feeds at most ceil(k / s) output positions
                overlap = -(-layer.kernel // layer.stride)
                bound *= np.sqrt(overlap) * np.linalg.norm(layer.W)
            elif isinstance(layer, Dense):
                bound *= np.linalg.norm(layer.W, 2)
        return float(bound)


def _clone(layer):
    if isinstance(layer, Conv1D):
        return Conv1D(*layer.dims())
    if isinstance(layer, Dense):
        return Dense(layer.n_in, layer.n_out)
    return type(layer)()


def default_layers(num_trps: int, taps: int):
    """conv(M->16, k7, s2) tanh conv(16->32, k5, s2) tanh flatten dense(64) tanh dense(2)."""
    l1 = (taps - 7) // 2 + 1
    l2 = (l1 - 5) // 2 + 1
    if l1 < 5 or l2 < 1:
        raise DimensionMismatch(f"C={taps} too short for the default architecture")
    return [
        Conv1D(num_trps, 16, 7, 2), Tanh(),
        Conv1D(16, 32, 5, 2), Tanh(),
        Flatten(),
        Dense(32 * l2, 64), Tanh(),
        Dense(64, 2),
    ]


def small_layers(num_trps: int, taps: int):
    """Reduced stack for short inputs (e.g. C=8) used in gradient checks."""
    l1 = (taps - 3) // 2 + 1
    l2 = l1 - 2
    return [
        Conv1D(num_trps, 4, 3, 2), Tanh(),
        Conv1D(4, 4, 3, 1), Tanh(),
        Flatten(),
        Dense(4 * l2, 6), Tanh(),
        Dense(6, 2),
    ]


def build_network(num_trps: int, taps: int, arch: str = "default") -> Network:
    layers = {"default": default_layers, "small": small_layers}[arch](num_trps, taps)
    return Network(layers, (num_trps, taps))


# --------------------------------------------------------------------------
# Weight files
# --------------------------------------------------------------------------

MAGIC = 0x43435731
VERSION = 1
_HEAD = struct.Struct(">IBHIIdH")
_LAYER = struct.Struct(">BIIII")


@dataclass
class ModelBundle:
    network: Network
    alpha: float
    taps: int
    n_fft: int


def save_params(network: Network, alpha: float, taps: int, path, n_fft: int = 0) -> None:
    if taps != network.taps:
        raise ManifestMismatch(f"C={taps} does not match network input C={network.taps}")
    parts = [_HEAD.pack(MAGIC, VERSION, network.num_trps, taps, n_fft, alpha, len(network.layers))]
    for layer in network.layers:
        parts.append(_LAYER.pack(layer.kind, *layer.dims()))
    for p in network.params():
        parts.append(np.ascontiguousarray(p, dtype=">f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path, expect_taps: int | None = None) -> ModelBundle:
    data = Path(path).read_bytes()
    if len(data) < 4 or struct.unpack_from(">I", data)[0] != MAGIC:
        raise BadWeightsMagic(f"{path}: not a CCW1 weight file")
    if len(data) < _HEAD.size:
        raise ManifestMismatch("weight file header truncated")
    _, version, m, taps, n_fft, alpha, n_layers = _HEAD.unpack_from(data)
    if version != VERSION:
        raise ManifestMismatch(f"unsupported weight file version {version}")
    if expect_taps is not None and expect_taps != taps:
        raise ManifestMismatch(f"model trained for C={taps}, pipeline configured for C={expect_taps}")
    pos = _HEAD.size
    if len(data) < pos + n_layers * _LAYER.size:
        raise ManifestMismatch("layer manifest truncated")
    layers = []
    for _ in range(n_layers):
        kind, a, b, k, s = _LAYER.unpack_from(data, pos)
        pos += _LAYER.size
        if kind == 1:
            layers.append(Conv1D(a, b, k, s))
        elif kind == 4:
            layers.append(Dense(a, b))
        elif kind in _KINDS:
            layers.append(_KINDS[kind]())
        else:
            raise ManifestMismatch(f"unknown layer kind {kind}")
    try:
        net = Network(layers, (m, taps))
    except DimensionMismatch as exc:
        raise ManifestMismatch(str(exc)) from None
    need = sum(p.size for p in net.params()) * 8
    if len(data) - pos != need:
        raise ManifestMismatch(f"payload holds {len(data) - pos} bytes, manifest needs {need}")
    for p in net.params():
        n = p.size * 8
        p[...] = np.frombuffer(data, dtype=">f8", count=p.size, offset=pos).reshape(p.shape)
        pos += n
    return ModelBundle(net, alpha, taps, n_fft)
