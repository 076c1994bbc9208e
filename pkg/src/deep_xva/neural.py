"""Feedforward ReLU networks written directly in numpy.

A :class:`NetworkParams` holds either one network or a stack of networks with
identical layer dims (leading axis = stack index, e.g. one network per time
step). Every operation broadcasts over that leading axis, which lets the BSDE
solver evaluate and differentiate all time steps with a single matmul per
layer.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

FORMAT_MAGIC = b"DXNN"
FORMAT_VERSION = 2


@dataclass
class NetworkParams:
    weights: list[np.ndarray]   # layer l: (..., nu_l, nu_{l-1})
    biases: list[np.ndarray]    # layer l: (..., nu_l)
    shift: np.ndarray           # (..., nu_0)
    scale: np.ndarray           # (..., nu_0)
    out_scale: np.ndarray | None = None   # (..., nu_L), fixed output multiplier, default ones

    def __post_init__(self):
        if self.out_scale is None:
            self.out_scale = np.ones(self.biases[-1].shape)
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        dims = self.dims
        lead = self.stack_shape
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != lead + (dims[l + 1], dims[l]) or b.shape != lead + (dims[l + 1],):
                raise ValueError(f"inconsistent shapes in layer {l + 1}")
        if self.shift.shape != lead + (dims[0],) or self.scale.shape != lead + (dims[0],):
            raise ValueError("normalization vectors must match the input dimension")
        if self.out_scale.shape != self.biases[-1].shape:
            raise ValueError("output scale must match the output dimension")
        if np.any(self.scale <= 0) or np.any(self.out_scale <= 0):
            raise ValueError("normalization scale must be strictly positive")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[-1],) + tuple(W.shape[-2] for W in self.weights)

    @property
    def stack_shape(self) -> tuple[int, ...]:
        return self.weights[0].shape[:-2]

    @property
    def n_params(self) -> int:
        """Trainable parameter count of one network, sum of nu_l * (1 + nu_{l-1})."""
        d = self.dims
        return sum(d[l] * (1 + d[l - 1]) for l in range(1, len(d)))

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def __getitem__(self, idx) -> "NetworkParams":
        return NetworkParams([W[idx] for W in self.weights], [b[idx] for b in self.biases],
                             self.shift[idx], self.scale[idx], self.out_scale[idx])

    def __len__(self) -> int:
        if not self.stack_shape:
            raise TypeError("single network has no length")
        return self.stack_shape[0]

    def copy(self) -> "NetworkParams":
        return NetworkParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                             self.shift.copy(), self.scale.copy(), self.out_scale.copy())

    def flatten(self) -> np.ndarray:
        """Parameters of a single network in storage order (W_1, b_1, W_2, b_2, ...)."""
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b.ravel()]
        return np.concatenate(parts)

    @classmethod
    def stack(cls, nets: Sequence["NetworkParams"]) -> "NetworkParams":
        n_layers = len(nets[0].weights)
        return cls([np.stack([n.weights[l] for n in nets]) for l in range(n_layers)],
                   [np.stack([n.biases[l] for n in nets]) for l in range(n_layers)],
                   np.stack([n.shift for n in nets]), np.stack([n.scale for n in nets]),
                   np.stack([n.out_scale for n in nets]))

    def unstack(self) -> list["NetworkParams"]:
        return [self[i].copy() for i in range(len(self))]


@dataclass
class ForwardCache:
    inputs: np.ndarray                 # standardized inputs
    pre: list[np.ndarray]              # pre-activations of hidden layers
    post: list[np.ndarray]             # ReLU outputs of hidden layers


def _check_dims(dims):
    dims = [int(d) for d in dims]
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"layer dims must be >= 2 positive integers, got {dims}")
    return dims


def init_network(dims: Sequence[int], seed: int, stack: int | None = None) -> NetworkParams:
    """He fan-in uniform weights, zero biases, identity input and output scaling."""
    dims = _check_dims(dims)
    rng = np.random.default_rng(seed)
    lead = () if stack is None else (stack,)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=lead + (fan_out, fan_in)))
        biases.append(np.zeros(lead + (fan_out,)))
    return NetworkParams(weights, biases, np.zeros(lead + (dims[0],)), np.ones(lead + (dims[0],)))


def _as_batch(params: NetworkParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim < 2 or x.shape[-1] != params.dims[0]:
        raise ValueError(f"expected inputs of shape (..., batch, {params.dims[0]}), got {x.shape}")
    return x


class Workspace:
    """Reusable scratch buffers keyed by (name, shape).

    Training evaluates the same layer shapes thousands of times; reusing
    buffers avoids re-faulting fresh multi-megabyte pages on every call.
    Arrays returned by calls that received a workspace are overwritten by the
    next call using the same workspace.
    """

    def __init__(self):
        self._buffers: dict = {}

    def get(self, name, shape) -> np.ndarray:
        key = (name, tuple(shape))
        buf = self._buffers.get(key)
        if buf is None:
            buf = self._buffers[key] = np.empty(shape)
        return buf


def _buffer(work, name, shape):
    return np.empty(shape) if work is None else work.get(name, shape)


def forward(params: NetworkParams, x, work: Workspace | None = None) -> tuple[np.ndarray, ForwardCache]:
    x = _as_batch(params, x)
    h = _buffer(work, "in", x.shape)
    np.subtract(x, params.shift[..., None, :], out=h)
    h /= params.scale[..., None, :]
    cache = ForwardCache(h, [], [])
    last = len(params.weights) - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = _buffer(work, f"pre{l}", h.shape[:-1] + (W.shape[-2],))
        np.matmul(h, np.swapaxes(W, -1, -2), out=z)
        z += b[..., None, :]
        if l == last:
            z *= params.out_scale[..., None, :]
            return z, cache
        h = np.maximum(z, 0.0, out=_buffer(work, f"post{l}", z.shape))
        cache.pre.append(z)
        cache.post.append(h)


def backward(params: NetworkParams, cache: ForwardCache, upstream,
             work: Workspace | None = None) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of sum(upstream * output) with respect to (weights, biases).

    Stacked networks are differentiated independently (batch axis summed,
    stack axis kept).
    """
    delta = np.asarray(upstream, dtype=float)
    if len(cache.pre) != len(params.weights) - 1 or delta.shape[:-1] != cache.inputs.shape[:-1] \
            or delta.shape[-1] != params.dims[-1]:
        raise ValueError("cache/upstream do not match these parameters")
    delta = delta * params.out_scale[..., None, :]
    n_layers = len(params.weights)
    gW, gb = [None] * n_layers, [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        a = cache.post[l - 1] if l > 0 else cache.inputs
        gW[l] = np.swapaxes(delta, -1, -2) @ a
        gb[l] = delta.sum(axis=-2)
        if l > 0:
            nxt = _buffer(work, f"delta{l}", delta.shape[:-1] + (params.weights[l].shape[-1],))
            np.matmul(delta, params.weights[l], out=nxt)
            nxt *= cache.pre[l - 1] > 0
            delta = nxt
    return gW, gb


def input_gradient(params: NetworkParams, cache: ForwardCache, upstream) -> np.ndarray:
    """Vector-Jacobian product with respect to the raw (unstandardized) inputs."""
    delta = np.asarray(upstream, dtype=float) * params.out_scale[..., None, :]
    for l in range(len(params.weights) - 1, 0, -1):
        delta = (delta @ params.weights[l]) * (cache.pre[l - 1] > 0)
    return (delta @ params.weights[0]) / params.scale[..., None, :]


def jacobian(params: NetworkParams, x) -> np.ndarray:
    """Input Jacobian diag(out_scale) W_L diag(relu'(.)) ... W_1 diag(1/scale).

    ``x`` may be a single vector (returns (out, in)) or a batch (returns
    (..., batch, out, in)). relu'(0) is taken as 0.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    _, cache = forward(params, x[None, :] if single else x)
    J = params.weights[0] / params.scale[..., None, :]
    J = np.broadcast_to(J[..., None, :, :], cache.inputs.shape[:-1] + J.shape[-2:])
    for l in range(1, len(params.weights)):
        J = (cache.pre[l - 1] > 0)[..., :, None] * J
        J = params.weights[l][..., None, :, :] @ J
    J = params.out_scale[..., None, :, None] * J
    return J[0] if single else J


@dataclass
class AdamConfig:
    learning_rate: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_points: tuple[float, ...] = (0.6, 0.85)
    decay_factor: float = 0.2
    total_steps: int | None = None

    def rate(self, step: int) -> float:
        """Step-decayed learning rate for the 0-based ``step``."""
        lr = self.learning_rate
        if self.total_steps:
            for frac in self.decay_points:
                if step >= frac * self.total_steps:
                    lr *= self.decay_factor
        return lr


@dataclass
class AdamState:
    config: AdamConfig
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray], config: AdamConfig | None = None) -> "AdamState":
        return cls(config or AdamConfig(), [np.zeros_like(a) for a in arrays],
                   [np.zeros_like(a) for a in arrays])


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """One bias-corrected Adam update, applied in place. Returns (state, params)."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient/state lengths differ")
    cfg = state.config
    lr = cfg.rate(state.step)
    state.step += 1
    c1 = 1.0 - cfg.beta1**state.step
    c2 = 1.0 - cfg.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state, params


# -- serialization -----------------------------------------------------------

def network_to_bytes(params: NetworkParams) -> bytes:
    """Self-describing little-endian encoding of a single network.

    Layout: magic, version, layer count, dims, then float64 shift, scale,
    output scale and each layer's row-major weights followed by its bias,
    then a CRC32 of everything before it.
    """
    if params.stack_shape:
        raise ValueError("serialize stacked networks one at a time")
    dims = params.dims
    head = FORMAT_MAGIC + struct.pack(f"<II{len(dims)}I", FORMAT_VERSION, len(dims), *dims)
    body = [params.shift, params.scale, params.out_scale]
    for W, b in zip(params.weights, params.biases):
        body += [W, b]
    blob = head + b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def network_from_bytes(blob: bytes) -> tuple[NetworkParams, int]:
    """Decode one network; returns it with the number of bytes consumed."""
    if blob[:4] != FORMAT_MAGIC:
        raise ValueError("not a network block (bad magic)")
    if len(blob) < 12:
        raise ValueError("truncated network header")
    version, n_dims = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"incompatible network format version {version}, expected {FORMAT_VERSION}")
    if not 2 <= n_dims <= 64 or len(blob) < 12 + 4 * n_dims:
        raise ValueError("corrupted network header")
    dims = struct.unpack_from(f"<{n_dims}I", blob, 12)
    if any(d < 1 for d in dims):
        raise ValueError("corrupted network header (zero layer width)")
    offset = 12 + 4 * n_dims
    sizes = [dims[0], dims[0], dims[-1]]
    for l in range(1, n_dims):
        sizes += [dims[l] * dims[l - 1], dims[l]]
    end = offset + 8 * sum(sizes)
    if len(blob) < end + 4:
        raise ValueError("truncated network payload")
    (crc,) = struct.unpack_from("<I", blob, end)
    if crc != zlib.crc32(blob[:end]):
        raise ValueError("network checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f8", count=sum(sizes), offset=offset).astype(float)
    arrays = np.split(flat, np.cumsum(sizes)[:-1])
    weights = [arrays[3 + 2 * i].reshape(dims[i + 1], dims[i]) for i in range(n_dims - 1)]
    biases = [arrays[4 + 2 * i] for i in range(n_dims - 1)]
    return NetworkParams(weights, biases, arrays[0], arrays[1], arrays[2]), end + 4


def save_network(params: NetworkParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(network_to_bytes(params))


def load_network(path) -> NetworkParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    params, used = network_from_bytes(blob)
    if used != len(blob):
        raise ValueError("trailing bytes after network block")
    return params
