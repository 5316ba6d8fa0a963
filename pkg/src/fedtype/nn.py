"""Dense ReLU classifiers with analytic backprop and Adam.

A :class:`DenseNet` keeps all of its parameters in one flat float64 vector.
Layer ``l`` owns a weight block of shape ``(dims[l], dims[l+1])`` stored
row-major, followed by its bias of length ``dims[l+1]``; layers follow each
other in order. That flat vector *is* the ParamVector used for aggregation
and checkpointing, so :func:`flatten` is just a copy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels

ACTIVATION = "relu"

# little-endian: uint64 count, then count float64 values
_BLOB_HEADER = struct.Struct("<Q")


def _check_dims(layer_dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise ValueError(f"layer_dims needs at least input and output sizes, got {list(layer_dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all layer dims must be >= 1, got {list(layer_dims)}")
    return dims


def param_count(layer_dims: Sequence[int]) -> int:
    dims = _check_dims(layer_dims)
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


@dataclass
class DenseNet:
    layer_dims: tuple[int, ...]
    params: np.ndarray

    def __post_init__(self):
        self.layer_dims = _check_dims(self.layer_dims)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.ndim != 1 or self.params.shape[0] != param_count(self.layer_dims):
            raise ValueError(
                f"parameter vector of length {self.params.size} does not match "
                f"layer_dims {list(self.layer_dims)} ({param_count(self.layer_dims)} params)"
            )
        self._dims_arr = np.asarray(self.layer_dims, dtype=np.int64)

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def weights(self) -> list[np.ndarray]:
        """Per-layer weight matrices as views into ``params``."""
        return [w for w, _ in self._blocks()]

    @property
    def biases(self) -> list[np.ndarray]:
        return [b for _, b in self._blocks()]

    def _blocks(self):
        p = 0
        out = []
        for fi, fo in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = self.params[p : p + fi * fo].reshape(fi, fo)
            p += fi * fo
            b = self.params[p : p + fo]
            p += fo
            out.append((w, b))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(self.layer_dims, self.params.copy())


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_params: int, **kwargs) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), **kwargs)


def init_network(layer_dims: Sequence[int], seed: int | np.random.Generator) -> DenseNet:
    """Glorot-uniform weights, zero biases, reproducible from ``seed``."""
    dims = _check_dims(layer_dims)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = np.zeros(param_count(dims))
    p = 0
    for fi, fo in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fi + fo))
        params[p : p + fi * fo] = rng.uniform(-limit, limit, size=fi * fo)
        p += fi * fo + fo
    return DenseNet(dims, params)


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != net.n_inputs:
        raise ValueError(f"expected input of length {net.n_inputs}, got shape {np.shape(x)}")
    return np.ascontiguousarray(X), single


def forward_activations(net: DenseNet, X: np.ndarray) -> np.ndarray:
    """Activation buffer for a 2-D batch; the last ``n_classes`` columns are logits."""
    X, _ = _as_batch(net, X)
    return _kernels.dense_forward(net.params, net._dims_arr, X)


def forward_logits(net: DenseNet, x) -> np.ndarray:
    """Logits for one sample (1-D input) or a batch (2-D input)."""
    X, single = _as_batch(net, x)
    acts = _kernels.dense_forward(net.params, net._dims_arr, X)
    logits = acts[:, -net.n_classes :]
    return logits[0].copy() if single else np.ascontiguousarray(logits)


def backward(net: DenseNet, x, dloss_dlogits, acts: np.ndarray | None = None) -> np.ndarray:
    """Parameter gradient, summed over batch rows, for the given logit gradient.

    ``acts`` may be passed to reuse a buffer from :func:`forward_activations`.
    """
    X, single = _as_batch(net, x)
    G = np.asarray(dloss_dlogits, dtype=np.float64)
    if G.ndim == 1:
        G = G[None, :]
    if G.shape != (X.shape[0], net.n_classes):
        raise ValueError(
            f"dloss_dlogits shape {np.shape(dloss_dlogits)} does not match "
            f"{X.shape[0]} sample(s) x {net.n_classes} classes"
        )
    if acts is None:
        acts = _kernels.dense_forward(net.params, net._dims_arr, X)
    return _kernels.dense_backward(net.params, net._dims_arr, acts, np.ascontiguousarray(G))


def adam_step(net: DenseNet, grad: np.ndarray, state: AdamState, lr: float) -> tuple[DenseNet, AdamState]:
    """In-place Adam update of ``net`` and ``state``; both are also returned."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != net.params.shape:
        raise ValueError(f"gradient length {grad.size} != parameter count {net.n_params}")
    if state.m.shape != net.params.shape:
        raise ValueError("Adam moment vectors do not match the network")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    state.step += 1
    _kernels.adam_update(
        net.params, grad, state.m, state.v, state.step, float(lr), state.beta1, state.beta2, state.eps
    )
    return net, state


def flatten(net: DenseNet) -> np.ndarray:
    return net.params.copy()


def unflatten(layer_dims: Sequence[int], vector) -> DenseNet:
    vec = np.asarray(vector, dtype=np.float64)
    expected = param_count(layer_dims)
    if vec.ndim != 1 or vec.shape[0] != expected:
        raise ValueError(f"vector of length {vec.size} cannot fill layer_dims {list(layer_dims)} ({expected} params)")
    return DenseNet(tuple(layer_dims), vec.copy())


def param_bytes(vector) -> bytes:
    vec = np.asarray(vector, dtype="<f8")
    return _BLOB_HEADER.pack(vec.shape[0]) + vec.tobytes()


def param_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _BLOB_HEADER.size:
        raise ValueError("parameter blob shorter than its header")
    (n,) = _BLOB_HEADER.unpack_from(blob)
    body = blob[_BLOB_HEADER.size :]
    if len(body) != 8 * n:
        raise ValueError(f"parameter blob declares {n} values but carries {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


def save_params(path: str | Path, vector) -> None:
    Path(path).write_bytes(param_bytes(vector))


def load_params(path: str | Path) -> np.ndarray:
    return param_from_bytes(Path(path).read_bytes())
