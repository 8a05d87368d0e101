"""Fully connected ReLU classifiers with log-softmax heads.

The model output is the log-softmax vector, not raw logits: with categorical
cross-entropy the loss gradient with respect to the outputs is then the
constant -y, which the single-kernel reduction of the path representation
requires.  ReLU's derivative at 0 is taken to be 0 so every gradient here is
deterministic.  Argmax ties break toward the lowest class index.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import InvalidInput, NumericalError
from .numerics import RngState

__all__ = [
    "ModelSpec",
    "ParamLayout",
    "init_params",
    "forward",
    "forward_batch",
    "predict_labels",
    "cce_loss",
    "backprop_param_grad",
    "param_jacobian",
    "input_gradient",
    "save_checkpoint",
    "load_checkpoint",
    "spec_to_json",
    "spec_from_json",
]


@dataclass(frozen=True)
class ModelSpec:
    """Layer widths from input to output; hidden ReLU, log-softmax head."""

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise InvalidInput("a model needs at least input and output layers")
        if sizes[-1] < 2:
            raise InvalidInput("output size (class count) must be >= 2")
        if any(s < 1 for s in sizes):
            raise InvalidInput("all layer sizes must be positive")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_params(self) -> int:
        return backend.n_params(self.layer_sizes)


class ParamLayout:
    """Bijective map between the flat parameter vector and (layer, W/b, i, j)."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.offsets = []
        off = 0
        for (wshape, bshape) in backend.layer_shapes(spec.layer_sizes):
            w_off = off
            off += wshape[0] * wshape[1]
            b_off = off
            off += bshape[0]
            self.offsets.append((w_off, b_off, wshape))
        self.total = off

    def flat_index(self, layer: int, kind: str, row: int, col: int = 0) -> int:
        w_off, b_off, wshape = self.offsets[layer]
        if kind == "w":
            if not (0 <= row < wshape[0] and 0 <= col < wshape[1]):
                raise InvalidInput("weight index out of range")
            return w_off + row * wshape[1] + col
        if kind == "b":
            if not 0 <= row < wshape[0]:
                raise InvalidInput("bias index out of range")
            return b_off + row
        raise InvalidInput(f"kind must be 'w' or 'b', got {kind!r}")

    def unpack(self, theta: np.ndarray):
        return backend.unpack(np.asarray(theta, dtype=np.float64), self.spec.layer_sizes)


def init_params(spec: ModelSpec, rng: RngState, final_layer_zero: bool = False,
                scale: float | None = None) -> np.ndarray:
    """Draw initial parameters.

    Hidden weights are He-scaled Gaussian, variance scale/fan_in with scale
    defaulting to 2; biases start at 0.  With final_layer_zero the last
    layer's weights and biases are exactly 0, which pins the initial model to
    the constant log(1/K) output the exact kernel representation needs.
    """
    sizes = spec.layer_sizes
    scale = 2.0 if scale is None else float(scale)
    layers = []
    n_layers = len(sizes) - 1
    for l in range(n_layers):
        fan_in = sizes[l]
        if final_layer_zero and l == n_layers - 1:
            w = np.zeros((sizes[l + 1], sizes[l]))
        else:
            w = rng.normal(size=(sizes[l + 1], sizes[l])) * np.sqrt(scale / fan_in)
        b = np.zeros(sizes[l + 1])
        layers.append((w, b))
    return backend.pack(layers, sizes)


def _check_finite_logp(logp: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logp)):
        raise NumericalError("forward pass produced non-finite values")
    return logp


def forward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Log-probabilities (K,) for a single input."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != spec.input_dim:
        raise InvalidInput(f"input has dimension {x.size}, expected {spec.input_dim}")
    logp = backend.forward(np.asarray(theta, dtype=np.float64), spec.layer_sizes, x[None, :])
    return _check_finite_logp(logp)[0]


def forward_batch(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Log-probabilities (B, K) for a batch of inputs."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != spec.input_dim:
        raise InvalidInput(f"inputs have dimension {X.shape[1]}, expected {spec.input_dim}")
    logp = backend.forward(np.asarray(theta, dtype=np.float64), spec.layer_sizes, X)
    return _check_finite_logp(logp)


def predict_labels(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Argmax class per row, ties broken toward the lowest index."""
    return np.argmax(forward_batch(spec, theta, X), axis=1)


def cce_loss(log_probs: np.ndarray, one_hot: np.ndarray) -> float:
    """Cross entropy -sum_k y_k log p_k for log-softmax outputs."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    one_hot = np.asarray(one_hot, dtype=np.float64)
    return float(-(one_hot * log_probs).sum())


def backprop_param_grad(spec: ModelSpec, theta: np.ndarray, x: np.ndarray,
                        y_one_hot: np.ndarray) -> np.ndarray:
    """Exact gradient of cce_loss(forward(x), y) with respect to theta."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    c = -np.asarray(y_one_hot, dtype=np.float64).reshape(1, -1)
    grad, _ = backend.weighted_grad_sum(np.asarray(theta, dtype=np.float64),
                                        spec.layer_sizes, x, c)
    return grad


def param_jacobian(spec: ModelSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Rows are grad_theta of each class log-probability; shape (K, M)."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    jac = backend.class_jacobians(np.asarray(theta, dtype=np.float64),
                                  spec.layer_sizes, x)
    return jac[0]


def input_gradient(spec: ModelSpec, theta: np.ndarray, x: np.ndarray,
                   y_one_hot: np.ndarray | None = None,
                   class_index: int | None = None) -> np.ndarray:
    """Gradient with respect to the input of a scalar readout.

    Pass y_one_hot for the cross-entropy loss gradient, or class_index for
    the gradient of that class's log-probability.  Exactly one must be given.
    """
    if (y_one_hot is None) == (class_index is None):
        raise InvalidInput("pass exactly one of y_one_hot or class_index")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if y_one_hot is not None:
        c = -np.asarray(y_one_hot, dtype=np.float64).reshape(1, -1)
    else:
        c = np.zeros((1, spec.n_classes))
        c[0, int(class_index)] = 1.0
    g = backend.input_grads(np.asarray(theta, dtype=np.float64),
                            spec.layer_sizes, x, c)
    return g[0]


# ---------------------------------------------------------------------------
# Checkpoint serialization: versioned binary plus JSON for inspection
# ---------------------------------------------------------------------------

_MAGIC = b"EPKT"
_VERSION = 1


def save_checkpoint(path, spec: ModelSpec, theta: np.ndarray) -> None:
    """Binary checkpoint: magic, version, JSON header, little-endian f64 payload."""
    theta = np.ascontiguousarray(theta, dtype="<f8")
    header = json.dumps({"layer_sizes": list(spec.layer_sizes),
                         "n_params": int(theta.size)}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(theta.tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (spec, theta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise InvalidInput("not a model checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != _VERSION:
        raise InvalidInput(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + header_len].decode())
    spec = ModelSpec(tuple(header["layer_sizes"]))
    theta = np.frombuffer(blob[12 + header_len:], dtype="<f8").astype(np.float64)
    if theta.size != header["n_params"] or theta.size != spec.n_params:
        raise InvalidInput("checkpoint payload size mismatch")
    return spec, theta


def spec_to_json(spec: ModelSpec, theta: np.ndarray | None = None) -> str:
    doc = {"layer_sizes": list(spec.layer_sizes)}
    if theta is not None:
        doc["theta"] = np.asarray(theta, dtype=np.float64).tolist()
    return json.dumps(doc, sort_keys=True)


def spec_from_json(text: str):
    doc = json.loads(text)
    spec = ModelSpec(tuple(doc["layer_sizes"]))
    theta = np.array(doc["theta"], dtype=np.float64) if "theta" in doc else None
    return spec, theta
