"""LSTM and fully-connected blocks built on :mod:`dicap.autodiff`.

All functions accept batched inputs: the leading axis is the batch of
parallel trajectory lanes, the last axis is the feature axis.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "identity": lambda x: x}


@dataclass
class LstmParams:
    """Gate weights stacked column-wise in the order (input, forget, output, candidate)."""

    input_dim: int
    hidden_dim: int
    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator, name: str = "lstm"):
        fan_in = input_dim + hidden_dim
        bound = 1.0 / np.sqrt(fan_in)
        h4 = 4 * hidden_dim
        w_x = rng.uniform(-bound, bound, size=(input_dim, h4))
        w_h = rng.uniform(-bound, bound, size=(hidden_dim, h4))
        bias = np.zeros(h4)
        bias[hidden_dim : 2 * hidden_dim] = 1.0
        return cls(
            input_dim,
            hidden_dim,
            ad.parameter(w_x, f"{name}.w_x"),
            ad.parameter(w_h, f"{name}.w_h"),
            ad.parameter(bias, f"{name}.bias"),
        )

    @property
    def params(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.bias]

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden_dim))
        return Tensor(z), Tensor(z.copy())


@dataclass
class MlpParams:
    widths: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    @classmethod
    def init(
        cls,
        widths: list[int],
        rng: np.random.Generator,
        hidden_activation: str = "tanh",
        output_activation: str = "identity",
        name: str = "mlp",
    ):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {hidden_activation!r}")
        if output_activation not in ("identity", "none", "softmax"):
            raise ValueError(f"unknown output activation {output_activation!r}")
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(a)
            weights.append(ad.parameter(rng.uniform(-bound, bound, size=(a, b)), f"{name}.w{i}"))
            biases.append(ad.parameter(np.zeros(b), f"{name}.b{i}"))
        return cls(list(widths), weights, biases, hidden_activation, output_activation)

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass(frozen=True)
class RnnFunctionClassNote:
    """Record of the sigmoid-RNN class used in the consistency theory of DINE.

    s_{t+1} = -alpha * s_t + A sigmoid(s_t + B x_t),  y_t = C s_t.

    Not instantiated by any trainer; the estimators and generators here use
    LSTMs instead.
    """

    state_decay: float = 0.0
    nonlinearity: str = "sigmoid"
    matrices: tuple[str, ...] = field(default=("A", "B", "C"))


def lstm_step(params: LstmParams, x_t, state):
    """One LSTM step. ``x_t`` is (batch, input_dim); ``state`` is (h, c)."""
    x_t = ad.constant(x_t)
    h, c = state
    if x_t.shape[-1] != params.input_dim:
        raise ShapeError("lstm_step", x_t.shape, (params.input_dim,))
    if h.shape[-1] != params.hidden_dim or c.shape != h.shape:
        raise ShapeError("lstm_step", h.shape, c.shape, (params.hidden_dim,))
    z = ad.add(ad.matmul(x_t, params.w_x), params.bias)
    return _cell(params, z, h, c)


def _cell(params: LstmParams, z_x, h, c):
    hd = params.hidden_dim
    hc = ad.lstm_gates(ad.add(z_x, ad.matmul(h, params.w_h)), c)
    return hc[:, :hd], hc[:, hd:]


def lstm_sequence(params: LstmParams, xs, state):
    """Run the LSTM over ``xs`` of shape (steps, batch, input_dim).

    Returns the stacked hidden states (steps, batch, hidden) and the final state.
    The input projection for all steps is done in one product.
    """
    xs = ad.constant(xs)
    if xs.value.ndim != 3 or xs.shape[-1] != params.input_dim:
        raise ShapeError("lstm_sequence", xs.shape, (params.input_dim,))
    steps = xs.shape[0]
    proj = ad.add(ad.matmul(xs, params.w_x), params.bias)
    h, c = state
    hs = []
    for t in range(steps):
        h, c = _cell(params, proj[t], h, c)
        hs.append(h)
    return ad.stack(hs, axis=0), (h, c)


def mlp_forward(params: MlpParams, x):
    x = ad.constant(x)
    if x.shape[-1] != params.widths[0]:
        raise ShapeError("mlp_forward", x.shape, (params.widths[0],))
    act = ACTIVATIONS[params.hidden_activation]
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = ad.add(ad.matmul(x, w), b)
        if i < n - 1:
            x = act(x)
    if params.output_activation == "softmax":
        x = ad.softmax(x, axis=-1)
    return x


def softmax_pmf(logits) -> np.ndarray:
    """Shift-stabilized softmax of a logit vector (or batch of vectors)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(idx, depth: int) -> np.ndarray:
    """One-hot rows; negative indices (the null symbol) map to all-zero rows."""
    idx = np.asarray(idx)
    out = np.zeros(idx.shape + (depth,))
    valid = idx >= 0
    out[valid, idx[valid]] = 1.0
    return out


# ---------------------------------------------------------------------------
# serialization
#
# Layout (little-endian):
#   8 bytes   magic b"DICAPNN\0"
#   uint32    format version (1)
#   uint32    manifest length in bytes
#   manifest  UTF-8 JSON: {"meta": {...}, "tensors": [{"name": str, "shape": [int]}]}
#   payload   float64 values of every tensor, in manifest order, row-major

MAGIC = b"DICAPNN\0"
VERSION = 1


def save_params(path, tensors: dict[str, Tensor], meta: dict | None = None) -> None:
    manifest = {
        "meta": meta or {},
        "tensors": [{"name": k, "shape": list(t.shape)} for k, t in tensors.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    version, mlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    manifest = json.loads(data[16 : 16 + mlen])
    offset = 16 + mlen
    out = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        out[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes")
    return out, manifest["meta"]
