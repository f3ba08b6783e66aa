"""FCN, GRU and causal-Transformer force estimators built on fbgforce.nn.

Inputs are 100x3 windows flattened to 300 features. The FCN maps one window
to one force; the sequence models map a run of windows to one force per
window without looking ahead.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from fbgforce.core import N_SENSORS, WINDOW_ROWS, FbgForceError
from fbgforce.nn import (
    LEAKY_SLOPE,
    Params,
    ShapeMismatch,
    causal_attention,
    causal_attention_backward,
    gru_init_shapes,
    gru_sequence,
    gru_sequence_backward,
    huber_loss,
    leaky_relu,
    leaky_relu_backward,
    linear,
    linear_backward,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_VERSION = 1
FFN_MULT = 4


class InvalidSpec(FbgForceError, ValueError):
    pass


class KindMismatch(FbgForceError, ValueError):
    pass


class ModelKind(str, Enum):
    FCN = "fcn"
    RNN = "rnn"
    TRANSFORMER = "transformer"

    @property
    def sequential(self) -> bool:
        return self is not ModelKind.FCN


def default_heads(hidden: int) -> int:
    for heads in (12, 8, 4, 2, 1):
        if hidden % heads == 0:
            return heads
    return 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor. heads=0 on a transformer picks default_heads(hidden)."""

    kind: ModelKind
    layers: int = 2
    hidden: int = 64
    heads: int = 0
    input_dim: int = WINDOW_ROWS * N_SENSORS
    output_dim: int = 1
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", ModelKind(self.kind))
        except ValueError:
            raise InvalidSpec(f"unknown model kind {self.kind!r}") from None
        if self.layers < 1:
            raise InvalidSpec(f"layers must be >= 1, got {self.layers}")
        if self.hidden < 1:
            raise InvalidSpec(f"hidden must be >= 1, got {self.hidden}")
        if self.output_dim != 1:
            raise InvalidSpec(f"output_dim must be 1, got {self.output_dim}")
        if self.kind is ModelKind.TRANSFORMER:
            if self.heads == 0:
                object.__setattr__(self, "heads", default_heads(self.hidden))
            if self.heads < 1 or self.hidden % self.heads:
                raise InvalidSpec(f"hidden {self.hidden} is not divisible by {self.heads} heads")
        elif self.heads:
            raise InvalidSpec(f"heads only applies to transformer models, got {self.heads}")

    @property
    def label(self) -> str:
        return f"{self.kind.value}-{self.layers}-{self.hidden}"

    def as_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "layers": self.layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ModelSpec:
        return cls(**data)


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in initialisation order."""
    H = spec.hidden
    shapes: dict[str, tuple[int, ...]] = {"enc.W": (H, spec.input_dim), "enc.b": (H,)}
    for i in range(spec.layers):
        if spec.kind is ModelKind.FCN:
            shapes[f"fc{i}.W"] = (H, H)
            shapes[f"fc{i}.b"] = (H,)
        elif spec.kind is ModelKind.RNN:
            for name, shape in gru_init_shapes(H, H).items():
                shapes[f"gru{i}.{name}"] = shape
        else:
            for proj in ("q", "k", "v", "o"):
                shapes[f"blk{i}.W{proj}"] = (H, H)
                shapes[f"blk{i}.b{proj}"] = (H,)
            shapes[f"blk{i}.W1"] = (FFN_MULT * H, H)
            shapes[f"blk{i}.b1"] = (FFN_MULT * H,)
            shapes[f"blk{i}.W2"] = (H, FFN_MULT * H)
            shapes[f"blk{i}.b2"] = (H,)
    shapes["dec.W"] = (spec.output_dim, H)
    shapes["dec.b"] = (spec.output_dim,)
    return shapes


def _fan_in(name: str, shapes: dict[str, tuple[int, ...]]) -> int:
    prefix, leaf = name.rsplit(".", 1)
    weight = name if leaf.startswith("W") else f"{prefix}.W{leaf[1:]}"
    return shapes[weight][-1]


@dataclass(eq=False)
class ModelParams:
    spec: ModelSpec
    tensors: Params
    x_scale: float = 1.0
    y_scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def copy(self) -> ModelParams:
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()}, meta=dict(self.meta))

    def layer(self, prefix: str) -> Params:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def save(self, path: Path | str) -> Path:
        from fbgforce.dataio import save_arrays

        meta = {
            "kind": CHECKPOINT_KIND,
            "version": CHECKPOINT_VERSION,
            "spec": self.spec.as_dict(),
            "x_scale": self.x_scale,
            "y_scale": self.y_scale,
            "order": list(self.tensors),
            "meta": self.meta,
        }
        return save_arrays(path, self.tensors, meta)

    @classmethod
    def load(cls, path: Path | str) -> ModelParams:
        from fbgforce.dataio import CorruptCheckpoint, load_arrays

        arrays, meta = load_arrays(path)
        if meta.get("kind") != CHECKPOINT_KIND or meta.get("version") != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"{path}: not a version {CHECKPOINT_VERSION} model checkpoint")
        spec = ModelSpec.from_dict(meta["spec"])
        expected = param_shapes(spec)
        for name, shape in expected.items():
            if name not in arrays or arrays[name].shape != shape:
                got = arrays[name].shape if name in arrays else "missing"
                raise KindMismatch(f"{path}: tensor {name} is {got}, {spec.label} needs {shape}")
        return cls(
            spec=spec,
            tensors={name: arrays[name] for name in expected},
            x_scale=float(meta["x_scale"]),
            y_scale=float(meta["y_scale"]),
            meta=meta.get("meta", {}),
        )


def build_model(spec: ModelSpec, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, drawn in param_shapes order."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(spec)
    tensors = {}
    for name, shape in shapes.items():
        bound = 1.0 / np.sqrt(_fan_in(name, shapes))
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(spec=spec, tensors=tensors)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-np.log(10000.0) * (2 * (np.arange(dim) // 2)) / dim)
    angles = pos * rates[None, :]
    return np.where(np.arange(dim) % 2 == 0, np.sin(angles), np.cos(angles))


def flatten_windows(x) -> np.ndarray:
    """(..., 100, 3) or (..., 300) to (..., 300); anything else is ShapeMismatch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] == (WINDOW_ROWS, N_SENSORS):
        return x.reshape(*x.shape[:-2], WINDOW_ROWS * N_SENSORS)
    if x.shape[-1:] == (WINDOW_ROWS * N_SENSORS,):
        return x
    raise ShapeMismatch(f"expected windows of {WINDOW_ROWS}x{N_SENSORS}, got shape {x.shape}")


# -- networks ----------------------------------------------------------------
# forward(model, x) works in scaled units and returns (out, cache);
# backward(model, dout, cache) returns gradients for every tensor.


def _decode(model: ModelParams, h: np.ndarray):
    t = model.tensors
    o, c_lin = linear(h, t["dec.W"], t["dec.b"])
    o, c_act = leaky_relu(o, model.spec.slope)
    return o[..., 0], (c_lin, c_act)


def _decode_backward(dout: np.ndarray, cache, grads: Params) -> np.ndarray:
    c_lin, c_act = cache
    do = leaky_relu_backward(dout[..., None], c_act)
    dh, grads["dec.W"], grads["dec.b"] = linear_backward(do, c_lin)
    return dh


class FcnNet:
    @staticmethod
    def forward(model: ModelParams, x: np.ndarray):
        t = model.tensors
        h, c_enc = linear(x, t["enc.W"], t["enc.b"])
        hidden = []
        for i in range(model.spec.layers):
            h, c_lin = linear(h, t[f"fc{i}.W"], t[f"fc{i}.b"])
            h, c_act = leaky_relu(h, model.spec.slope)
            hidden.append((c_lin, c_act))
        out, c_dec = _decode(model, h)
        return out, (c_enc, hidden, c_dec)

    @staticmethod
    def backward(model: ModelParams, dout: np.ndarray, cache) -> Params:
        c_enc, hidden, c_dec = cache
        grads: Params = {}
        dh = _decode_backward(dout, c_dec, grads)
        for i in reversed(range(model.spec.layers)):
            c_lin, c_act = hidden[i]
            dh = leaky_relu_backward(dh, c_act)
            dh, grads[f"fc{i}.W"], grads[f"fc{i}.b"] = linear_backward(dh, c_lin)
        _, grads["enc.W"], grads["enc.b"] = linear_backward(dh, c_enc)
        return grads


class GruNet:
    @staticmethod
    def initial_state(model: ModelParams, batch: int) -> list[np.ndarray]:
        return [np.zeros((batch, model.spec.hidden)) for _ in range(model.spec.layers)]

    @staticmethod
    def forward(model: ModelParams, xs: np.ndarray, state: list[np.ndarray] | None = None):
        """xs (B, T, 300); returns (out (B, T), final state per layer, cache)."""
        t = model.tensors
        if state is None:
            state = GruNet.initial_state(model, xs.shape[0])
        h, c_enc = linear(xs, t["enc.W"], t["enc.b"])
        layer_caches = []
        final = []
        for i in range(model.spec.layers):
            h, caches = gru_sequence(h, state[i], model.layer(f"gru{i}"))
            layer_caches.append(caches)
            final.append(h[:, -1].copy())
        out, c_dec = _decode(model, h)
        return out, final, (c_enc, layer_caches, c_dec)

    @staticmethod
    def backward(model: ModelParams, dout: np.ndarray, cache) -> Params:
        """Gradients within the unrolled segment; the carried-in state is treated as constant."""
        c_enc, layer_caches, c_dec = cache
        grads: Params = {}
        dh = _decode_backward(dout, c_dec, grads)
        for i in reversed(range(model.spec.layers)):
            dh, _, layer_grads = gru_sequence_backward(dh, layer_caches[i], model.layer(f"gru{i}"))
            for name, g in layer_grads.items():
                grads[f"gru{i}.{name}"] = g
        _, grads["enc.W"], grads["enc.b"] = linear_backward(dh, c_enc)
        return grads


class TransformerNet:
    @staticmethod
    def forward(model: ModelParams, xs: np.ndarray):
        """xs (B, T, 300), one token per window; returns (out (B, T), cache)."""
        t = model.tensors
        spec = model.spec
        h, c_enc = linear(xs, t["enc.W"], t["enc.b"])
        h = h + positional_encoding(xs.shape[1], spec.hidden)[None]
        blocks = []
        for i in range(spec.layers):
            p = f"blk{i}."
            q, c_q = linear(h, t[p + "Wq"], t[p + "bq"])
            k, c_k = linear(h, t[p + "Wk"], t[p + "bk"])
            v, c_v = linear(h, t[p + "Wv"], t[p + "bv"])
            a, c_att = causal_attention(q, k, v, spec.heads)
            o, c_o = linear(a, t[p + "Wo"], t[p + "bo"])
            h = h + o
            f, c_1 = linear(h, t[p + "W1"], t[p + "b1"])
            f, c_act = leaky_relu(f, spec.slope)
            f, c_2 = linear(f, t[p + "W2"], t[p + "b2"])
            h = h + f
            blocks.append((c_q, c_k, c_v, c_att, c_o, c_1, c_act, c_2))
        out, c_dec = _decode(model, h)
        return out, (c_enc, blocks, c_dec)

    @staticmethod
    def backward(model: ModelParams, dout: np.ndarray, cache) -> Params:
        c_enc, blocks, c_dec = cache
        grads: Params = {}
        dh = _decode_backward(dout, c_dec, grads)
        for i in reversed(range(model.spec.layers)):
            p = f"blk{i}."
            c_q, c_k, c_v, c_att, c_o, c_1, c_act, c_2 = blocks[i]
            df, grads[p + "W2"], grads[p + "b2"] = linear_backward(dh, c_2)
            df = leaky_relu_backward(df, c_act)
            df, grads[p + "W1"], grads[p + "b1"] = linear_backward(df, c_1)
            dh = dh + df
            da, grads[p + "Wo"], grads[p + "bo"] = linear_backward(dh, c_o)
            dq, dk, dv = causal_attention_backward(da, c_att)
            dq, grads[p + "Wq"], grads[p + "bq"] = linear_backward(dq, c_q)
            dk, grads[p + "Wk"], grads[p + "bk"] = linear_backward(dk, c_k)
            dv, grads[p + "Wv"], grads[p + "bv"] = linear_backward(dv, c_v)
            dh = dh + dq + dk + dv
        _, grads["enc.W"], grads["enc.b"] = linear_backward(dh, c_enc)
        return grads


def loss_and_grads(
    model: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    delta: float = 1.0,
    state: list[np.ndarray] | None = None,
):
    """Huber loss in grams and its parameter gradients.

    FCN takes x (N, 300) and y (N,); sequence models take x (B, T, 300) and
    y (B, T). Returns (loss, grads, state), state being the RNN carry.
    """
    xs = flatten_windows(x) * model.x_scale
    kind = model.spec.kind
    if kind is ModelKind.FCN:
        out, cache = FcnNet.forward(model, xs)
    elif kind is ModelKind.RNN:
        out, state, cache = GruNet.forward(model, xs, state)
    else:
        out, cache = TransformerNet.forward(model, xs)
    loss, dpred = huber_loss(model.y_scale * out, y, delta)
    dout = model.y_scale * dpred
    if kind is ModelKind.FCN:
        grads = FcnNet.backward(model, dout, cache)
    elif kind is ModelKind.RNN:
        grads = GruNet.backward(model, dout, cache)
    else:
        grads = TransformerNet.backward(model, dout, cache)
    return loss, grads, state


# -- prediction --------------------------------------------------------------


def _require(model: ModelParams, sequential: bool) -> None:
    if model.spec.kind.sequential != sequential:
        wanted = "a sequence model (rnn, transformer)" if sequential else "an fcn model"
        raise KindMismatch(f"{model.spec.label} given where {wanted} is required")


def predict_batch(model: ModelParams, windows) -> np.ndarray:
    """Independent FCN predictions (grams) for a stack of windows."""
    _require(model, sequential=False)
    x = flatten_windows(windows) * model.x_scale
    if x.ndim == 1:
        x = x[None]
    out, _ = FcnNet.forward(model, x)
    return model.y_scale * out


def predict_instant(model: ModelParams, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape not in ((WINDOW_ROWS, N_SENSORS), (WINDOW_ROWS * N_SENSORS,)):
        raise ShapeMismatch(f"expected one {WINDOW_ROWS}x{N_SENSORS} window, got {x.shape}")
    return float(predict_batch(model, x)[0])


def predict_sequence(model: ModelParams, xs) -> np.ndarray:
    """Causal per-window predictions (grams) over one episode's windows."""
    _require(model, sequential=True)
    x = flatten_windows(np.asarray(xs, dtype=np.float64))
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a (T, {WINDOW_ROWS}, {N_SENSORS}) sequence, got {np.shape(xs)}")
    if len(x) == 0:
        return np.empty(0)
    x = x[None] * model.x_scale
    if model.spec.kind is ModelKind.RNN:
        out, _, _ = GruNet.forward(model, x)
    else:
        out, _ = TransformerNet.forward(model, x)
    return model.y_scale * out[0]


def predict_episode(model: ModelParams, windows) -> np.ndarray:
    if model.spec.kind.sequential:
        return predict_sequence(model, windows)
    if len(windows) == 0:
        return np.empty(0)
    return predict_batch(model, windows)


class SequencePredictor:
    """Window-at-a-time causal predictor.

    The RNN carries its hidden state between calls; the transformer keeps the
    token history and re-attends over it. With max_history the transformer
    keeps only the latest max_history tokens, so each step costs the same as
    predict_sequence over those windows alone; without it the history grows
    for the lifetime of the predictor.
    """

    def __init__(self, model: ModelParams, max_history: int | None = None):
        if max_history is not None and max_history < 1:
            raise InvalidSpec(f"max_history must be >= 1, got {max_history}")
        self.model = model
        self.max_history = max_history
        self._state: list[np.ndarray] | None = None
        self._tokens: deque[np.ndarray] = deque(maxlen=max_history)

    def reset(self) -> None:
        self._state = None
        self._tokens.clear()

    def step(self, window) -> float:
        model = self.model
        kind = model.spec.kind
        if kind is ModelKind.FCN:
            return predict_instant(model, window)
        token = flatten_windows(np.asarray(window, dtype=np.float64)).ravel() * model.x_scale
        if kind is ModelKind.RNN:
            out, self._state, _ = GruNet.forward(model, token[None, None], self._state)
            return float(model.y_scale * out[0, -1])
        self._tokens.append(token)
        out, _ = TransformerNet.forward(model, np.array(self._tokens)[None])
        return float(model.y_scale * out[0, -1])
