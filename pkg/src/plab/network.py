"""ReLU MLP with exact gradients and Hessian-vector products.

Parameters live in one flat float64 vector laid out layer by layer as
``[W_1 (row-major, d_1 x d_0), b_1, W_2, b_2, ...]``; biases are part of the
parameter vector and therefore of every Hessian computed here.

Batches are row-major: ``x`` has shape ``(batch, d_0)``. Hidden layers are
addressed with 0-based indices ``0 .. L-2``; the logits layer is never a
"hidden" layer.

The ReLU derivative at exactly zero is taken to be 0, and its second
derivative is 0 everywhere, so :func:`hvp` is the exact Hessian wherever the
loss is twice differentiable.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError
from .numerics import RngStream

LOSSES = ("softmax_cross_entropy", "mean_squared_error")


@dataclass(frozen=True)
class MlpSpec:
    layer_dims: tuple[int, ...]
    loss: str = "softmax_cross_entropy"
    activation: str = "relu"
    init: str = "kaiming_uniform"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise InvalidInputError("an MLP needs at least input and output dims")
        if any(d < 1 for d in dims):
            raise InvalidInputError(f"all layer dims must be >= 1, got {dims}")
        if self.loss not in LOSSES:
            raise InvalidInputError(f"unknown loss {self.loss!r}")
        if self.activation != "relu":
            raise InvalidInputError("only relu activations are supported")
        if self.init != "kaiming_uniform":
            raise InvalidInputError("only kaiming_uniform init is supported")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_hidden_layers(self) -> int:
        return self.n_layers - 1

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum(d[l + 1] * (d[l] + 1) for l in range(self.n_layers))

    def layer_offsets(self) -> list[tuple[int, int, int]]:
        """``(weight_start, bias_start, bias_end)`` for each layer."""
        out, pos = [], 0
        d = self.layer_dims
        for l in range(self.n_layers):
            w0 = pos
            b0 = w0 + d[l + 1] * d[l]
            pos = b0 + d[l + 1]
            out.append((w0, b0, pos))
        return out

    def unit_param_indices(self, hidden_layer: int, unit: int) -> np.ndarray:
        """Flat indices of incoming weights, bias and outgoing weights of one hidden unit."""
        d = self.layer_dims
        offs = self.layer_offsets()
        w0, b0, _ = offs[hidden_layer]
        fan_in = d[hidden_layer]
        incoming = w0 + unit * fan_in + np.arange(fan_in)
        bias = np.array([b0 + unit])
        nw0, _, _ = offs[hidden_layer + 1]
        outgoing = nw0 + np.arange(d[hidden_layer + 2]) * d[hidden_layer + 1] + unit
        return np.concatenate([incoming, bias, outgoing])


@dataclass
class ParamVector:
    """Flat parameter vector with per-layer ``(W, b)`` views."""

    flat: np.ndarray
    spec: MlpSpec

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise InvalidInputError(
                f"flat vector has shape {self.flat.shape}, expected ({self.spec.n_params},)"
            )

    def weight(self, layer: int) -> np.ndarray:
        w0, b0, _ = self.spec.layer_offsets()[layer]
        d = self.spec.layer_dims
        return self.flat[w0:b0].reshape(d[layer + 1], d[layer])

    def bias(self, layer: int) -> np.ndarray:
        _, b0, b1 = self.spec.layer_offsets()[layer]
        return self.flat[b0:b1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        d = self.spec.layer_dims
        return [
            (self.flat[w0:b0].reshape(d[l + 1], d[l]), self.flat[b0:b1])
            for l, (w0, b0, b1) in enumerate(self.spec.layer_offsets())
        ]

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), self.spec)

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        return ParamVector(flat, self.spec)

    @property
    def size(self) -> int:
        return self.flat.size


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[None, :]
        self.y = np.asarray(self.y)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]  # a_l, input to layer l
    pre: list[np.ndarray]  # z_l
    post: list[np.ndarray]  # h_l for hidden layers only
    logits: np.ndarray
    probs: np.ndarray | None = None  # softmax output for CE
    loss_grad_logits: np.ndarray | None = field(default=None, repr=False)


# -- operation counting ----------------------------------------------------


class OpCounter:
    """Counts multiply-adds spent in matrix products while active."""

    def __init__(self):
        self.madds = 0


_active_counters: list[OpCounter] = []


@contextlib.contextmanager
def count_ops():
    counter = OpCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _active_counters:
        n = a.shape[0] * a.shape[1] * b.shape[1]
        for c in _active_counters:
            c.madds += n
    return a @ b


# -- init ------------------------------------------------------------------


def init_params(spec: MlpSpec, stream: RngStream) -> ParamVector:
    """Kaiming-uniform weights in ``[-sqrt(6/fan_in), sqrt(6/fan_in)]``, zero biases."""
    flat = np.zeros(spec.n_params)
    d = spec.layer_dims
    for l, (w0, b0, _) in enumerate(spec.layer_offsets()):
        bound = np.sqrt(6.0 / d[l])
        flat[w0:b0] = stream.split(l).uniform(-bound, bound, size=b0 - w0)
    return ParamVector(flat, spec)


def reinit_unit_incoming(params: ParamVector, hidden_layer: int, unit: int,
                         stream: RngStream) -> None:
    """Redraw one unit's incoming weights from the init distribution (in place)."""
    fan_in = params.spec.layer_dims[hidden_layer]
    bound = np.sqrt(6.0 / fan_in)
    params.weight(hidden_layer)[unit, :] = stream.uniform(-bound, bound, size=fan_in)


# -- forward / backward ------------------------------------------------------


def _check_batch(spec: MlpSpec, batch: Batch) -> None:
    if batch.x.ndim != 2 or batch.x.shape[1] != spec.layer_dims[0]:
        raise InvalidInputError(
            f"batch input width {batch.x.shape[-1]} != d_0 = {spec.layer_dims[0]}"
        )
    if batch.x.shape[0] == 0:
        raise InvalidInputError("empty batch")
    if spec.loss == "softmax_cross_entropy":
        if batch.y.shape != (batch.x.shape[0],):
            raise InvalidInputError("CE targets must be a vector of class indices")
        if np.any(batch.y < 0) or np.any(batch.y >= spec.layer_dims[-1]):
            raise InvalidInputError("class index out of range")
    else:
        if batch.y.shape != (batch.x.shape[0], spec.layer_dims[-1]):
            raise InvalidInputError("MSE targets must have shape (batch, d_L)")


def logits_only(params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Network outputs without building a trace (used for evaluation)."""
    h = np.asarray(x, dtype=np.float64)
    layers = params.layers()
    for l, (W, b) in enumerate(layers):
        h = _mm(h, W.T) + b
        if l < len(layers) - 1:
            np.maximum(h, 0.0, out=h)
    return h


def forward(params: ParamVector, batch: Batch) -> tuple[float, ForwardTrace]:
    spec = params.spec
    _check_batch(spec, batch)
    layers = params.layers()
    a = batch.x
    inputs, pre, post = [], [], []
    for l, (W, b) in enumerate(layers):
        inputs.append(a)
        z = _mm(a, W.T) + b
        pre.append(z)
        if l < len(layers) - 1:
            a = np.maximum(z, 0.0)
            post.append(a)
    logits = pre[-1]
    n = logits.shape[0]
    if spec.loss == "softmax_cross_entropy":
        m = logits.max(axis=1, keepdims=True)
        shifted = logits - m
        lse = np.log(np.exp(shifted).sum(axis=1))
        y = batch.y.astype(np.int64)
        loss = float(np.mean(lse - shifted[np.arange(n), y]))
        probs = np.exp(shifted - lse[:, None])
        g = probs.copy()
        g[np.arange(n), y] -= 1.0
        g /= n
    else:
        r = logits - batch.y
        loss = float(np.sum(r * r) / n)
        probs = None
        g = 2.0 * r / n
    trace = ForwardTrace(inputs, pre, post, logits, probs, g)
    return loss, trace


def backward(params: ParamVector, trace: ForwardTrace,
             dlogits: np.ndarray | None = None,
             feature_grads: dict[int, np.ndarray] | None = None,
             keep_deltas: bool = False):
    """Reverse pass. Returns the flat gradient (and per-layer deltas if asked).

    ``feature_grads`` maps hidden-layer index -> dObjective/dh for that layer;
    they are injected on top of whatever flows back from above. Pass
    ``dlogits`` of zeros to backpropagate feature gradients alone.
    """
    spec = params.spec
    layers = params.layers()
    L = len(layers)
    delta = trace.loss_grad_logits if dlogits is None else dlogits
    grad = np.empty(spec.n_params)
    deltas: list[np.ndarray | None] = [None] * L
    offs = spec.layer_offsets()
    for l in range(L - 1, -1, -1):
        if keep_deltas:
            deltas[l] = delta
        W, _ = layers[l]
        w0, b0, b1 = offs[l]
        grad[w0:b0] = _mm(delta.T, trace.inputs[l]).ravel()
        grad[b0:b1] = delta.sum(axis=0)
        if l > 0:
            gh = _mm(delta, W)
            if feature_grads and (l - 1) in feature_grads:
                gh = gh + feature_grads[l - 1]
            delta = gh * (trace.pre[l - 1] > 0)
    if keep_deltas:
        return grad, deltas
    return grad


def loss_grad(params: ParamVector, batch: Batch) -> tuple[float, ParamVector]:
    loss, trace = forward(params, batch)
    return loss, ParamVector(backward(params, trace), params.spec)


def loss_value(params: ParamVector, batch: Batch) -> float:
    return forward(params, batch)[0]


def hvp(params: ParamVector, batch: Batch, v) -> ParamVector:
    """Exact Hessian-vector product by the R-operator (forward-over-reverse).

    ``v`` may be a ParamVector or a flat array. The R-forward pass
    propagates directional derivatives of the pre-activations; the R-backward
    pass differentiates the ordinary backward pass along them.
    """
    spec = params.spec
    vflat = v.flat if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)
    if vflat.shape != (spec.n_params,):
        raise InvalidInputError("direction has the wrong length")
    _, trace = forward(params, batch)
    layers = params.layers()
    vlayers = ParamVector(vflat, spec).layers()
    L = len(layers)
    n = trace.logits.shape[0]

    # R-forward: R(a_l) is None for the network input
    r_inputs: list[np.ndarray | None] = [None]
    r_pre: list[np.ndarray] = []
    for l in range(L):
        W, _ = layers[l]
        VW, Vb = vlayers[l]
        rz = _mm(trace.inputs[l], VW.T) + Vb
        if r_inputs[l] is not None:
            rz += _mm(r_inputs[l], W.T)
        r_pre.append(rz)
        if l < L - 1:
            r_inputs.append(rz * (trace.pre[l] > 0))

    delta = trace.loss_grad_logits
    rz_out = r_pre[-1]
    if spec.loss == "softmax_cross_entropy":
        p = trace.probs
        r_delta = (p * rz_out - p * np.sum(p * rz_out, axis=1, keepdims=True)) / n
    else:
        r_delta = 2.0 * rz_out / n

    out = np.empty(spec.n_params)
    offs = spec.layer_offsets()
    for l in range(L - 1, -1, -1):
        W, _ = layers[l]
        VW, _ = vlayers[l]
        w0, b0, b1 = offs[l]
        hw = _mm(r_delta.T, trace.inputs[l])
        if r_inputs[l] is not None:
            hw += _mm(delta.T, r_inputs[l])
        out[w0:b0] = hw.ravel()
        out[b0:b1] = r_delta.sum(axis=0)
        if l > 0:
            mask = trace.pre[l - 1] > 0
            new_delta = _mm(delta, W) * mask
            r_delta = (_mm(r_delta, W) + _mm(delta, VW)) * mask
            delta = new_delta
    return ParamVector(out, spec)


def capture_features(trace: ForwardTrace, layer_select: Iterable[int] | None = None
                     ) -> dict[int, np.ndarray]:
    """Post-activation feature matrices of the selected hidden layers."""
    n_hidden = len(trace.post)
    sel = range(n_hidden) if layer_select is None else list(layer_select)
    out = {}
    for l in sel:
        if not 0 <= l < n_hidden:
            raise InvalidInputError(f"hidden layer index {l} out of range 0..{n_hidden - 1}")
        out[l] = trace.post[l]
    return out


def stack_features(traces: Sequence[ForwardTrace], layer_select=None) -> dict[int, np.ndarray]:
    feats = [capture_features(t, layer_select) for t in traces]
    return {l: np.vstack([f[l] for f in feats]) for l in feats[0]}


def trace_inputs(params: ParamVector, x: np.ndarray) -> ForwardTrace:
    """Forward trace for unlabeled inputs; the loss fields stay empty."""
    layers = params.layers()
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != params.spec.layer_dims[0]:
        raise InvalidInputError("input width does not match d_0")
    inputs, pre, post = [], [], []
    for l, (W, b) in enumerate(layers):
        inputs.append(a)
        z = _mm(a, W.T) + b
        pre.append(z)
        if l < len(layers) - 1:
            a = np.maximum(z, 0.0)
            post.append(a)
    return ForwardTrace(inputs, pre, post, pre[-1])


def hidden_preactivations(params: ParamVector, x: np.ndarray) -> list[np.ndarray]:
    """Pre-activations of every hidden layer for inputs ``x`` (no loss needed)."""
    h = np.asarray(x, dtype=np.float64)
    out = []
    layers = params.layers()
    for W, b in layers[:-1]:
        z = _mm(h, W.T) + b
        out.append(z)
        h = np.maximum(z, 0.0)
    return out
