"""L2 and effective-rank regularizers, plus the feature buffer drained by the ER step.

The effective rank of a feature matrix ``F`` is ``exp(H(p))`` where ``p`` is
the singular-value distribution ``s_i / sum_j s_j`` and ``H`` the natural-log
entropy. Its gradient is spectral: with ``S = sum_j s_j``,

    dER/ds_i = ER * (-ln p_i - H) / S,     dER/dF = U diag(dER/ds) V^T

and since ER is scale invariant, ``<dER/dF, F> = 0``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .network import Batch, ParamVector, backward, capture_features, trace_inputs
from .numerics import svd

# singular values at or below this fraction of s_max are treated as exact zeros
NULL_TOL = 1e-12
# relative gap under which neighbouring singular values count as degenerate
GAP_TOL = 1e-8


@dataclass
class ErankConfig:
    er_lr: float = 1e-3
    update_interval: int = 1
    er_batch: int | None = None
    layer_select: Sequence[int] | None = None

    def __post_init__(self):
        if self.er_lr < 0:
            raise InvalidInputError("er_lr must be non-negative")
        if self.update_interval < 1:
            raise InvalidInputError("update_interval must be >= 1")


def _entropy_terms(s: np.ndarray):
    keep = s > NULL_TOL * s[0]
    p = s[keep] / s[keep].sum()
    H = float(-np.sum(p * np.log(p)))
    return keep, p, H


def effective_rank(F) -> float:
    """``exp`` of the entropy of normalised singular values; 0 for an all-zero matrix."""
    A = np.asarray(F, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1:
        raise InvalidInputError("effective_rank needs a matrix with at least one row")
    _, s, _ = svd(A)
    if s.size == 0 or s[0] == 0.0:
        return 0.0
    # S * exp(-sum p ln s) with s scaled by s_max: exactly n for a flat spectrum
    keep, p, _ = _entropy_terms(s)
    r = s[keep] / s[0]
    return float(r.sum() * np.exp(-np.sum(p * np.log(r))))


def effective_rank_grad(F) -> tuple[np.ndarray, bool]:
    """Gradient of :func:`effective_rank` w.r.t. ``F``.

    Returns ``(grad, jittered)``. ``jittered`` is True when neighbouring
    nonzero singular values were closer than ``1e-8 * s_max`` and a
    deterministic ``1e-8 * s_max * i`` offset was subtracted from ``s_i``
    before differentiating.
    """
    A = np.asarray(F, dtype=np.float64)
    U, s, V = svd(A)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros_like(A), False
    keep = s > NULL_TOL * s[0]
    sk = s[keep]
    jittered = False
    if sk.size > 1 and np.min(-np.diff(sk)) < GAP_TOL * s[0]:
        sk = sk - GAP_TOL * s[0] * np.arange(sk.size)
        jittered = True
    S = sk.sum()
    p = sk / S
    H = -np.sum(p * np.log(p))
    er = np.exp(H)
    g = er * (-np.log(p) - H) / S
    G = (U[:, keep] * g) @ V[:, keep].T
    return G, jittered


class FeatureBuffer:
    """Per-layer FIFO of recent feature matrices, capacity ``U`` batches.

    Raw inputs are kept alongside so the ER gradient can be recomputed
    under the current parameters.
    """

    def __init__(self, capacity: int, layers: Sequence[int]):
        if capacity < 1:
            raise InvalidInputError("buffer capacity must be >= 1")
        self.capacity = int(capacity)
        self.layers = list(layers)
        self._feats = {l: deque(maxlen=self.capacity) for l in self.layers}
        self._inputs: deque = deque(maxlen=self.capacity)

    def push(self, features: dict[int, np.ndarray], x: np.ndarray | None = None) -> None:
        for l in self.layers:
            self._feats[l].append(features[l])
        if x is not None:
            self._inputs.append(x)

    def __len__(self) -> int:
        return len(self._feats[self.layers[0]]) if self.layers else 0

    def stacked(self) -> dict[int, np.ndarray]:
        return {l: np.vstack(list(q)) for l, q in self._feats.items() if q}

    def recent_inputs(self) -> list[np.ndarray]:
        return list(self._inputs)

    def clear(self) -> None:
        for q in self._feats.values():
            q.clear()
        self._inputs.clear()


def erank_loss(buffers: FeatureBuffer | dict[int, np.ndarray]) -> tuple[float, dict[int, float]]:
    """``-mean_l ER(stack(B_l))`` over the buffered layers."""
    stacked = buffers.stacked() if isinstance(buffers, FeatureBuffer) else buffers
    if not stacked or any(m.shape[0] == 0 for m in stacked.values()):
        raise InvalidInputError("erank_loss needs a non-empty buffer for every layer")
    if isinstance(buffers, FeatureBuffer) and len(stacked) != len(buffers.layers):
        raise InvalidInputError("erank_loss needs a non-empty buffer for every layer")
    ers = {l: effective_rank(F) for l, F in stacked.items()}
    return -float(np.mean(list(ers.values()))), ers


def _stack_inputs(recent) -> np.ndarray:
    rows = [b.x if isinstance(b, Batch) else np.atleast_2d(b) for b in recent]
    if not rows:
        raise InvalidInputError("no recent batches to compute the ER gradient on")
    return np.vstack(rows)


def erank_param_grad(params: ParamVector, recent_batches, config: ErankConfig | None = None
                     ) -> tuple[float, ParamVector, bool]:
    """Gradient of the ER loss w.r.t. the parameters.

    The recent inputs are pushed through the network with the current
    parameters, the per-layer ER gradients are injected at the hidden
    activations and backpropagated. Returns ``(loss, grad, jittered)``.
    """
    config = config or ErankConfig()
    x = _stack_inputs(recent_batches)
    if config.er_batch is not None and x.shape[0] > config.er_batch:
        x = x[-config.er_batch:]
    trace = trace_inputs(params, x)
    feats = capture_features(trace, config.layer_select)
    n_layers = len(feats)
    feature_grads, ers, jittered = {}, [], False
    for l, F in feats.items():
        ers.append(effective_rank(F))
        G, j = effective_rank_grad(F)
        jittered |= j
        feature_grads[l] = -G / n_layers
    dlogits = np.zeros_like(trace.logits)
    grad = backward(params, trace, dlogits=dlogits, feature_grads=feature_grads)
    return -float(np.mean(ers)), ParamVector(grad, params.spec), jittered


def l2_penalty(params: ParamVector | np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """``lam * ||theta||^2`` and its gradient ``2 lam theta``."""
    if lam < 0:
        raise InvalidInputError("L2 coefficient must be non-negative")
    theta = params.flat if isinstance(params, ParamVector) else np.asarray(params, float)
    if lam == 0:
        return 0.0, np.zeros_like(theta)
    return float(lam * theta @ theta), 2.0 * lam * theta


def covariance_erank(features: dict[int, np.ndarray]) -> dict:
    """ER of per-layer second-moment matrices ``(1/N) sum_n a_n a_n^T``.

    When every layer has the same width the summed covariance is reported
    under the key ``"sum"`` as well. Diagnostic only; training uses the
    stacked-feature form.
    """
    covs = {l: F.T @ F / F.shape[0] for l, F in features.items()}
    out: dict = {l: effective_rank(C) for l, C in covs.items()}
    shapes = {C.shape for C in covs.values()}
    if len(shapes) == 1:
        out["sum"] = effective_rank(sum(covs.values()))
    return out
