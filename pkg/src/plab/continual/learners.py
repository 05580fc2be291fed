"""The continual learners and the per-task training loop.

Supported algorithms:

``bp``      plain SGD on the task loss
``l2``      SGD on task loss + ``weight_decay * ||theta||^2``
``er``      ``bp`` plus an effective-rank step every ``update_interval`` steps
``l2_er``   ``l2`` plus the effective-rank step
``cbp``     ``bp`` plus continual-backprop unit replacement every step
``snp``     shrink and perturb at each task boundary, then ``bp``
``reset``   fresh initialisation at each task boundary, then ``bp``

Parameters carry over between tasks for every learner except ``reset``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from ..network import (
    Batch,
    MlpSpec,
    ParamVector,
    backward,
    capture_features,
    forward,
    init_params,
    logits_only,
    reinit_unit_incoming,
)
from ..numerics import RngStream
from ..regularizers import ErankConfig, FeatureBuffer, erank_param_grad, l2_penalty
from .data import Task

ALGORITHMS = ("bp", "l2", "er", "l2_er", "cbp", "snp", "reset")

# sub-stream tags under the learner's stream
_INIT, _BATCHES, _CBP, _SNP = 0, 1, 2, 3


@dataclass
class CbpConfig:
    replacement_rate: float = 1e-4
    decay_rate: float = 0.99
    maturity_threshold: int = 100


@dataclass
class SnpConfig:
    shrink: float = 0.9
    perturb_scale: float = 1e-5


@dataclass
class LearnerConfig:
    algorithm: str = "bp"
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    erank: ErankConfig = field(default_factory=ErankConfig)
    cbp: CbpConfig = field(default_factory=CbpConfig)
    snp: SnpConfig = field(default_factory=SnpConfig)
    max_grad_norm: float = 0.0  # 0 disables clipping
    batch_size: int = 16

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise InvalidInputError(f"unknown algorithm {self.algorithm!r}")
        if self.lr <= 0:
            raise InvalidInputError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.max_grad_norm < 0:
            raise InvalidInputError("weight_decay and max_grad_norm must be >= 0")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")

    @property
    def uses_l2(self) -> bool:
        return self.algorithm in ("l2", "l2_er")

    @property
    def uses_erank(self) -> bool:
        return self.algorithm in ("er", "l2_er")


@dataclass
class SgdState:
    velocity: np.ndarray | None = None


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def sgd_step(params: ParamVector, grad, state: SgdState, lr: float, momentum: float = 0.0,
             max_grad_norm: float = 0.0) -> ParamVector:
    """Clip ``grad`` to ``max_grad_norm`` (global norm), then a heavy-ball step. In place."""
    g = grad.flat if isinstance(grad, ParamVector) else np.asarray(grad)
    if g.shape != params.flat.shape:
        raise InvalidInputError("gradient and parameter shapes differ")
    g = clip_by_global_norm(g, max_grad_norm)
    if momentum > 0:
        if state.velocity is None:
            state.velocity = np.zeros_like(g)
        state.velocity *= momentum
        state.velocity += g
        g = state.velocity
    params.flat -= lr * g
    return params


# -- continual backprop ------------------------------------------------------


@dataclass
class CbpState:
    utility: list[np.ndarray]
    age: list[np.ndarray]
    pending: list[float]
    replacements: int = 0

    @classmethod
    def for_spec(cls, spec: MlpSpec) -> "CbpState":
        hidden = spec.layer_dims[1:-1]
        return cls(
            utility=[np.zeros(h) for h in hidden],
            age=[np.zeros(h, dtype=np.int64) for h in hidden],
            pending=[0.0 for _ in hidden],
        )


def replace_unit(params: ParamVector, layer: int, unit: int, stream: RngStream,
                 state: CbpState | None = None, sgd: SgdState | None = None) -> None:
    """Re-draw incoming weights, zero the bias and outgoing weights of one hidden unit."""
    reinit_unit_incoming(params, layer, unit, stream)
    params.bias(layer)[unit] = 0.0
    params.weight(layer + 1)[:, unit] = 0.0
    if sgd is not None and sgd.velocity is not None:
        sgd.velocity[params.spec.unit_param_indices(layer, unit)] = 0.0
    if state is not None:
        state.utility[layer][unit] = 0.0
        state.age[layer][unit] = 0


def cbp_maintenance(params: ParamVector, trace, state: CbpState, config: CbpConfig,
                    stream: RngStream, sgd: SgdState | None = None) -> tuple[ParamVector, CbpState]:
    """One step of utility tracking and low-utility unit replacement (in place).

    Utility of unit ``j`` in hidden layer ``l`` is the decayed average of
    ``mean_batch |h_j| * sum_k |W_{l+1}[k, j]|``. Each step adds
    ``replacement_rate * n_mature`` to a per-layer counter; whenever the
    counter reaches one, that many of the lowest-utility mature units are
    replaced.
    """
    decay = config.decay_rate
    for l, h in enumerate(trace.post):
        out_w = np.abs(params.weight(l + 1)).sum(axis=0)
        contrib = np.abs(h).mean(axis=0) * out_w
        state.utility[l] = decay * state.utility[l] + (1.0 - decay) * contrib
        state.age[l] += 1
        if config.replacement_rate <= 0:
            continue
        mature = np.flatnonzero(state.age[l] >= config.maturity_threshold)
        state.pending[l] += config.replacement_rate * mature.size
        n_replace = min(int(state.pending[l]), mature.size)
        if n_replace < 1:
            continue
        state.pending[l] -= n_replace
        order = mature[np.argsort(state.utility[l][mature], kind="stable")]
        for j in order[:n_replace]:
            replace_unit(params, l, int(j), stream, state, sgd)
            state.replacements += 1
    return params, state


# -- learner ---------------------------------------------------------------


def evaluate(params: ParamVector, batch: Batch) -> float:
    """Argmax accuracy; ``np.argmax`` breaks ties toward the lowest class index."""
    pred = np.argmax(logits_only(params, batch.x), axis=1)
    return float(np.mean(pred == np.asarray(batch.y)))


@dataclass
class Learner:
    spec: MlpSpec
    config: LearnerConfig
    stream: RngStream
    params: ParamVector = None
    sgd: SgdState = field(default_factory=SgdState)
    cbp: CbpState | None = None
    buffer: FeatureBuffer | None = None
    step: int = 0

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.spec, self.stream.split(_INIT, 0))
        if self.config.algorithm == "cbp" and self.cbp is None:
            self.cbp = CbpState.for_spec(self.spec)
        if self.config.uses_erank and self.buffer is None:
            layers = self.config.erank.layer_select
            if layers is None:
                layers = range(self.spec.n_hidden_layers)
            self.buffer = FeatureBuffer(self.config.erank.update_interval, layers)


def begin_task(learner: Learner, task_id: int) -> None:
    """Apply the learner's task-boundary intervention, if any."""
    algo = learner.config.algorithm
    if algo == "reset" and task_id > 0:
        learner.params = init_params(learner.spec, learner.stream.split(_INIT, task_id))
        learner.sgd = SgdState()
    elif algo == "snp" and task_id > 0:
        s = learner.stream.split(_SNP, task_id)
        cfg = learner.config.snp
        learner.params.flat *= cfg.shrink
        learner.params.flat += cfg.perturb_scale * s.gaussian(learner.params.size)


@dataclass
class TaskMetrics:
    train_loss: float
    train_acc: float
    steps: int
    erank_steps: int
    replacements: int
    jitter_events: int


def train_task(learner: Learner, task: Task, steps: int | None = None) -> tuple[Learner, TaskMetrics]:
    """Train on one task; one pass over the training set unless ``steps`` is given.

    For the ER learners this follows the buffered scheme: every step the
    hidden features of the minibatch are enqueued and a task (+L2) SGD step
    is taken; after every ``update_interval`` steps the ER loss of the
    buffered inputs is recomputed under the current parameters, one
    gradient step of size ``er_lr`` is taken on it, and the buffer is cleared.
    """
    cfg = learner.config
    begin_task(learner, task.id)
    per_epoch = math.ceil(task.n_train / cfg.batch_size)
    total = per_epoch if steps is None else int(steps)
    batch_stream = learner.stream.split(_BATCHES, task.id)
    cbp_stream = learner.stream.split(_CBP, task.id)
    U = cfg.erank.update_interval
    if learner.buffer is not None:
        learner.buffer.clear()

    losses, correct, seen = [], 0, 0
    erank_steps = jitters = 0
    replacements_before = learner.cbp.replacements if learner.cbp else 0
    done, epoch = 0, 0
    while done < total:
        for batch in task.minibatches(cfg.batch_size, batch_stream.split(epoch)):
            if done >= total:
                break
            params = learner.params
            loss, trace = forward(params, batch)
            grad = backward(params, trace)
            losses.append(loss)
            correct += int(np.sum(np.argmax(trace.logits, axis=1) == batch.y))
            seen += len(batch)
            if learner.buffer is not None:
                learner.buffer.push(capture_features(trace, learner.buffer.layers), batch.x)
            if cfg.uses_l2 and cfg.weight_decay > 0:
                grad += l2_penalty(params, cfg.weight_decay)[1]
            sgd_step(params, grad, learner.sgd, cfg.lr, cfg.momentum, cfg.max_grad_norm)
            if learner.cbp is not None:
                cbp_maintenance(params, trace, learner.cbp, cfg.cbp, cbp_stream, learner.sgd)
            if learner.buffer is not None and (done + 1) % U == 0:
                if cfg.erank.er_lr > 0:
                    _, g_er, jit = erank_param_grad(
                        params, learner.buffer.recent_inputs(), cfg.erank
                    )
                    params.flat -= cfg.erank.er_lr * g_er.flat
                    jitters += int(jit)
                erank_steps += 1
                learner.buffer.clear()
            done += 1
            learner.step += 1
        epoch += 1

    metrics = TaskMetrics(
        train_loss=float(np.mean(losses)) if losses else float("nan"),
        train_acc=correct / seen if seen else float("nan"),
        steps=done,
        erank_steps=erank_steps,
        replacements=(learner.cbp.replacements - replacements_before) if learner.cbp else 0,
        jitter_events=jitters,
    )
    return learner, metrics
