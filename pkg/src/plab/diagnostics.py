"""Dead-unit census, task-shift geometry and executable trainability bounds.

The bounds here are plain formulas; the Monte Carlo helpers exist so their
claims can be checked against simulation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InapplicableError, InvalidInputError
from .network import MlpSpec, ParamVector, hidden_preactivations
from .numerics import RngStream


@dataclass
class DeadReport:
    """Per hidden unit: max pre-activation over the data, deadness, margin and ``||w_in||``.

    ``margin`` is ``-max_preact`` for dead units and NaN for live ones.
    """

    layer: np.ndarray
    unit: np.ndarray
    max_preact: np.ndarray
    is_dead: np.ndarray
    margin: np.ndarray
    w_norm: np.ndarray

    @property
    def dead_count(self) -> int:
        return int(self.is_dead.sum())

    def per_layer(self) -> dict[int, int]:
        return {int(l): int(self.is_dead[self.layer == l].sum()) for l in np.unique(self.layer)}

    def write_csv(self, path, task: int = 0, append: bool = False) -> None:
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if not append or fh.tell() == 0:
                w.writerow(["task", "layer", "unit", "max_preact", "is_dead", "margin", "w_norm"])
            for i in range(self.layer.size):
                w.writerow([task, int(self.layer[i]), int(self.unit[i]),
                            repr(float(self.max_preact[i])), int(self.is_dead[i]),
                            repr(float(self.margin[i])), repr(float(self.w_norm[i]))])


def dead_census(params: ParamVector, x: np.ndarray, chunk: int = 4096) -> DeadReport:
    """Exact per-unit maximum pre-activation over every row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError("dead_census needs a non-empty 2-D dataset")
    maxes = None
    for start in range(0, x.shape[0], chunk):
        pre = hidden_preactivations(params, x[start:start + chunk])
        cur = [z.max(axis=0) for z in pre]
        maxes = cur if maxes is None else [np.maximum(a, b) for a, b in zip(maxes, cur)]
    layers, units, norms = [], [], []
    for l, m in enumerate(maxes):
        layers.append(np.full(m.size, l))
        units.append(np.arange(m.size))
        norms.append(np.linalg.norm(params.weight(l), axis=1))
    mx = np.concatenate(maxes)
    dead = mx <= 0.0
    margin = np.where(dead, -mx, np.nan)
    return DeadReport(np.concatenate(layers), np.concatenate(units), mx, dead, margin,
                      np.concatenate(norms))


def hausdorff(X, Y) -> float:
    """Symmetric Hausdorff distance between two finite point sets (Euclidean)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0 or Y.shape[0] == 0 or X.size == 0 or Y.size == 0:
        raise InvalidInputError("hausdorff needs two non-empty sets")
    if X.shape[1] != Y.shape[1]:
        raise InvalidInputError("point sets have different dimensions")
    D = cdist(X, Y)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def persistence_indicator(mu: float, w_norm: float, delta: float) -> bool:
    """True when a unit dead with margin ``mu`` must stay dead after a shift of ``delta``.

    A dead unit satisfies ``w.x + b <= -mu`` on the old data; every new point
    lies within ``delta`` of an old one, so ``w.x' + b <= -mu + delta ||w||``.
    """
    if mu < 0 or w_norm < 0 or delta < 0:
        raise InvalidInputError("mu, w_norm and delta must be non-negative")
    return bool(mu >= delta * w_norm)


def hessian_rank_bound(I: int, H: int, O: int, k_dead: int) -> tuple[int, int]:
    """Parameter count of an ``I-H-O`` ReLU net and its Hessian rank bound with ``k_dead`` dead units.

    Every dead hidden unit contributes ``I`` incoming weights, one bias and
    ``O`` outgoing weights whose Hessian rows are identically zero.
    """
    if min(I, H, O, k_dead) < 0:
        raise InvalidInputError("counts must be non-negative")
    if k_dead > H:
        raise InvalidInputError("k_dead cannot exceed the hidden width")
    P = H * (I + 1) + O * (H + 1)
    return P, P - k_dead * (I + O + 1)


def cantelli_trainability_bound(p: Sequence[float], n: int, m: int) -> float:
    """Upper bound on ``Pr(sum_j xi_j <= n - m)`` for independent indicators ``xi_j ~ Bernoulli(p_j)``.

    Returns ``sum p(1-p) / (sum p - (n - m))^2``, uncapped (values above 1 are vacuous).
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise InvalidInputError("probabilities must lie in [0, 1]")
    gap = float(p.sum()) - (n - m)
    if gap < 0:
        raise InapplicableError(f"sum of p ({p.sum():g}) is below n - m ({n - m})")
    var = float(np.sum(p * (1.0 - p)))
    if gap == 0:
        raise InapplicableError("sum of p equals n - m; the bound is undefined")
    return var / gap ** 2


def persistence_probability_bound(mu: float, w_norm: float, r: float, d: int, N: int) -> float:
    """``1 - 2 exp(ln N - N (mu / (||w|| r))^d)``, unclamped; negative values are vacuous."""
    if min(mu, w_norm, r) <= 0 or d < 1 or N < 1:
        raise InvalidInputError("all inputs must be positive")
    t = mu / (w_norm * r)
    return float(1.0 - 2.0 * np.exp(np.log(N) - N * t ** d))


def uniform_ball(N: int, r: float, d: int, stream: RngStream) -> np.ndarray:
    """``N`` i.i.d. points uniform in the radius-``r`` ball of ``R^d``."""
    if N < 1 or r <= 0 or d < 1:
        raise InvalidInputError("need N >= 1, r > 0, d >= 1")
    g = stream.gaussian((N, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    radius = r * stream.uniform01(N) ** (1.0 / d)
    return g * radius[:, None]


def uniform_ball_tasks(N: int, r: float, d: int, stream: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Two independent uniform-ball datasets, drawn from ``stream.split(0)`` and ``split(1)``."""
    return uniform_ball(N, r, d, stream.split(0)), uniform_ball(N, r, d, stream.split(1))


def force_dead_unit(params: ParamVector, layer: int, unit: int, radius: float) -> float:
    """Set a unit's bias to ``-(||w|| r + 1)`` so it is dead with margin >= 1 on the ``r``-ball.

    Only meaningful for the first hidden layer, whose inputs are the data.
    Returns the new bias.
    """
    b = -(float(np.linalg.norm(params.weight(layer)[unit])) * radius + 1.0)
    params.bias(layer)[unit] = b
    return b


# -- Monte Carlo checkers ---------------------------------------------------


@dataclass
class RemainDeadSummary:
    trials: int
    indicator_true: int
    counterexamples: int
    ratios: np.ndarray
    bounds: np.ndarray
    indicator_freq: np.ndarray  # fraction of trials with Delta <= ratio * r
    remain_dead_freq: np.ndarray  # fraction where a unit dead with that margin stays dead

    def bound_violations(self) -> list[float]:
        ok = self.bounds >= 0
        bad = ok & (self.indicator_freq < self.bounds)
        return [float(t) for t in self.ratios[bad]]


def remain_dead_monte_carlo(trials: int = 1000, N: int = 200, r: float = 1.0, d: int = 2,
                            stream: RngStream | None = None,
                            ratios: Sequence[float] = (0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5)
                            ) -> RemainDeadSummary:
    """Simulate task shifts between uniform-ball datasets and test dead-unit persistence.

    Trial ``i`` draws ``(X, X')`` and a unit with Gaussian weight direction,
    ``||w||`` uniform in ``[0.5, 2]`` and margin ``mu`` uniform in
    ``[0, 0.5]``, with its bias set so the unit is dead on ``X`` with margin
    exactly ``mu``. A counterexample is a trial where the persistence
    indicator holds but :func:`dead_census` finds the unit alive on ``X'``.

    For each ``t`` in ``ratios`` the same datasets give the frequency of
    ``Delta <= t r`` (persistence guaranteed for ``mu / ||w|| = t r``) and the
    frequency with which a random-direction unit of exactly that margin stays
    dead, next to the closed-form lower bound.
    """
    stream = stream or RngStream(0)
    ratios = np.asarray(ratios, dtype=np.float64)
    spec = MlpSpec((d, 1, 1), loss="mean_squared_error")
    n_true = n_bad = 0
    persist = np.zeros(ratios.size)
    stays = np.zeros(ratios.size)
    for i in range(trials):
        s = stream.split(i)
        X, Xp = uniform_ball_tasks(N, r, d, s.split(0))
        delta = hausdorff(X, Xp)
        u = s.split(1)
        w = u.gaussian(d)
        w *= u.uniform(0.5, 2.0) / np.linalg.norm(w)
        mu = float(u.uniform(0.0, 0.5))
        b = -float(np.max(X @ w)) - mu
        params = ParamVector(np.concatenate([w, [b], [1.0, 0.0]]), spec)
        wn = float(np.linalg.norm(w))
        if persistence_indicator(mu, wn, delta):
            n_true += 1
            if not dead_census(params, Xp).is_dead[0]:
                n_bad += 1
        persist += delta <= ratios * r
        # unit of unit norm, dead on X with margin t r; alive on X' iff support gap exceeds t r
        gap = float(np.max(Xp @ (w / wn)) - np.max(X @ (w / wn)))
        stays += gap <= ratios * r
    bounds = np.array([persistence_probability_bound(t * r, 1.0, r, d, N) for t in ratios])
    return RemainDeadSummary(trials, n_true, n_bad, ratios, bounds,
                             persist / trials, stays / trials)


def cantelli_monte_carlo(p: Sequence[float], n: int, m: int, trials: int,
                         stream: RngStream) -> tuple[float, float]:
    """Empirical ``Pr(S <= n - m)`` for independent Bernoulli indicators, and the bound."""
    p = np.asarray(p, dtype=np.float64)
    bound = cantelli_trainability_bound(p, n, m)
    draws = stream.uniform01((trials, p.size)) < p
    S = draws.sum(axis=1)
    return float(np.mean(S <= n - m)), bound
