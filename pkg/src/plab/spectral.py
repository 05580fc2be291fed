"""Matrix-free Hessian spectrum tools.

Everything here talks to the Hessian through a ``matvec`` on flat float64
vectors, so the same code runs against the R-operator of a network or an
explicit matrix in tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .errors import CapabilityError, InvalidInputError
from .network import Batch, ParamVector, backward, forward, hvp, loss_value
from .numerics import RngStream, numeric_rank, svd, symtridiag_eigen
from .regularizers import effective_rank

Matvec = Callable[[np.ndarray], np.ndarray]

BREAKDOWN_TOL = 1e-10
DEFAULT_M = 90
DEFAULT_PROBES = 8
DEFAULT_GRID = 1024
EXACT_HESSIAN_MAX_PARAMS = 5000


@dataclass
class SymTridiagonal:
    diag: np.ndarray
    offdiag: np.ndarray

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=np.float64)
        self.offdiag = np.asarray(self.offdiag, dtype=np.float64)
        if self.offdiag.size != max(self.diag.size - 1, 0):
            raise InvalidInputError("offdiag length must be diag length - 1")

    @property
    def size(self) -> int:
        return self.diag.size

    def dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.offdiag, 1) + np.diag(self.offdiag, -1)

    def eigen(self) -> tuple[np.ndarray, np.ndarray]:
        return symtridiag_eigen(self.diag, self.offdiag)


def hessian_matvec(params: ParamVector, batch: Batch) -> Matvec:
    """Flat-array Hessian matvec at ``params`` on ``batch``."""
    def mv(v: np.ndarray) -> np.ndarray:
        return hvp(params, batch, v).flat
    return mv


def lanczos(matvec: Matvec, dim: int, m: int, probe: np.ndarray,
            return_basis: bool = False):
    """``m``-step Lanczos with full reorthogonalisation.

    Each new direction is Gram-Schmidt-orthogonalised twice against the whole
    basis. The iteration stops early when the next off-diagonal drops below
    ``1e-10`` times the larger of ``||probe||`` and the largest tridiagonal
    entry seen (an invariant subspace has been found); the k-step tridiagonal
    is returned.
    """
    v = np.asarray(probe, dtype=np.float64).ravel()
    if v.size != dim:
        raise InvalidInputError(f"probe has length {v.size}, expected {dim}")
    if m < 1 or m > dim:
        raise InvalidInputError(f"need 1 <= m <= dim, got m={m}, dim={dim}")
    pnorm = float(np.linalg.norm(v))
    if pnorm == 0.0:
        raise InvalidInputError("Lanczos probe must be nonzero")
    Q = np.zeros((m, dim))
    Q[0] = v / pnorm
    alphas, betas = [], []
    scale = 0.0
    for k in range(m):
        w = np.asarray(matvec(Q[k]), dtype=np.float64)
        a = float(Q[k] @ w)
        alphas.append(a)
        w = w - a * Q[k]
        if k > 0:
            w -= betas[-1] * Q[k - 1]
        basis = Q[: k + 1]
        for _ in range(2):
            w -= basis.T @ (basis @ w)
        b = float(np.linalg.norm(w))
        scale = max(scale, abs(a), b)
        if k == m - 1:
            break
        if b < BREAKDOWN_TOL * max(pnorm, scale):
            break
        betas.append(b)
        Q[k + 1] = w / b
    T = SymTridiagonal(np.array(alphas), np.array(betas))
    if return_basis:
        return T, Q[: T.size]
    return T


def gaussian_kernel(t: np.ndarray, centers: np.ndarray, sigma2: float) -> np.ndarray:
    d = t[:, None] - centers[None, :]
    return np.exp(-0.5 * d * d / sigma2) / np.sqrt(2.0 * np.pi * sigma2)


def smoothed_density(values: np.ndarray, weights: np.ndarray, grid: np.ndarray,
                     sigma2: float) -> np.ndarray:
    """``sum_i w_i N(t; values_i, sigma2)`` on ``grid``, chunked over nodes."""
    out = np.zeros_like(grid, dtype=np.float64)
    values = np.asarray(values, float)
    weights = np.asarray(weights, float)
    for start in range(0, values.size, 512):
        sl = slice(start, start + 512)
        out += gaussian_kernel(grid, values[sl], sigma2) @ weights[sl]
    return out


@dataclass
class SpectrumEstimate:
    ritz_values: list[np.ndarray]
    ritz_weights: list[np.ndarray]
    grid: np.ndarray
    density: np.ndarray
    sigma2: float
    m: int
    n_probes: int
    dim: int

    def mass(self) -> float:
        return float(trapezoid(self.density, self.grid))

    def mass_outside(self, eps: float) -> float:
        """Probe-averaged quadrature mass on ``|lambda| > eps``."""
        per_probe = [float(w[np.abs(v) > eps].sum())
                     for v, w in zip(self.ritz_values, self.ritz_weights)]
        return float(np.mean(per_probe))

    @property
    def ritz_range(self) -> tuple[float, float]:
        allv = np.concatenate(self.ritz_values)
        return float(allv.min()), float(allv.max())

    def write_density_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["grid_t", "density"])
            for t, d in zip(self.grid, self.density):
                w.writerow([repr(float(t)), repr(float(d))])

    def write_ritz_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["probe", "location", "weight"])
            for i, (vals, wts) in enumerate(zip(self.ritz_values, self.ritz_weights)):
                for v, wt in zip(vals, wts):
                    w.writerow([i, repr(float(v)), repr(float(wt))])


def default_sigma2(lo: float, hi: float) -> float:
    return max(1e-5 * (hi - lo) ** 2, 1e-8)


def default_grid(lo: float, hi: float, sigma2: float, n: int = DEFAULT_GRID) -> np.ndarray:
    pad = 6.0 * np.sqrt(sigma2)
    return np.linspace(lo - pad, hi + pad, n)


def slq_density(matvec: Matvec, dim: int, m: int = DEFAULT_M, n_probes: int = DEFAULT_PROBES,
                sigma2: float | None = None, grid: np.ndarray | None = None,
                stream: RngStream | None = None) -> SpectrumEstimate:
    """Stochastic Lanczos quadrature estimate of the Gaussian-smoothed spectral density.

    Probe ``i`` is drawn from ``stream.split(i)`` as ``N(0, I/dim)``, so probes
    can be evaluated in any order and the result stays the same. A supplied
    grid that does not cover the Ritz range is widened to cover it at the
    same resolution.
    """
    stream = stream or RngStream(0)
    m = min(m, dim)
    values, weights = [], []
    for i in range(n_probes):
        probe = stream.split(i).gaussian(dim) / np.sqrt(dim)
        T = lanczos(matvec, dim, m, probe)
        lv, lw = T.eigen()
        values.append(lv)
        weights.append(lw)
    allv = np.concatenate(values)
    lo, hi = float(allv.min()), float(allv.max())
    s2 = default_sigma2(lo, hi) if sigma2 is None else float(sigma2)
    if grid is None:
        grid = default_grid(lo, hi, s2)
    else:
        grid = np.asarray(grid, dtype=np.float64)
        if grid[0] > lo or grid[-1] < hi:
            grid = default_grid(min(lo, grid[0]), max(hi, grid[-1]), s2, grid.size)
    dens = np.zeros_like(grid)
    for lv, lw in zip(values, weights):
        dens += smoothed_density(lv, lw, grid, s2)
    dens /= n_probes
    return SpectrumEstimate(values, weights, grid, dens, s2, m, n_probes, dim)


def exact_density(eigenvalues: np.ndarray, grid: np.ndarray, sigma2: float) -> np.ndarray:
    ev = np.asarray(eigenvalues, float)
    return smoothed_density(ev, np.full(ev.size, 1.0 / ev.size), grid, sigma2)


def l1_distance(grid: np.ndarray, f: np.ndarray, g: np.ndarray) -> float:
    return float(trapezoid(np.abs(f - g), grid))


@dataclass
class EpsRankReport:
    epsilon: float
    count: int
    normalized: float
    source: str
    estimate: float = field(default=float("nan"))  # unrounded SLQ count


def epsilon_rank(values_or_estimate, eps: float = 0.1, P: int | None = None) -> EpsRankReport:
    """Number of eigenvalues with ``|lambda| > eps``.

    Given explicit eigenvalues the count is exact. Given a
    :class:`SpectrumEstimate` it is ``P`` times the probe-averaged quadrature
    mass outside ``[-eps, eps]``.
    """
    if eps <= 0:
        raise InvalidInputError("epsilon must be positive")
    if isinstance(values_or_estimate, SpectrumEstimate):
        est = values_or_estimate
        P = est.dim if P is None else P
        raw = P * est.mass_outside(eps)
        count = int(round(raw))
        return EpsRankReport(eps, count, count / P, "slq", raw)
    ev = np.asarray(values_or_estimate, dtype=np.float64).ravel()
    P = ev.size if P is None else P
    count = int(np.sum(np.abs(ev) > eps))
    return EpsRankReport(eps, count, count / P if P else 0.0, "exact", float(count))


def dense_from_matvec(matvec: Matvec, dim: int) -> np.ndarray:
    H = np.empty((dim, dim))
    e = np.zeros(dim)
    for i in range(dim):
        e[i] = 1.0
        H[:, i] = matvec(e)
        e[i] = 0.0
    return H


def exact_hessian(params: ParamVector, batch: Batch,
                  max_params: int = EXACT_HESSIAN_MAX_PARAMS) -> np.ndarray:
    """Dense Hessian assembled column by column from Hessian-vector products."""
    P = params.size
    if P > max_params:
        raise CapabilityError(f"exact Hessian refused for P={P} > {max_params}")
    return dense_from_matvec(hessian_matvec(params, batch), P)


def top_eigvecs(matvec: Matvec, dim: int, k: int, m: int,
                stream: RngStream | None = None) -> list[tuple[float, np.ndarray]]:
    """Ritz pairs for the ``k`` largest-magnitude Ritz values of an ``m``-step Lanczos run."""
    if not 1 <= k <= m <= dim:
        raise InvalidInputError("need 1 <= k <= m <= dim")
    stream = stream or RngStream(0)
    probe = stream.gaussian(dim)
    T, Q = lanczos(matvec, dim, m, probe, return_basis=True)
    vals, vecs = np.linalg.eigh(T.dense())
    order = np.argsort(-np.abs(vals), kind="stable")[:k]
    out = []
    for i in order:
        v = Q.T @ vecs[:, i]
        out.append((float(vals[i]), v / np.linalg.norm(v)))
    return out


def loss_surface_slice(params: ParamVector, batch: Batch, dir1, dir2,
                       half_width: float = 1.0, grid_n: int = 10,
                       loss_fn: Callable[[np.ndarray], float] | None = None):
    """Loss on the plane ``theta + a*dir1 + b*dir2`` over a ``(2n+1)^2`` lattice.

    Returns ``(a_values, b_values, Z)`` with ``Z[i, j] = loss(theta + a_i dir1 + b_j dir2)``.
    """
    d1 = np.asarray(dir1.flat if isinstance(dir1, ParamVector) else dir1, float)
    d2 = np.asarray(dir2.flat if isinstance(dir2, ParamVector) else dir2, float)
    for d in (d1, d2):
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise InvalidInputError("slice directions must be unit norm")
    coords = np.linspace(-half_width, half_width, 2 * grid_n + 1)
    coords[grid_n] = 0.0
    if loss_fn is None:
        def loss_fn(theta):
            return loss_value(params.with_flat(theta), batch)
    Z = np.empty((coords.size, coords.size))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            Z[i, j] = loss_fn(params.flat + a * d1 + b * d2)
    return coords, coords.copy(), Z


@dataclass
class KfacLayerRanks:
    layer: int
    input_erank: float
    input_rank: int
    grad_erank: float
    grad_rank: int

    @property
    def kron_rank(self) -> int:
        return self.input_rank * self.grad_rank


def kfac_factors(params: ParamVector, batches: Sequence[Batch]):
    """Per-layer input and pre-activation-gradient second moments, accumulation 1/N.

    Per-sample gradients are the loss gradients w.r.t. each layer's
    pre-activations for that sample alone (the batch-mean scaling removed).
    """
    L = params.spec.n_layers
    A = [0.0] * L
    G = [0.0] * L
    n_total = 0
    for batch in batches:
        _, trace = forward(params, batch)
        _, deltas = backward(params, trace, keep_deltas=True)
        n = len(batch)
        n_total += n
        for l in range(L):
            a = trace.inputs[l]
            g = deltas[l] * n
            A[l] = A[l] + a.T @ a
            G[l] = G[l] + g.T @ g
    if n_total == 0:
        raise InvalidInputError("kfac_factors needs at least one non-empty batch")
    return [a / n_total for a in A], [g / n_total for g in G]


def kfac_factor_ranks(params: ParamVector, batches: Sequence[Batch],
                      rel_tol: float = 1e-8) -> list[KfacLayerRanks]:
    A, G = kfac_factors(params, batches)
    return [
        KfacLayerRanks(l, effective_rank(a), numeric_rank(a, rel_tol),
                       effective_rank(g), numeric_rank(g, rel_tol))
        for l, (a, g) in enumerate(zip(A, G))
    ]
