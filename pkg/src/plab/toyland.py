"""Two-task 2-D softmin landscape and curvature-regularised gradient descent.

Each task loss is a soft minimum of a low-curvature *canyon* and a
high-curvature *bowl*. Task 2 rotates and translates the canyon and moves
the bowl. All derivatives are central finite differences, as in the
original construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError

FD_STEP = 1e-4


@dataclass(frozen=True)
class ToyConfig:
    tau1: float = 0.13
    a1: float = 0.02
    b1: float = 6.0
    c_l1: float = 6.0
    c_r1: float = 2.0
    bowl1: tuple[float, float] = (0.8, 0.25)
    tau2: float = 0.18
    phi_deg: float = 35.0
    shift: tuple[float, float] = (-4.1, 2.0)
    c_u: float = 10.0
    a2: float = 1e-4
    eps_v: float = 1e-6
    bowl2: tuple[float, float] = (1.8, -0.6)
    b_xy: tuple[float, float] = (5.0, 9.0)
    alpha1: float = 0.12
    alpha2: float = 0.10
    beta: float = 0.006
    eps: float = 1e-6
    # reproduction choices, not part of the landscape definition
    eta: float = 0.01
    steps: int = 4000
    theta0: tuple[float, float] = (-0.4, 0.2)
    threshold: float = 0.05
    fd_step: float = FD_STEP

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise InvalidInputError("softmin temperatures must be positive")
        if self.eps <= 0:
            raise InvalidInputError("curvature epsilon must be positive")


@dataclass(frozen=True)
class ToyTask:
    index: int
    config: ToyConfig = field(default_factory=ToyConfig)

    def __post_init__(self):
        if self.index not in (1, 2):
            raise InvalidInputError("toy task index must be 1 or 2")

    @property
    def tau(self) -> float:
        return self.config.tau1 if self.index == 1 else self.config.tau2

    @property
    def alpha(self) -> float:
        return self.config.alpha1 if self.index == 1 else self.config.alpha2

    def rotation(self) -> np.ndarray:
        phi = np.deg2rad(self.config.phi_deg)
        c, s = np.cos(phi), np.sin(phi)
        return np.array([[c, s], [-s, c]])

    def canyon_coords(self, theta) -> np.ndarray:
        """``(u, v) = R_phi (theta - shift)``, the task-2 canyon frame."""
        return self.rotation() @ (np.asarray(theta, float) - np.asarray(self.config.shift))

    def canyon(self, theta) -> float:
        c = self.config
        x, y = np.asarray(theta, float)
        if self.index == 1:
            return c.c_l1 * (x + 1.0) ** 2 + c.a1 * y ** 6
        u, v = self.canyon_coords(theta)
        return c.c_u * u * u + c.a2 * v ** 6 + c.eps_v * v * v

    def bowl(self, theta) -> float:
        c = self.config
        x, y = np.asarray(theta, float)
        if self.index == 1:
            bx, by = c.bowl1
            return c.c_r1 * (x - bx) ** 2 + c.b1 * (y - by) ** 2
        bx, by = c.bowl2
        kx, ky = c.b_xy
        return kx * (x - bx) ** 2 + ky * (y - by) ** 2


def softmin(a: float, b: float, tau: float) -> float:
    """``-tau * ln(exp(-a/tau) + exp(-b/tau))`` with the minimum shifted out."""
    m = min(a, b)
    return m - tau * np.log(np.exp(-(a - m) / tau) + np.exp(-(b - m) / tau))


def toy_loss(task: ToyTask, theta) -> float:
    return float(softmin(task.canyon(theta), task.bowl(theta), task.tau))


def fd_grad(f, theta, h: float = FD_STEP) -> np.ndarray:
    theta = np.asarray(theta, float)
    g = np.empty(theta.size)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2.0 * h)
    return g


def fd_hessian(f, theta, h: float = FD_STEP) -> np.ndarray:
    """Four-point central-difference Hessian, symmetrised."""
    theta = np.asarray(theta, float)
    n = theta.size
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h
            ej[j] = h
            H[i, j] = (f(theta + ei + ej) - f(theta + ei - ej)
                       - f(theta - ei + ej) + f(theta - ei - ej)) / (4.0 * h * h)
    return 0.5 * (H + H.T)


def toy_grad(task: ToyTask, theta) -> np.ndarray:
    return fd_grad(lambda t: toy_loss(task, t), theta, task.config.fd_step)


def toy_hessian_eigs(task: ToyTask, theta) -> np.ndarray:
    H = fd_hessian(lambda t: toy_loss(task, t), theta, task.config.fd_step)
    return np.linalg.eigvalsh(H)


def curvature_penalty(task: ToyTask, theta, eps: float | None = None) -> float:
    """``-sum_i ln(lambda_i^2 + eps)`` over the task-loss Hessian eigenvalues."""
    eps = task.config.eps if eps is None else eps
    if eps <= 0:
        raise InvalidInputError("eps must be positive")
    lam = toy_hessian_eigs(task, theta)
    return float(-np.sum(np.log(lam * lam + eps)))


def curvreg_objective(task: ToyTask, theta) -> float:
    """``L_t + alpha_t R + (beta/2) ||theta||^2``, the quantity curvreg descends."""
    theta = np.asarray(theta, float)
    c = task.config
    return (toy_loss(task, theta) + task.alpha * curvature_penalty(task, theta)
            + 0.5 * c.beta * float(theta @ theta))


def update_direction(method: str, task: ToyTask, theta) -> np.ndarray:
    g = toy_grad(task, theta)
    if method == "gd":
        return g
    if method == "curvreg":
        h = task.config.fd_step
        g_r = fd_grad(lambda t: curvature_penalty(task, t), theta, h)
        return g + task.alpha * g_r + task.config.beta * np.asarray(theta, float)
    raise InvalidInputError(f"unknown toy method {method!r}")


@dataclass
class Trajectory:
    method: str
    steps: list[int]
    points: list[np.ndarray]
    losses: list[float]
    tasks: list[int]
    # first step index (within each task) at which loss < threshold; None if never
    hit_step: dict[int, int | None] = field(default_factory=dict)

    def endpoint(self, task: int) -> np.ndarray:
        idx = [i for i, t in enumerate(self.tasks) if t == task]
        return self.points[idx[-1]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "x", "y", "loss", "task"])
            for k, p, l, t in zip(self.steps, self.points, self.losses, self.tasks):
                w.writerow([k, repr(float(p[0])), repr(float(p[1])), repr(float(l)), t])


def toy_run(method: str, theta0=None, steps: int | None = None, eta: float | None = None,
            config: ToyConfig | None = None, switch_at: int | None = None,
            stop_task2_at_threshold: bool = False) -> Trajectory:
    """Run ``gd`` or ``curvreg`` on task 1 then task 2.

    The loss switches from task 1 to task 2 after ``switch_at`` steps
    (default ``steps``). Task 2 runs for ``steps`` further steps, or until the
    loss first drops below ``config.threshold`` when
    ``stop_task2_at_threshold`` is set.
    """
    config = config or ToyConfig()
    eta = config.eta if eta is None else eta
    steps = config.steps if steps is None else steps
    switch_at = steps if switch_at is None else switch_at
    if eta <= 0:
        raise InvalidInputError("eta must be positive")
    theta = np.asarray(config.theta0 if theta0 is None else theta0, dtype=float).copy()
    tasks = {1: ToyTask(1, config), 2: ToyTask(2, config)}
    traj = Trajectory(method, [0], [theta.copy()], [toy_loss(tasks[1], theta)], [1],
                      {1: None, 2: None})
    total = switch_at + steps
    for k in range(total):
        t = 1 if k < switch_at else 2
        task = tasks[t]
        theta = theta - eta * update_direction(method, task, theta)
        loss = toy_loss(task, theta)
        traj.steps.append(k + 1)
        traj.points.append(theta.copy())
        traj.losses.append(loss)
        traj.tasks.append(t)
        if traj.hit_step[t] is None and loss < config.threshold:
            traj.hit_step[t] = k + 1 - (0 if t == 1 else switch_at)
            if t == 2 and stop_task2_at_threshold:
                break
    return traj


def landscape_raster(task: ToyTask, xlim=(-3.0, 3.0), ylim=(-3.0, 3.0), n: int = 121):
    """Loss on an ``n x n`` grid; returns ``(xs, ys, Z)`` with ``Z[i, j] = L(xs[j], ys[i])``."""
    xs = np.linspace(*xlim, n)
    ys = np.linspace(*ylim, n)
    Z = np.array([[toy_loss(task, (x, y)) for x in xs] for y in ys])
    return xs, ys, Z


def write_raster_csv(path, xs, ys, Z) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "loss"])
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(Z[i, j]))])
