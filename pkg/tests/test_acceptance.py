"""Acceptance suite: one test group per criterion, each reporting PASS/FAIL.

Every check records a line through :func:`report`; ``conftest.py`` prints the
collected lines in the terminal summary, one per criterion.
"""

import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import random_batch
from plab.cli import main
from plab.config import ExperimentConfig
from plab.continual.data import load_mnist, synthetic_stream
from plab.continual.experiment import run_experiment
from plab.diagnostics import (
    cantelli_monte_carlo,
    dead_census,
    force_dead_unit,
    hessian_rank_bound,
    remain_dead_monte_carlo,
    uniform_ball,
)
from plab.network import Batch, MlpSpec, hvp, init_params, loss_grad, loss_value
from plab.numerics import RngStream, numeric_rank, sym_eigen
from plab.regularizers import effective_rank, effective_rank_grad, erank_param_grad
from plab.spectral import (
    epsilon_rank,
    exact_density,
    exact_hessian,
    hessian_matvec,
    l1_distance,
    slq_density,
)
from plab.toyland import ToyTask, toy_loss, toy_run

RESULTS: dict[int, list[tuple[str, bool, str]]] = {}


def report(criterion: int, part: str, ok: bool, detail: str) -> None:
    RESULTS.setdefault(criterion, []).append((part, bool(ok), detail))
    print(f"criterion {criterion}{part}: {'PASS' if ok else 'FAIL'} ({detail})")


def summary_lines() -> list[str]:
    lines = []
    for c in sorted(RESULTS):
        parts = RESULTS[c]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{p[0] + ': ' if p[0] else ''}{p[2]}" for p in parts)
        lines.append(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    return lines


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / (1.0 + np.abs(b))))


def fd_gradient(params, batch, h=1e-6):
    g = np.empty(params.size)
    for i in range(params.size):
        e = np.zeros(params.size)
        e[i] = h
        g[i] = (loss_value(params.with_flat(params.flat + e), batch)
                - loss_value(params.with_flat(params.flat - e), batch)) / (2 * h)
    return g


# -- 1 ----------------------------------------------------------------------


def test_c1_gradient_and_hvp():
    t0 = time.perf_counter()
    rng = RngStream(2024)
    worst_g = worst_h = worst_sym = 0.0
    for i in range(20):
        s = rng.split(i)
        n_layers = int(s.integers(2, 5))
        dims = tuple(int(d) for d in s.integers(2, 9, size=n_layers + 1))
        loss = ("softmax_cross_entropy", "mean_squared_error")[i % 2]
        spec = MlpSpec(dims, loss=loss)
        p = init_params(spec, s.split(0))
        p.flat[:] += 0.1 * s.split(1).gaussian(p.size)
        b = random_batch(spec, 6, s.split(2))
        _, g = loss_grad(p, b)
        worst_g = max(worst_g, rel_err(g.flat, fd_gradient(p, b)))
        v = s.split(3).gaussian(p.size)
        u = s.split(4).gaussian(p.size)
        h = 1e-5
        hv_fd = (loss_grad(p.with_flat(p.flat + h * v), b)[1].flat
                 - loss_grad(p.with_flat(p.flat - h * v), b)[1].flat) / (2 * h)
        Hv = hvp(p, b, v).flat
        worst_h = max(worst_h, rel_err(Hv, hv_fd))
        worst_sym = max(worst_sym, abs(u @ Hv - v @ hvp(p, b, u).flat))
    dt = time.perf_counter() - t0
    ok = worst_g <= 1e-5 and worst_h <= 1e-4 and worst_sym <= 1e-8 and dt < 30
    report(1, "", ok, f"grad {worst_g:.1e}, hvp {worst_h:.1e}, sym {worst_sym:.1e}, {dt:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------


def test_c2_effective_rank():
    t0 = time.perf_counter()
    er_id = effective_rank(np.eye(7))
    er_diag = effective_rank(np.diag([2.0, 1.0, 1.0]))
    F = RngStream(0).gaussian((9, 5))
    G, _ = effective_rank_grad(F)
    h = 1e-6
    G_fd = np.empty_like(F)
    for idx in np.ndindex(F.shape):
        E = np.zeros_like(F)
        E[idx] = h
        G_fd[idx] = (effective_rank(F + E) - effective_rank(F - E)) / (2 * h)
    err_f = rel_err(G, G_fd)

    spec = MlpSpec((4, 6, 5, 3))
    p = init_params(spec, RngStream(1))
    p.flat[:] += 0.1 * RngStream(2).gaussian(p.size)
    x = RngStream(3).gaussian((10, 4))
    loss, g, _ = erank_param_grad(p, [x])
    g_fd = np.empty(p.size)
    for i in range(p.size):
        e = np.zeros(p.size)
        e[i] = h
        g_fd[i] = (erank_param_grad(p.with_flat(p.flat + e), [x])[0]
                   - erank_param_grad(p.with_flat(p.flat - e), [x])[0]) / (2 * h)
    err_p = rel_err(g.flat, g_fd)
    dt = time.perf_counter() - t0
    ok = (er_id == 7.0 and abs(er_diag - 2 ** 1.5) <= 1e-9 and err_f <= 1e-5
          and err_p <= 1e-4 and dt < 30)
    report(2, "", ok, f"ER(I7)={er_id!r}, |ER(diag)-2^1.5|={abs(er_diag - 2 ** 1.5):.1e}, "
           f"feature grad {err_f:.1e}, param grad {err_p:.1e}, {dt:.1f}s")
    assert ok


# -- 3 ----------------------------------------------------------------------


def test_c3_slq_against_exact():
    t0 = time.perf_counter()
    rs = RngStream(0)
    task = synthetic_stream(10, 3, 1, 600, rs.split(1), eval_samples=200, separation=3)[0]
    p = init_params(MlpSpec((10, 12, 12, 3)), rs.split(2))
    st = rs.split(3)
    for epoch in range(30):
        for b in task.minibatches(32, st.split(epoch)):
            p.flat -= 0.05 * loss_grad(p, b)[1].flat
    eigs = sym_eigen(exact_hessian(p, task.eval))
    exact = epsilon_rank(eigs, 0.1)
    est = slq_density(hessian_matvec(p, task.eval), p.size, m=80, n_probes=8,
                      stream=rs.split(4))
    approx = epsilon_rank(est, 0.1)
    err = abs(approx.count - exact.count) / exact.count
    l1 = l1_distance(est.grid, est.density, exact_density(eigs, est.grid, est.sigma2))
    dt = time.perf_counter() - t0
    ok = p.size <= 500 and err <= 0.10 and l1 <= 0.05 and dt < 120
    report(3, "", ok, f"P={p.size}, eps-rank exact {exact.count} vs SLQ {approx.count} "
           f"({100 * err:.1f}%), L1 {l1:.3f}, {dt:.1f}s")
    assert ok


# -- 4 ----------------------------------------------------------------------


def test_c4_hessian_rank_bound():
    t0 = time.perf_counter()
    rng = RngStream(7)
    held = 0
    for i in range(100):
        s = rng.split(i)
        k = i % 4
        I, H, O = int(s.integers(2, 6)), int(s.integers(max(k, 2), 8)), int(s.integers(2, 5))
        spec = MlpSpec((I, H, O))
        p = init_params(spec, s.split(0))
        for unit in range(k):
            force_dead_unit(p, 0, unit, radius=1.0)
        x = uniform_ball(40, 1.0, I, s.split(1))
        assert dead_census(p, x).is_dead[:k].all()
        y = s.split(2).integers(0, O, size=40)
        rank = numeric_rank(exact_hessian(p, Batch(x, y)))
        held += rank <= hessian_rank_bound(I, H, O, k)[1]
    dt = time.perf_counter() - t0
    ok = held == 100 and dt < 120
    report(4, "", ok, f"{held}/100 within bound, {dt:.1f}s")
    assert ok


# -- 5 ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def remain_dead():
    t0 = time.perf_counter()
    summary = remain_dead_monte_carlo(trials=1000, N=200, r=1.0, d=2, stream=RngStream(5))
    return summary, time.perf_counter() - t0


def test_c5_no_counterexamples(remain_dead):
    s, dt = remain_dead
    ok = s.counterexamples == 0 and dt < 60
    report(5, "a", ok, f"{s.counterexamples} counterexamples in {s.indicator_true} "
           f"indicator-true trials, {dt:.1f}s")
    assert ok


def test_c5_probability_bound(remain_dead):
    s, _ = remain_dead
    cols = [f"t={t:g}: freq {f:.3f} vs bound {b:.3g}"
            for t, f, b in zip(s.ratios, s.indicator_freq, s.bounds) if b >= 0]
    bad = s.bound_violations()
    report(5, "b", not bad, ", ".join(cols) + (f"; violated at t={bad}" if bad else ""))
    assert not bad


# -- 6 ----------------------------------------------------------------------


def test_c6_cantelli():
    t0 = time.perf_counter()
    cases = [
        ([0.9] * 10, 10, 3),
        ([0.95] * 20, 20, 4),
        ([0.8] * 30, 30, 10),
        (list(np.linspace(0.7, 0.99, 15)), 15, 5),
        ([0.99] * 5 + [0.6] * 5, 10, 4),
    ]
    rows, ok = [], True
    for i, (p, n, m) in enumerate(cases):
        emp, bound = cantelli_monte_carlo(p, n, m, 100_000, RngStream(6).split(i))
        ok &= emp <= bound
        rows.append(f"{emp:.4f}<={bound:.4f}")
    dt = time.perf_counter() - t0
    ok = ok and dt < 30
    report(6, "", ok, ", ".join(rows) + f", {dt:.1f}s")
    assert ok


# -- 7 ----------------------------------------------------------------------


def test_c7_toy():
    t0 = time.perf_counter()
    gd = toy_run("gd")
    cr = toy_run("curvreg")
    c1 = ToyTask(1).canyon(gd.endpoint(1))
    dist = float(np.linalg.norm(cr.endpoint(1) - np.array([0.8, 0.25])))
    n_gd, n_cr = gd.hit_step[2], cr.hit_step[2]
    dt = time.perf_counter() - t0
    ok = (c1 < 0.05 and dist <= 0.15 and n_gd is not None and n_cr is not None
          and n_cr <= n_gd / 2 and dt < 60)
    report(7, "", ok, f"GD C1 {c1:.2e}, curvreg distance {dist:.4f}, task-2 steps "
           f"GD {n_gd} curvreg {n_cr}, {dt:.1f}s")
    assert ok


# -- 8 and 9: permuted MNIST at desk scale ----------------------------------

DESK_SEEDS = range(5)
DESK = dict(environment="permuted_mnist", hidden="100,100", num_tasks=50,
            samples_per_task=5000, eval_size=1000, lr=0.3, mini_batch_size=16,
            compute_hessian=True, compute_hessian_interval=5, compute_hessian_size=500,
            slq_m=40, slq_probes=2)
AGENTS = {"bp": {}, "l2_er": dict(weight_decay=1e-3, er_lr=1e-3, er_step=8, er_batch=128)}


@pytest.fixture(scope="module")
def desk_runs(mnist_path, tmp_path_factory):
    mnist = load_mnist(mnist_path)
    root = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    runs = {}
    for agent, extra in AGENTS.items():
        cfg = ExperimentConfig(agent=agent, **DESK, **extra)
        runs[agent] = [run_experiment(cfg, root / agent / f"seed_{s}", seed=s, mnist=mnist)
                       for s in DESK_SEEDS]
    return runs, time.perf_counter() - t0


def mean_acc(records, lo, hi):
    return float(np.mean([r.eval_acc for recs in records for r in recs[lo:hi]]))


def test_c8a_bp_loses_plasticity(desk_runs):
    runs, dt = desk_runs
    first, last = mean_acc(runs["bp"], 0, 10), mean_acc(runs["bp"], 40, 50)
    ok = first - last >= 0.02 and dt < 900
    report(8, "a", ok, f"BP tasks 1-10 {first:.4f}, 41-50 {last:.4f}, "
           f"drop {100 * (first - last):.1f} pts, desk runs {dt:.0f}s")
    assert ok


def test_c8b_l2_er_beats_bp(desk_runs):
    runs, _ = desk_runs
    bp, er = mean_acc(runs["bp"], 40, 50), mean_acc(runs["l2_er"], 40, 50)
    ok = er - bp >= 0.02
    report(8, "b", ok, f"tasks 41-50 L2-ER {er:.4f} vs BP {bp:.4f} "
           f"(+{100 * (er - bp):.1f} pts)")
    assert ok


def eps_by_task(records):
    tasks = sorted({r.task for recs in records for r in recs if r.eps_rank_norm is not None})
    table = np.array([[next(r.eps_rank_norm for r in recs if r.task == t) for t in tasks]
                      for recs in records])
    return tasks, table


def test_c8c_eps_rank_trend(desk_runs):
    runs, _ = desk_runs
    tasks, bp = eps_by_task(runs["bp"])
    rho = spearmanr(np.tile(tasks, bp.shape[0]), bp.ravel())[0]
    _, er = eps_by_task(runs["l2_er"])
    er_mean = er.mean(axis=0)
    ratio = float(er_mean[1:].min() / er_mean[0])
    ok_bp, ok_er = rho < 0, ratio >= 0.5
    report(8, "c", ok_bp and ok_er,
           f"BP Spearman {rho:.3f} ({'ok' if ok_bp else 'not declining'}); L2-ER min/initial "
           f"eps-rank {ratio:.3f} ({'ok' if ok_er else 'below 0.5'}); seed-mean L2-ER "
           f"eps-rank x1e4 {np.round(1e4 * er_mean, 1).tolist()}")
    assert ok_bp and ok_er


def test_c9_eps_rank_accuracy_association(desk_runs):
    runs, _ = desk_runs
    pairs = [(r.eps_rank_norm, r.eval_acc) for recs in runs.values() for rs in recs
             for r in rs if r.eps_rank_norm is not None]
    e, a = np.array(pairs).T
    rho = spearmanr(e, a)[0]
    ok = rho > 0.3
    report(9, "", ok, f"Spearman {rho:.3f} over {len(pairs)} pooled pairs")
    assert ok


# -- 10 ---------------------------------------------------------------------


def test_c10_determinism(tmp_path):
    args = ["--environment", "synthetic", "--hidden", "16,16", "--num_tasks", "6",
            "--samples_per_task", "200", "--eval_size", "100", "--synthetic_dim", "8",
            "--synthetic_classes", "4", "--agent", "l2_er", "--weight_decay", "0.001",
            "--compute_hessian", "true", "--compute_hessian_interval", "2",
            "--compute_hessian_size", "50", "--slq_m", "20", "--n_seeds", "2"]
    for name in ("a", "b"):
        assert main(["run", "--out", str(tmp_path / name), *args]) == 0
        assert main(["plot", str(tmp_path / name)]) == 0
        assert main(["toy", "--out", str(tmp_path / name / "toy"), "--steps", "300"]) == 0
        assert main(["plot", str(tmp_path / name / "toy")]) == 0
    compared = differing = 0
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.suffix in (".csv", ".svg"):
            compared += 1
            other = tmp_path / "b" / f.relative_to(tmp_path / "a")
            differing += f.read_bytes() != other.read_bytes()
    ok = compared > 0 and differing == 0
    report(10, "", ok, f"{compared - differing}/{compared} CSV and SVG files byte-identical")
    assert ok
