"""Command-line entry point: ``plab {run,spectrum,toy,plot,diagnose}``.

Exit status: 0 on success, 2 for an invalid configuration, 3 when input
data or files are missing.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, coerce_value, format_config, load_config
from .continual.experiment import (
    DataMissingError,
    build_stream,
    load_params,
    measure_spectrum,
    run_experiment,
)
from .diagnostics import dead_census, hausdorff, hessian_rank_bound, persistence_indicator
from .network import Batch
from .numerics import RngStream
from .plotting import line_chart, raster_chart, scatter_with_fit
from .spectral import hessian_matvec, loss_surface_slice, top_eigvecs
from .toyland import ToyConfig, ToyTask, landscape_raster, toy_run, write_raster_csv

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    for f in fields(ExperimentConfig):
        g.add_argument(f"--{f.name}", dest=f"set_{f.name}", metavar=f.type.upper())


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    changes = {}
    for f in fields(ExperimentConfig):
        raw = getattr(args, f"set_{f.name}", None)
        if raw is not None:
            try:
                changes[f.name] = coerce_value(f.type, raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for --{f.name}: {exc}") from None
    return cfg.replace(**changes) if changes else cfg


# -- run ---------------------------------------------------------------------


def _run_one(cfg: ExperimentConfig, out: str, seed: int, resume: bool) -> int:
    run_experiment(cfg, out, seed=seed, resume=resume)
    return seed


def _run_toy(cfg: ExperimentConfig, out: Path) -> None:
    tc = ToyConfig(eta=cfg.toy_eta, steps=cfg.toy_steps, theta0=(cfg.toy_x0, cfg.toy_y0),
                   threshold=cfg.toy_threshold)
    write_toy_outputs(tc, out)


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    if cfg.environment == "toy":
        _run_toy(cfg, out)
        return EXIT_OK
    seeds = [cfg.seed + i for i in range(cfg.n_seeds)]
    if len(seeds) == 1:
        run_experiment(cfg, out, resume=args.resume, progress=_progress if args.verbose else None)
        return EXIT_OK
    dirs = [str(out / f"seed_{s}") for s in seeds]
    if args.parallel_seeds > 1:
        with ProcessPoolExecutor(max_workers=args.parallel_seeds) as pool:
            for _ in pool.map(_run_one, [cfg] * len(seeds), dirs, seeds,
                              [args.resume] * len(seeds)):
                pass
    else:
        for d, s in zip(dirs, seeds):
            _run_one(cfg, d, s, args.resume)
    return EXIT_OK


def _progress(rec) -> None:
    print(f"task {rec.task:4d}  acc {rec.eval_acc:.4f}  loss {rec.train_loss:.4f}", flush=True)


# -- spectrum / diagnose ---------------------------------------------------


def _task_batch(cfg: ExperimentConfig, task_index: int, size: int | None = None):
    stream = build_stream(cfg.replace(num_tasks=max(cfg.num_tasks, task_index + 1)), cfg.seed)
    task = stream[task_index]
    n = min(size or cfg.compute_hessian_size, task.eval_x.shape[0])
    return task, Batch(task.eval_x[:n], task.eval_y[:n]), stream


def cmd_spectrum(args) -> int:
    cfg = _config_from_args(args)
    if not Path(args.params).exists():
        raise FileNotFoundError(args.params)
    params = load_params(args.params)
    _, batch, _ = _task_batch(cfg, args.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    est, rep = measure_spectrum(params, batch, cfg, RngStream(cfg.seed).split(3, args.task))
    est.write_density_csv(out / "density.csv")
    est.write_ritz_csv(out / "ritz.csv")
    print(f"eps_rank {rep.count} normalized {rep.normalized:.6g} (eps={rep.epsilon}, P={params.size})")
    if args.slice:
        pairs = top_eigvecs(hessian_matvec(params, batch), params.size, 2,
                            min(cfg.slq_m, params.size), RngStream(cfg.seed).split(4))
        a, b, Z = loss_surface_slice(params, batch, pairs[0][1], pairs[1][1],
                                     args.half_width, args.grid_n)
        write_raster_csv(out / "slice.csv", a, b, Z.T)
        (out / "slice.svg").write_text(raster_chart(a, b, Z.T, "loss along top-2 Hessian directions"))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _config_from_args(args)
    if not Path(args.params).exists():
        raise FileNotFoundError(args.params)
    params = load_params(args.params)
    task, _, stream = _task_batch(cfg, args.task)
    rep = dead_census(params, task.train_x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "dead.csv", task=args.task)
    dims = params.spec.layer_dims
    print(f"dead units: {rep.dead_count} per layer {rep.per_layer()}")
    if len(dims) == 3:
        P, bound = hessian_rank_bound(dims[0], dims[1], dims[2], rep.dead_count)
        print(f"hessian rank bound: P={P} bound={bound}")
    if args.task + 1 < len(stream):
        nxt = stream[args.task + 1]
        n = min(args.shift_samples, task.train_x.shape[0], nxt.train_x.shape[0])
        delta = hausdorff(task.train_x[:n], nxt.train_x[:n])
        dead0 = (rep.layer == 0) & rep.is_dead
        persist = sum(persistence_indicator(float(m), float(w), delta)
                      for m, w in zip(rep.margin[dead0], rep.w_norm[dead0]))
        print(f"task shift (Hausdorff, {n} samples): {delta:.6g}; "
              f"first-layer dead units guaranteed to persist: {persist}")
    return EXIT_OK


# -- toy -------------------------------------------------------------------


def write_toy_outputs(tc: ToyConfig, out: Path, raster_n: int = 81) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    runs = {}
    for method in ("gd", "curvreg"):
        traj = toy_run(method, config=tc, stop_task2_at_threshold=True)
        traj.write_csv(out / f"trajectory_{method}.csv")
        runs[method] = traj
    for t in (1, 2):
        xs, ys, Z = landscape_raster(ToyTask(t, tc), n=raster_n)
        write_raster_csv(out / f"raster_task{t}.csv", xs, ys, Z)
    with open(out / "toy_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "task1_x", "task1_y", "task1_steps_to_threshold",
                    "task2_steps_to_threshold"])
        for m, tr in runs.items():
            e = tr.endpoint(1)
            w.writerow([m, repr(float(e[0])), repr(float(e[1])),
                        tr.hit_step[1] if tr.hit_step[1] is not None else "",
                        tr.hit_step[2] if tr.hit_step[2] is not None else ""])
    return runs


def cmd_toy(args) -> int:
    tc = ToyConfig(eta=args.eta, steps=args.steps, theta0=(args.x0, args.y0),
                   threshold=args.threshold)
    runs = write_toy_outputs(tc, Path(args.out))
    for m, tr in runs.items():
        e = tr.endpoint(1)
        print(f"{m}: task-1 endpoint ({e[0]:.4f}, {e[1]:.4f}); "
              f"task-2 steps to loss < {tc.threshold}: {tr.hit_step[2]}")
    return EXIT_OK


# -- plot ------------------------------------------------------------------


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _seed_dirs(run_dir: Path) -> list[Path]:
    if (run_dir / "metrics.csv").exists():
        return [run_dir]
    return sorted((d for d in run_dir.glob("seed_*") if (d / "metrics.csv").exists()),
                  key=lambda d: int(d.name.split("_")[1]))


def _float(s: str) -> float:
    return float(s) if s not in ("", None) else float("nan")


def plot_runs(run_dirs: list[Path], out: Path) -> list[Path]:
    """Accuracy-vs-task, eps-rank-vs-accuracy scatter and spectral densities as SVG."""
    out.mkdir(parents=True, exist_ok=True)
    acc_series, scatter_groups, written = [], [], []
    for run_dir in run_dirs:
        dirs = _seed_dirs(run_dir)
        if not dirs:
            raise FileNotFoundError(f"no metrics.csv under {run_dir}")
        rows = [_read_csv(d / "metrics.csv") for d in dirs]
        label = rows[0][0]["algorithm"] if rows[0] else run_dir.name
        if len(run_dirs) > 1 and sum(r.name == run_dir.name for r in run_dirs) > 1:
            label = f"{label} ({run_dir})"
        n = min(len(r) for r in rows)
        tasks = [int(rows[0][i]["task"]) for i in range(n)]
        acc = [float(np.mean([_float(r[i]["eval_acc"]) for r in rows])) for i in range(n)]
        acc_series.append((label, tasks, acc))
        ex, ey = [], []
        for r in rows:
            for row in r:
                e = _float(row["eps_rank_norm"])
                if np.isfinite(e):
                    ex.append(e)
                    ey.append(_float(row["eval_acc"]))
        if ex:
            scatter_groups.append((label, ex, ey))
        dens = []
        for path in sorted((dirs[0] / "spectra").glob("task_*_density.csv")):
            d = _read_csv(path)
            t = int(path.name.split("_")[1])
            dens.append((f"task {t}", [float(x["grid_t"]) for x in d],
                         [float(x["density"]) for x in d]))
        if dens:
            p = out / f"density_{_slug(label)}.svg"
            p.write_text(line_chart(dens, f"Hessian spectral density ({label})",
                                    "eigenvalue", "density"))
            written.append(p)
    p = out / "accuracy_vs_task.svg"
    p.write_text(line_chart(acc_series, "Evaluation accuracy per task", "task", "accuracy"))
    written.insert(0, p)
    if scatter_groups:
        p = out / "eps_rank_vs_accuracy.svg"
        p.write_text(scatter_with_fit(scatter_groups, "Curvature vs accuracy",
                                      "normalized eps-rank at task start", "accuracy"))
        written.append(p)
    return written


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in s).strip("_")


def plot_toy(toy_dir: Path, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    trajs = {m: _read_csv(toy_dir / f"trajectory_{m}.csv") for m in ("gd", "curvreg")}
    for t in (1, 2):
        rows = _read_csv(toy_dir / f"raster_task{t}.csv")
        xs = sorted({float(r["x"]) for r in rows})
        ys = sorted({float(r["y"]) for r in rows})
        Z = np.array([float(r["loss"]) for r in rows]).reshape(len(ys), len(xs))
        paths = [(m, [float(r["x"]) for r in tr if int(r["task"]) == t or (t == 1 and r["step"] == "0")],
                  [float(r["y"]) for r in tr if int(r["task"]) == t or (t == 1 and r["step"] == "0")])
                 for m, tr in trajs.items()]
        p = out / f"toy_task{t}.svg"
        p.write_text(raster_chart(xs, ys, Z, f"Toy landscape, task {t}", paths))
        written.append(p)
    return written


def cmd_plot(args) -> int:
    dirs = [Path(d) for d in args.run_dirs]
    for d in dirs:
        if not d.exists():
            raise FileNotFoundError(d)
    out = Path(args.out) if args.out else dirs[0] / "figures"
    toy = [d for d in dirs if (d / "trajectory_gd.csv").exists()]
    runs = [d for d in dirs if d not in toy]
    written = []
    for d in toy:
        written += plot_toy(d, out if len(toy) == 1 else out / d.name)
    if runs:
        written += plot_runs(runs, out)
    for p in written:
        print(p)
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plab", description="Continual-learning plasticity lab")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train a learner over a task stream")
    r.add_argument("config", nargs="?", help="key = value config file")
    r.add_argument("--out", help="run directory (default: output_dir from the config)")
    r.add_argument("--resume", action="store_true", help="continue after the last finished task")
    r.add_argument("--parallel-seeds", type=int, default=1, metavar="N",
                   help="run up to N seeds concurrently")
    r.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("spectrum", help="Hessian spectrum of saved parameters on one task")
    s.add_argument("--params", required=True, help="params.npz written by a run")
    s.add_argument("--config", help="config of the run that produced the parameters")
    s.add_argument("--task", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--slice", action="store_true", help="also write a top-2 eigendirection slice")
    s.add_argument("--half-width", type=float, default=1.0)
    s.add_argument("--grid-n", type=int, default=10)
    _add_config_flags(s)
    s.set_defaults(func=cmd_spectrum)

    t = sub.add_parser("toy", help="toy two-task landscape: GD vs curvature-regularised GD")
    d = ToyConfig()
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=d.steps)
    t.add_argument("--eta", type=float, default=d.eta)
    t.add_argument("--x0", type=float, default=d.theta0[0])
    t.add_argument("--y0", type=float, default=d.theta0[1])
    t.add_argument("--threshold", type=float, default=d.threshold)
    t.set_defaults(func=cmd_toy)

    pl = sub.add_parser("plot", help="SVG figures from run or toy directories")
    pl.add_argument("run_dirs", nargs="+")
    pl.add_argument("--out", help="figure directory (default: <first dir>/figures)")
    pl.set_defaults(func=cmd_plot)

    dg = sub.add_parser("diagnose", help="dead-unit census and bounds for saved parameters")
    dg.add_argument("--params", required=True)
    dg.add_argument("--config")
    dg.add_argument("--task", type=int, default=0)
    dg.add_argument("--out", required=True)
    dg.add_argument("--shift-samples", type=int, default=1000)
    _add_config_flags(dg)
    dg.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataMissingError, FileNotFoundError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
