"""Run a learner over a task stream, measuring and persisting after every task.

Run-directory layout (single seed)::

    config.txt       snapshot of the configuration
    metrics.csv      one row per finished task
    records.jsonl    one JSON object per finished task ("v": 1)
    spectra/         density and Ritz CSVs, when the Hessian spectrum is measured
    checkpoint.npz   learner state after the last finished task; removed on completion

Everything random is drawn from sub-streams keyed by (seed, purpose, task),
so a resumed run produces the same bytes as an uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..config import ExperimentConfig, format_config
from ..diagnostics import dead_census
from ..network import MlpSpec, ParamVector, capture_features, trace_inputs
from ..numerics import RngStream
from ..regularizers import effective_rank
from ..spectral import epsilon_rank, hessian_matvec, slq_density
from ..network import Batch
from .data import TaskStream, data_root, load_mnist, permuted_mnist_stream, synthetic_stream
from .learners import CbpState, Learner, SgdState, evaluate, train_task

RECORD_VERSION = 1
METRIC_COLUMNS = ("task", "algorithm", "seed", "train_loss", "eval_acc", "dead_count",
                  "erank_mean", "eps_rank_norm", "wall_ms")

# top-level stream tags
_DATA, _LEARNER, _SPECTRUM = 1, 2, 3


class DataMissingError(FileNotFoundError):
    pass


@dataclass
class RunRecord:
    task: int
    algorithm: str
    seed: int
    train_loss: float
    train_acc: float
    eval_acc: float
    steps: int
    dead_count: int | None = None
    dead_per_layer: list[int] | None = None
    erank: list[float] | None = None
    erank_mean: float | None = None
    eps_rank: int | None = None
    eps_rank_norm: float | None = None
    spectrum_file: str | None = None
    erank_steps: int = 0
    replacements: int = 0
    jitter_events: int = 0
    wall_ms: float | None = None
    v: int = RECORD_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        obj = json.loads(line)
        if obj.get("v") != RECORD_VERSION:
            raise ValueError(f"unsupported record version {obj.get('v')!r}")
        return cls(**obj)

    def metrics_row(self, include_wall: bool) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))
        return [str(self.task), self.algorithm, str(self.seed), fmt(self.train_loss),
                fmt(self.eval_acc), "" if self.dead_count is None else str(self.dead_count),
                fmt(self.erank_mean), fmt(self.eps_rank_norm),
                fmt(self.wall_ms) if include_wall else ""]


def network_spec(cfg: ExperimentConfig, stream: TaskStream) -> MlpSpec:
    return MlpSpec((stream.input_dim, *cfg.hidden_dims(), stream.n_classes))


def build_stream(cfg: ExperimentConfig, seed: int, mnist: dict | None = None) -> TaskStream:
    """Task stream for ``cfg.environment``; raises :class:`DataMissingError` if MNIST is absent."""
    s = RngStream(seed).split(_DATA)
    if cfg.environment == "synthetic":
        return synthetic_stream(cfg.synthetic_dim, cfg.synthetic_classes, cfg.num_tasks,
                                cfg.samples_per_task, s, eval_samples=cfg.eval_size)
    if cfg.environment == "permuted_mnist":
        if mnist is None:
            root = data_root(cfg.data_path or None)
            try:
                mnist = load_mnist(root)
            except FileNotFoundError as exc:
                raise DataMissingError(f"MNIST IDX files not found under {root}: {exc}") from None
        return permuted_mnist_stream(None, cfg.num_tasks, cfg.samples_per_task, s,
                                     eval_per_task=cfg.eval_size, mnist=mnist)
    raise ValueError(f"environment {cfg.environment!r} has no task stream")


def layer_eranks(params: ParamVector, x: np.ndarray) -> list[float]:
    feats = capture_features(trace_inputs(params, x))
    return [effective_rank(F) for _, F in sorted(feats.items())]


def measure_spectrum(params: ParamVector, batch: Batch, cfg: ExperimentConfig,
                     stream: RngStream):
    est = slq_density(hessian_matvec(params, batch), params.size, m=min(cfg.slq_m, params.size),
                      n_probes=cfg.slq_probes,
                      sigma2=cfg.slq_sigma2 if cfg.slq_sigma2 > 0 else None, stream=stream)
    return est, epsilon_rank(est, cfg.epsilon, params.size)


# -- checkpointing ------------------------------------------------------------


def save_checkpoint(path: Path, learner: Learner, task: int) -> None:
    arrays = {"task": np.array(task), "step": np.array(learner.step),
              "params": learner.params.flat}
    if learner.sgd.velocity is not None:
        arrays["velocity"] = learner.sgd.velocity
    if learner.cbp is not None:
        for l, (u, a) in enumerate(zip(learner.cbp.utility, learner.cbp.age)):
            arrays[f"cbp_utility_{l}"] = u
            arrays[f"cbp_age_{l}"] = a
        arrays["cbp_pending"] = np.array(learner.cbp.pending)
        arrays["cbp_replacements"] = np.array(learner.cbp.replacements)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: Path, learner: Learner) -> int:
    """Restore learner state in place; returns the last finished task index."""
    with np.load(path) as z:
        learner.params = ParamVector(z["params"].copy(), learner.spec)
        learner.step = int(z["step"])
        learner.sgd = SgdState(z["velocity"].copy() if "velocity" in z else None)
        if learner.cbp is not None:
            n = len(learner.cbp.utility)
            learner.cbp = CbpState(
                utility=[z[f"cbp_utility_{l}"].copy() for l in range(n)],
                age=[z[f"cbp_age_{l}"].copy() for l in range(n)],
                pending=[float(p) for p in z["cbp_pending"]],
                replacements=int(z["cbp_replacements"]),
            )
        return int(z["task"])


def save_params(path, params: ParamVector) -> None:
    np.savez(path, params=params.flat, layer_dims=np.array(params.spec.layer_dims),
             loss=np.array(params.spec.loss))


def load_params(path) -> ParamVector:
    with np.load(path) as z:
        spec = MlpSpec(tuple(int(d) for d in z["layer_dims"]), loss=str(z["loss"]))
        return ParamVector(z["params"].copy(), spec)


def read_records(path) -> list[RunRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [RunRecord.from_json(l) for l in path.read_text().splitlines() if l.strip()]


def _metrics_text(records: list[RunRecord], include_wall: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow(r.metrics_row(include_wall))
    return buf.getvalue()


# -- the run ---------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir, seed: int | None = None, resume: bool = False,
                   mnist: dict | None = None, stop_after: int | None = None,
                   progress=None) -> list[RunRecord]:
    """Train one seed over the task stream, persisting a record after every task.

    ``stop_after`` ends the run after that many tasks have been finished in
    this call, leaving the checkpoint in place (used to simulate an
    interruption). With ``resume=True`` a run continues after the last
    checkpointed task and earlier records are kept.
    """
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg.replace(seed=seed, n_seeds=1)))
    stream = build_stream(cfg, seed, mnist)
    spec = network_spec(cfg, stream)
    root = RngStream(seed)
    learner = Learner(spec, cfg.learner_config(), root.split(_LEARNER))

    ckpt = out / "checkpoint.npz"
    records_path = out / "records.jsonl"
    records: list[RunRecord] = []
    start = 0
    if resume and ckpt.exists():
        last = load_checkpoint(ckpt, learner)
        records = [r for r in read_records(records_path) if r.task <= last]
        start = last + 1
    elif resume and records_path.exists() and not ckpt.exists():
        records = read_records(records_path)
        if len(records) == cfg.num_tasks:
            return records  # already complete
        records = []
    # rewrite both outputs from the kept records so a torn last line cannot survive
    records_path.write_text("".join(r.to_json() + "\n" for r in records))
    (out / "metrics.csv").write_text(_metrics_text(records, cfg.timing))

    finished = 0
    for tau in range(start, cfg.num_tasks):
        t0 = time.perf_counter()
        task = stream[tau]
        eps_rank = eps_norm = spec_file = None
        if cfg.compute_hessian and tau % cfg.compute_hessian_interval == 0:
            n = min(cfg.compute_hessian_size, task.eval_x.shape[0])
            hb = Batch(task.eval_x[:n], task.eval_y[:n])
            est, rep = measure_spectrum(learner.params, hb, cfg, root.split(_SPECTRUM, tau))
            eps_rank, eps_norm = rep.count, rep.normalized
            sdir = out / "spectra"
            sdir.mkdir(exist_ok=True)
            spec_file = f"spectra/task_{tau:04d}_density.csv"
            est.write_density_csv(out / spec_file)
            est.write_ritz_csv(sdir / f"task_{tau:04d}_ritz.csv")
        steps = cfg.steps_per_task or None
        learner, m = train_task(learner, task, steps)
        acc = evaluate(learner.params, task.eval)
        rec = RunRecord(task=tau, algorithm=cfg.agent, seed=seed, train_loss=m.train_loss,
                        train_acc=m.train_acc, eval_acc=acc, steps=m.steps,
                        eps_rank=eps_rank, eps_rank_norm=eps_norm, spectrum_file=spec_file,
                        erank_steps=m.erank_steps, replacements=m.replacements,
                        jitter_events=m.jitter_events)
        if cfg.dead_census:
            rep = dead_census(learner.params, task.train_x)
            rec.dead_count = rep.dead_count
            rec.dead_per_layer = [rep.per_layer().get(l, 0) for l in range(spec.n_hidden_layers)]
        if spec.n_hidden_layers:
            er = layer_eranks(learner.params, task.eval_x)
            rec.erank = er
            rec.erank_mean = float(np.mean(er))
        rec.wall_ms = (time.perf_counter() - t0) * 1e3
        records.append(rec)
        with open(records_path, "a") as fh:
            fh.write(rec.to_json() + "\n")
        with open(out / "metrics.csv", "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(rec.metrics_row(cfg.timing))
        save_checkpoint(ckpt, learner, tau)
        if progress is not None:
            progress(rec)
        finished += 1
        if stop_after is not None and finished >= stop_after and tau < cfg.num_tasks - 1:
            return records

    if cfg.save_params:
        save_params(out / "params.npz", learner.params)
    ckpt.unlink(missing_ok=True)
    return records
