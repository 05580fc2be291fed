import gzip
import struct

import numpy as np
import pytest

from plab.config import ExperimentConfig
from plab.continual.data import (
    IMAGES_MAGIC,
    LABELS_MAGIC,
    load_mnist,
    parse_idx,
    permuted_mnist_stream,
    synthetic_stream,
)
from plab.continual.experiment import (
    DataMissingError,
    RunRecord,
    build_stream,
    load_params,
    read_records,
    run_experiment,
    save_params,
)
from plab.continual.learners import (
    CbpConfig,
    CbpState,
    Learner,
    LearnerConfig,
    SgdState,
    begin_task,
    cbp_maintenance,
    clip_by_global_norm,
    evaluate,
    sgd_step,
    train_task,
)
from plab.errors import FormatError, InvalidInputError
from plab.network import Batch, MlpSpec, forward, init_params
from plab.numerics import RngStream
from plab.regularizers import ErankConfig


def idx_bytes(arr: np.ndarray, magic: int) -> bytes:
    head = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    return head + arr.astype(np.uint8).tobytes()


def write_fake_mnist(root, n_train=40, n_test=20, gz=False):
    s = RngStream(0)
    files = {
        "train-images-idx3-ubyte": idx_bytes(s.integers(0, 256, (n_train, 28, 28)), IMAGES_MAGIC),
        "train-labels-idx1-ubyte": idx_bytes(np.arange(n_train) % 10, LABELS_MAGIC),
        "t10k-images-idx3-ubyte": idx_bytes(s.integers(0, 256, (n_test, 28, 28)), IMAGES_MAGIC),
        "t10k-labels-idx1-ubyte": idx_bytes(np.arange(n_test) % 10, LABELS_MAGIC),
    }
    for name, raw in files.items():
        if gz:
            with gzip.open(root / (name + ".gz"), "wb") as fh:
                fh.write(raw)
        else:
            (root / name).write_bytes(raw)


class TestIdx:
    def test_round_trip(self):
        a = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        np.testing.assert_array_equal(parse_idx(idx_bytes(a, IMAGES_MAGIC), IMAGES_MAGIC), a)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            parse_idx(idx_bytes(np.zeros(3), LABELS_MAGIC), IMAGES_MAGIC)

    def test_truncated_payload(self):
        raw = idx_bytes(np.zeros((2, 2, 2)), IMAGES_MAGIC)
        with pytest.raises(FormatError):
            parse_idx(raw[:-1])

    def test_truncated_header(self):
        with pytest.raises(FormatError):
            parse_idx(b"\x00\x00")

    @pytest.mark.parametrize("gz", [False, True])
    def test_load_fake_mnist(self, tmp_path, gz):
        write_fake_mnist(tmp_path, gz=gz)
        data = load_mnist(tmp_path)
        assert data["train_images"].shape == (40, 28, 28)
        assert data["test_labels"].shape == (20,)

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mnist(tmp_path)


class TestStreams:
    def test_permuted_tasks_are_permutations_of_each_other(self, tmp_path):
        write_fake_mnist(tmp_path)
        st = permuted_mnist_stream(tmp_path, 3, 10, RngStream(1), eval_per_task=5)
        t0, t1 = st[0], st[1]
        assert t0.train_x.shape == (10, 784) and t0.eval_x.shape == (5, 784)
        assert 0.0 <= t0.train_x.min() and t0.train_x.max() <= 1.0
        perm = t1.metadata["permutation"]
        assert sorted(perm) == list(range(784))
        raw = load_mnist(tmp_path)["train_images"].reshape(40, -1)[t1.metadata["train_index"]]
        np.testing.assert_array_equal(t1.train_x, raw[:, perm] / 255.0)

    def test_permuted_stream_deterministic(self, tmp_path):
        write_fake_mnist(tmp_path)
        a = permuted_mnist_stream(tmp_path, 2, 10, RngStream(3), eval_per_task=5)[1]
        b = permuted_mnist_stream(tmp_path, 2, 10, RngStream(3), eval_per_task=5)[1]
        np.testing.assert_array_equal(a.train_x, b.train_x)

    def test_too_many_samples(self, tmp_path):
        write_fake_mnist(tmp_path)
        with pytest.raises(InvalidInputError):
            permuted_mnist_stream(tmp_path, 1, 100, RngStream(0))

    def test_synthetic_balance_and_separation(self):
        st = synthetic_stream(6, 4, 3, 101, RngStream(0), separation=5.0)
        t = st[2]
        counts = np.bincount(t.train_y, minlength=4)
        assert counts.max() - counts.min() <= 1
        m = t.metadata["means"]
        gaps = np.linalg.norm(m[:, None] - m[None], axis=-1)[np.triu_indices(4, 1)]
        assert gaps.min() == pytest.approx(5.0)

    def test_synthetic_tasks_differ(self):
        st = synthetic_stream(5, 3, 2, 50, RngStream(0))
        assert not np.allclose(st[0].metadata["means"], st[1].metadata["means"])

    def test_index_error(self):
        with pytest.raises(IndexError):
            synthetic_stream(5, 3, 2, 50, RngStream(0))[2]

    def test_minibatches_cover_training_set_once(self):
        t = synthetic_stream(3, 2, 1, 37, RngStream(0))[0]
        seen = np.concatenate([b.x for b in t.minibatches(8, RngStream(1))])
        assert seen.shape == t.train_x.shape
        np.testing.assert_array_equal(np.sort(seen, axis=0), np.sort(t.train_x, axis=0))


class TestSgd:
    def test_plain_step(self):
        spec = MlpSpec((1, 1))
        p = init_params(spec, RngStream(0))
        before = p.flat.copy()
        sgd_step(p, np.ones(2), SgdState(), lr=0.5)
        np.testing.assert_allclose(p.flat, before - 0.5)

    def test_clip(self):
        g = np.array([3.0, 4.0])
        np.testing.assert_allclose(clip_by_global_norm(g, 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(clip_by_global_norm(g, 0.0), g)

    def test_momentum_accumulates(self):
        p = init_params(MlpSpec((1, 1)), RngStream(0))
        st = SgdState()
        before = p.flat.copy()
        sgd_step(p, np.ones(2), st, 1.0, momentum=0.5)
        sgd_step(p, np.ones(2), st, 1.0, momentum=0.5)
        np.testing.assert_allclose(p.flat, before - 2.5)

    def test_shape_mismatch(self):
        p = init_params(MlpSpec((1, 1)), RngStream(0))
        with pytest.raises(InvalidInputError):
            sgd_step(p, np.ones(3), SgdState(), 0.1)


def small_task(seed=0):
    return synthetic_stream(4, 3, 3, 64, RngStream(seed), eval_samples=30)


class TestLearners:
    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            LearnerConfig(algorithm="adam")
        with pytest.raises(InvalidInputError):
            LearnerConfig(lr=0.0)

    def test_l2_er_degenerates_to_bp(self):
        spec = MlpSpec((4, 8, 3))
        st = small_task()
        bp = Learner(spec, LearnerConfig("bp", lr=0.1, batch_size=8), RngStream(5))
        er = Learner(spec, LearnerConfig("l2_er", lr=0.1, batch_size=8, weight_decay=0.0,
                                         erank=ErankConfig(er_lr=0.0, update_interval=2)),
                     RngStream(5))
        for t in st:
            train_task(bp, t)
            train_task(er, t)
        np.testing.assert_array_equal(bp.params.flat, er.params.flat)

    def test_l2_shrinks_norm_with_zero_task_gradient(self):
        spec = MlpSpec((2, 2), loss="mean_squared_error")
        lrn = Learner(spec, LearnerConfig("l2", lr=0.1, weight_decay=0.1, batch_size=1),
                      RngStream(0))
        lrn.params.flat[:] = 0.0
        lrn.params.flat[0] = 1.0
        task = small_task().__getitem__(0)
        # zero inputs and targets equal to the current output give no task gradient
        task.train_x = np.zeros((3, 2))
        task.train_y = np.zeros((3, 2))
        norms = [np.linalg.norm(lrn.params.flat)]
        for _ in range(3):
            train_task(lrn, task, steps=1)
            norms.append(np.linalg.norm(lrn.params.flat))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_er_step_count(self):
        spec = MlpSpec((4, 8, 3))
        lrn = Learner(spec, LearnerConfig("er", lr=0.05, batch_size=8,
                                          erank=ErankConfig(er_lr=1e-3, update_interval=3)),
                      RngStream(0))
        _, m = train_task(lrn, small_task()[0])
        assert m.steps == 8 and m.erank_steps == 2

    def test_reset_reinitialises(self):
        spec = MlpSpec((4, 8, 3))
        lrn = Learner(spec, LearnerConfig("reset", lr=0.1, batch_size=8), RngStream(0))
        init0 = lrn.params.flat.copy()
        st = small_task()
        train_task(lrn, st[0])
        begin_task(lrn, 1)
        expected = init_params(spec, RngStream(0).split(0, 1)).flat
        np.testing.assert_array_equal(lrn.params.flat, expected)
        assert not np.array_equal(expected, init0)

    def test_snp_shrinks(self):
        spec = MlpSpec((4, 8, 3))
        lrn = Learner(spec, LearnerConfig("snp", batch_size=8), RngStream(0))
        lrn.config.snp.perturb_scale = 0.0
        before = lrn.params.flat.copy()
        begin_task(lrn, 0)
        np.testing.assert_array_equal(lrn.params.flat, before)
        begin_task(lrn, 1)
        np.testing.assert_allclose(lrn.params.flat, 0.9 * before)

    def test_cbp_replaces_lowest_utility_mature_unit(self):
        spec = MlpSpec((3, 4, 2))
        p = init_params(spec, RngStream(0))
        st = CbpState.for_spec(spec)
        st.age[0][:] = 10
        st.utility[0][:] = [5.0, 5.0, 5.0, 5.0]
        x = RngStream(1).gaussian((6, 3))
        _, trace = forward(p, Batch(x, np.zeros(6, dtype=int)))
        # unit 2 contributes nothing: zero its outgoing weights
        p.weight(1)[:, 2] = 0.0
        st.utility[0][2] = 0.0
        cfg = CbpConfig(replacement_rate=0.25, decay_rate=0.0, maturity_threshold=5)
        cbp_maintenance(p, trace, st, cfg, RngStream(2))
        assert st.replacements == 1
        assert st.age[0][2] == 0 and p.bias(0)[2] == 0.0
        np.testing.assert_array_equal(p.weight(1)[:, 2], 0.0)

    def test_cbp_runs_in_learner(self):
        spec = MlpSpec((4, 8, 3))
        cfg = LearnerConfig("cbp", lr=0.05, batch_size=4,
                            cbp=CbpConfig(replacement_rate=0.05, maturity_threshold=2))
        lrn = Learner(spec, cfg, RngStream(0))
        _, m = train_task(lrn, small_task()[0])
        assert m.replacements > 0

    def test_evaluate_ties_go_to_lowest_class(self):
        p = init_params(MlpSpec((2, 3)), RngStream(0))
        p.flat[:] = 0.0
        assert evaluate(p, Batch(np.ones((4, 2)), np.zeros(4, dtype=int))) == 1.0

    def test_training_learns_synthetic_task(self):
        spec = MlpSpec((4, 16, 3))
        lrn = Learner(spec, LearnerConfig("bp", lr=0.1, batch_size=8), RngStream(0))
        t = synthetic_stream(4, 3, 1, 400, RngStream(1), eval_samples=200)[0]
        train_task(lrn, t, steps=300)
        assert evaluate(lrn.params, t.eval) > 0.9


def synthetic_cfg(**kw):
    base = dict(environment="synthetic", hidden="8", num_tasks=4, samples_per_task=64,
                eval_size=32, synthetic_dim=5, synthetic_classes=3, lr=0.1,
                compute_hessian=True, compute_hessian_interval=2, compute_hessian_size=20,
                slq_m=10, slq_probes=2)
    base.update(kw)
    return ExperimentConfig(**base)


class TestExperiment:
    def test_outputs(self, tmp_path):
        recs = run_experiment(synthetic_cfg(), tmp_path)
        assert [r.task for r in recs] == [0, 1, 2, 3]
        assert (tmp_path / "config.txt").exists()
        assert not (tmp_path / "checkpoint.npz").exists()
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("task,algorithm,seed,")
        assert len(lines) == 5
        assert sorted(p.name for p in (tmp_path / "spectra").iterdir()) == [
            "task_0000_density.csv", "task_0000_ritz.csv",
            "task_0002_density.csv", "task_0002_ritz.csv"]
        assert recs[0].eps_rank is not None and recs[1].eps_rank is None
        assert read_records(tmp_path / "records.jsonl") == recs

    def test_deterministic(self, tmp_path):
        run_experiment(synthetic_cfg(), tmp_path / "a")
        run_experiment(synthetic_cfg(), tmp_path / "b")
        for name in ("metrics.csv", "spectra/task_0002_density.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = synthetic_cfg(agent="cbp", replacement_rate=0.01, maturity_threshold=2, momentum=0.5)
        run_experiment(cfg, tmp_path / "full")
        part = run_experiment(cfg, tmp_path / "cut", stop_after=2)
        assert len(part) == 2 and (tmp_path / "cut" / "checkpoint.npz").exists()
        run_experiment(cfg, tmp_path / "cut", resume=True)
        for name in ("metrics.csv", "records.jsonl"):
            full = (tmp_path / "full" / name).read_text()
            if name == "records.jsonl":
                # wall times differ between runs
                strip = lambda t: [RunRecord.from_json(l).__dict__ | {"wall_ms": None}
                                   for l in t.splitlines()]
                assert strip(full) == strip((tmp_path / "cut" / name).read_text())
            else:
                assert full == (tmp_path / "cut" / name).read_text()

    def test_record_version_checked(self):
        with pytest.raises(ValueError):
            RunRecord.from_json('{"v": 99}')

    def test_params_round_trip(self, tmp_path):
        p = init_params(MlpSpec((3, 4, 2), loss="mean_squared_error"), RngStream(0))
        save_params(tmp_path / "p.npz", p)
        q = load_params(tmp_path / "p.npz")
        np.testing.assert_array_equal(p.flat, q.flat)
        assert q.spec == p.spec

    def test_missing_mnist(self, tmp_path, monkeypatch):
        monkeypatch.delenv("PLAB_DATA", raising=False)
        cfg = ExperimentConfig(environment="permuted_mnist", data_path=str(tmp_path))
        with pytest.raises(DataMissingError):
            build_stream(cfg, 0)
