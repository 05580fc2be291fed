"""Task streams: permuted MNIST from local IDX files and a synthetic substitute."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidInputError
from ..network import Batch
from ..numerics import RngStream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _open_bytes(path: Path) -> bytes:
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise FileNotFoundError(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an IDX byte string into a uint8 array.

    Header: 4-byte big-endian magic (``0x0000 08 nd``: unsigned-byte data
    with ``nd`` dimensions), then ``nd`` big-endian uint32 sizes.
    """
    if len(raw) < 4:
        raise FormatError("truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"unsupported IDX data type in magic 0x{magic:08x}")
    nd = magic & 0xFF
    header_len = 4 + 4 * nd
    if len(raw) < header_len:
        raise FormatError("truncated IDX dimension header")
    dims = struct.unpack(">" + "I" * nd, raw[4:header_len])
    count = int(np.prod(dims)) if nd else 0
    if len(raw) - header_len != count:
        raise FormatError(
            f"IDX payload has {len(raw) - header_len} bytes, header promises {count}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def data_root(path: str | os.PathLike | None = None) -> Path:
    """Resolve the dataset directory; ``$PLAB_DATA`` wins over the argument."""
    env = os.environ.get("PLAB_DATA")
    if env:
        return Path(env)
    if path is not None:
        return Path(path)
    return Path.home() / "data"


def load_mnist(root: str | os.PathLike) -> dict[str, np.ndarray]:
    """Load the four MNIST IDX files from ``root`` (or ``root/mnist``)."""
    root = Path(root)
    if not (root / MNIST_FILES["train_images"]).exists() and (root / "mnist").is_dir():
        root = root / "mnist"
    out = {}
    for key, name in MNIST_FILES.items():
        magic = IMAGES_MAGIC if key.endswith("images") else LABELS_MAGIC
        out[key] = parse_idx(_open_bytes(root / name), magic)
    for split in ("train", "test"):
        if out[f"{split}_images"].shape[0] != out[f"{split}_labels"].shape[0]:
            raise FormatError(f"{split} images/labels count mismatch")
    return out


@dataclass
class Task:
    id: int
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def eval(self) -> Batch:
        return Batch(self.eval_x, self.eval_y)

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    def minibatches(self, batch_size: int, stream: RngStream):
        """One shuffled pass over the training set."""
        order = stream.permutation(self.n_train)
        for start in range(0, self.n_train, batch_size):
            idx = order[start:start + batch_size]
            yield Batch(self.train_x[idx], self.train_y[idx])


class TaskStream:
    """Lazily materialised, indexable sequence of tasks."""

    def __init__(self, n_tasks: int, make_task, input_dim: int, n_classes: int):
        self.n_tasks = int(n_tasks)
        self._make = make_task
        self.input_dim = input_dim
        self.n_classes = n_classes

    def __len__(self) -> int:
        return self.n_tasks

    def __getitem__(self, tau: int) -> Task:
        if not 0 <= tau < self.n_tasks:
            raise IndexError(tau)
        return self._make(tau)

    def __iter__(self):
        for tau in range(self.n_tasks):
            yield self[tau]


def permuted_mnist_stream(data_path, n_tasks: int, samples_per_task: int,
                          stream: RngStream, eval_per_task: int = 1000,
                          mnist: dict | None = None) -> TaskStream:
    """Permuted-MNIST tasks.

    Task ``tau`` draws its pixel permutation and its sample indices from the
    sub-stream ``stream.split(tau)``. Training samples come from the MNIST
    training file and evaluation samples from the test file, so the two never
    overlap. Pixels are scaled to ``[0, 1]``.
    """
    data = mnist if mnist is not None else load_mnist(data_path)
    tr_x = data["train_images"].reshape(data["train_images"].shape[0], -1)
    te_x = data["test_images"].reshape(data["test_images"].shape[0], -1)
    tr_y, te_y = data["train_labels"], data["test_labels"]
    if samples_per_task > tr_x.shape[0] or eval_per_task > te_x.shape[0]:
        raise InvalidInputError("more samples per task than MNIST provides")
    n_pix = tr_x.shape[1]

    def make(tau: int) -> Task:
        s = stream.split(tau)
        perm = s.split(0).permutation(n_pix)
        tr_idx = s.split(1).choice(tr_x.shape[0], samples_per_task)
        te_idx = s.split(2).choice(te_x.shape[0], eval_per_task)
        return Task(
            id=tau,
            train_x=tr_x[tr_idx][:, perm].astype(np.float64) / 255.0,
            train_y=tr_y[tr_idx].astype(np.int64),
            eval_x=te_x[te_idx][:, perm].astype(np.float64) / 255.0,
            eval_y=te_y[te_idx].astype(np.int64),
            metadata={"permutation": perm, "train_index": tr_idx, "eval_index": te_idx},
        )

    return TaskStream(n_tasks, make, n_pix, 10)


def synthetic_stream(d: int, K: int, n_tasks: int, samples: int, stream: RngStream,
                     eval_samples: int | None = None, sigma: float = 1.0,
                     separation: float = 6.0) -> TaskStream:
    """Gaussian-cluster K-class tasks, a download-free stand-in for permuted MNIST.

    Each task resamples the class means (pairwise at least ``separation *
    sigma`` apart) and applies a random rotation to the inputs. Labels are
    assigned round-robin before shuffling, so classes are balanced to within
    one sample.
    """
    if d < 2 or K < 2:
        raise InvalidInputError("synthetic tasks need d >= 2 and K >= 2")
    n_eval = samples // 5 if eval_samples is None else eval_samples

    def draw_means(s: RngStream) -> np.ndarray:
        # random directions scaled so the nearest pair is >= separation apart
        for _ in range(1000):
            m = s.gaussian((K, d))
            m /= np.linalg.norm(m, axis=1, keepdims=True)
            gaps = np.linalg.norm(m[:, None] - m[None], axis=-1)[np.triu_indices(K, 1)]
            if gaps.min() > 1e-3:
                return m * (separation * sigma / gaps.min())
        raise RuntimeError("could not draw separated means")

    def sample(s: RngStream, means: np.ndarray, rot: np.ndarray, n: int):
        y = np.arange(n) % K
        y = y[s.permutation(n)]
        x = means[y] + sigma * s.gaussian((n, d))
        return x @ rot.T, y.astype(np.int64)

    def make(tau: int) -> Task:
        s = stream.split(tau)
        means = draw_means(s.split(0))
        q, r = np.linalg.qr(s.split(1).gaussian((d, d)))
        rot = q * np.sign(np.diag(r))
        x, y = sample(s.split(2), means, rot, samples)
        ex, ey = sample(s.split(3), means, rot, n_eval)
        return Task(tau, x, y, ex, ey, metadata={"means": means @ rot.T})

    return TaskStream(n_tasks, make, d, K)
