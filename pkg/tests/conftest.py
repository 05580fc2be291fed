import os
from pathlib import Path

import numpy as np
import pytest

from plab.continual.data import MNIST_FILES, data_root
from plab.network import Batch, MlpSpec, init_params
from plab.numerics import RngStream


def random_batch(spec: MlpSpec, n: int, stream: RngStream) -> Batch:
    x = stream.split(0).gaussian((n, spec.layer_dims[0]))
    if spec.loss == "softmax_cross_entropy":
        y = stream.split(1).integers(0, spec.layer_dims[-1], size=n)
    else:
        y = stream.split(1).gaussian((n, spec.layer_dims[-1]))
    return Batch(x, y)


def random_net(dims, loss="softmax_cross_entropy", seed=0, n=8, bias_scale=0.1):
    """Random net with small random biases, plus a batch to evaluate it on."""
    spec = MlpSpec(tuple(dims), loss=loss)
    s = RngStream(seed)
    params = init_params(spec, s.split(0))
    for l in range(spec.n_layers):
        params.bias(l)[:] = bias_scale * s.split(1, l).gaussian(spec.layer_dims[l + 1])
    return params, random_batch(spec, n, s.split(2))


def mnist_dir():
    for root in (data_root(None), Path.home() / "data", Path("/root/data")):
        for cand in (root, root / "mnist"):
            if all((cand / f).exists() or (cand / (f + ".gz")).exists()
                   for f in MNIST_FILES.values()):
                return cand
    return None


@pytest.fixture(scope="session")
def mnist_path():
    path = mnist_dir()
    if path is None:
        pytest.skip("MNIST IDX files not available locally")
    return path


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
