import json
from pathlib import Path

import numpy as np
import pytest

from amibreak import data, model
from amibreak.detector import ImportanceProfile

VECTORS = Path(__file__).parent / "vectors"
ROOT = Path(__file__).resolve().parents[1]
MNIST_IMAGES = ROOT / "data" / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = ROOT / "data" / "mnist5k-labels-idx1-ubyte.gz"


@pytest.fixture(scope="session")
def hand_vectors():
    return json.loads((VECTORS / "hand_222.json").read_text())


@pytest.fixture
def hand_net(hand_vectors):
    v = hand_vectors
    return model.MlpNetwork(v["layer_dims"], v["weights"], v["biases"])


def profile_from_sets(important_by_class, widths):
    indices = tuple((tuple(idx),) for idx in important_by_class)
    return ImportanceProfile(indices, len(important_by_class[0]), tuple(widths))


def random_net(rng: np.random.Generator, dims, bias_scale=0.5) -> model.MlpNetwork:
    weights = [rng.normal(0, 1 / np.sqrt(i), size=(o, i)) for i, o in zip(dims[:-1], dims[1:])]
    biases = [rng.normal(0, bias_scale, size=o) for o in dims[1:]]
    return model.MlpNetwork(list(dims), weights, biases)


@pytest.fixture(scope="session")
def blobs3():
    spec = data.SyntheticSpec(num_classes=3, samples_per_class=60, dimension=6,
                              center_separation=0.6, noise_sigma=0.12)
    return data.synth_blobs(spec, seed=11)


@pytest.fixture(scope="session")
def blobs3_net(blobs3):
    net = model.MlpNetwork.init([6, 16, 12, 3], seed=5)
    net, _ = model.train(net, blobs3, model.TrainConfig(0.1, 60, 16, seed=6))
    return net


@pytest.fixture(scope="session")
def mnist():
    if not MNIST_IMAGES.exists():
        pytest.skip("digit IDX files not present")
    return data.load_idx(MNIST_IMAGES, MNIST_LABELS)


@pytest.fixture(scope="session")
def small_mnist_net(mnist):
    """A quickly trained 784-32-10 model for attack-level statistics."""
    train, test = data.split(mnist, [0.6, 0.1], seed=3)
    net = model.MlpNetwork.init([784, 32, 10], seed=4)
    net, _ = model.train(net, train, model.TrainConfig(0.1, 8, 32, seed=5))
    return net, test


# one "criterion N: PASS/FAIL ..." line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
