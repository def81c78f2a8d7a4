import struct

import numpy as np
import pytest

from core.filterbank import FilterBank
from core.network import BatchNormState, ClassifierHead, NetworkLayer, UnrolledNetwork
from core.rotation import CyclicGroup
from models import SolverConfig
from services.dataset_service import Dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def lasso_cd(x: np.ndarray, W: np.ndarray, lam: float, sweeps: int = 10000, tol: float = 1e-12) -> np.ndarray:
    """Cyclic coordinate descent for 0.5 ||x - W z||^2 + lam ||z||_1"""
    z = np.zeros(W.shape[1])
    residual = x.astype(np.float64).copy()
    col_sq = (W * W).sum(axis=0)
    for _ in range(sweeps):
        largest = 0.0
        for j in range(W.shape[1]):
            if col_sq[j] == 0.0:
                continue
            rho = W[:, j] @ residual + col_sq[j] * z[j]
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if new != z[j]:
                residual -= W[:, j] * (new - z[j])
                largest = max(largest, abs(new - z[j]))
                z[j] = new
        if largest < tol:
            break
    return z


def lasso_value(x: np.ndarray, W: np.ndarray, z: np.ndarray, lam: float) -> float:
    r = x - W @ z
    return float(0.5 * r @ r + lam * np.abs(z).sum())


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def finite_difference(loss_fn, value: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss_fn(perturbed_value)`` over every entry"""
    grad = np.zeros_like(value)
    for idx in np.ndindex(value.shape):
        plus, minus = value.copy(), value.copy()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (loss_fn(plus) - loss_fn(minus)) / (2 * eps)
    return grad


def make_toy_network(
    rng: np.random.Generator,
    num_layers: int = 2,
    num_basis: int = 2,
    order: int = 4,
    kernel: int = 3,
    grid: int = 9,
    solver: SolverConfig = None,
    tied: bool = False,
) -> UnrolledNetwork:
    solver = solver or SolverConfig(lam=0.01, alpha=0.5, num_layers=num_layers)
    group = CyclicGroup.of_order(order, (kernel, kernel))
    shared = FilterBank.initialize(num_basis, 1, (kernel, kernel), group, rng) if tied else None
    layers = []
    for i in range(num_layers):
        bank = shared or FilterBank.initialize(num_basis, 1, (kernel, kernel), group, rng)
        norm = BatchNormState.create(bank.num_atoms) if i < num_layers - 1 else None
        layers.append(NetworkLayer(bank, norm))
    head = ClassifierHead.initialize(num_basis * order, rng)
    return UnrolledNetwork(layers=layers, solver=solver, head=head, input_shape=(1, grid, grid), tied=tied)


@pytest.fixture
def toy_network(rng):
    return make_toy_network(rng)


def blob_dataset(rng: np.random.Generator, n: int = 32, grid: int = 28) -> Dataset:
    """Two separable classes: a bright square somewhere (0) or faint background only (1)"""
    images = rng.uniform(0.0, 0.1, size=(n, 1, grid, grid))
    labels = np.arange(n) % 2
    for i in np.flatnonzero(labels == 0):
        r, c = rng.integers(2, grid - 12, size=2)
        images[i, 0, r:r + 10, c:c + 10] += 0.8
    return Dataset(images=np.clip(images, 0.0, 1.0), labels=labels.astype(np.int64), name="blobs")


def idx_bytes(magic: int, dims, payload: bytes) -> bytes:
    return struct.pack(f">I{len(dims)}I", magic, *dims) + payload


def write_mnist_files(directory, images: np.ndarray, labels: np.ndarray, split: str = "train") -> None:
    """IDX files with the standard names for uint8 images [N, 28, 28]"""
    prefix = "train" if split == "train" else "t10k"
    (directory / f"{prefix}-images-idx3-ubyte").write_bytes(
        idx_bytes(0x00000803, images.shape, images.astype(np.uint8).tobytes())
    )
    (directory / f"{prefix}-labels-idx1-ubyte").write_bytes(
        idx_bytes(0x00000801, labels.shape, labels.astype(np.uint8).tobytes())
    )


@pytest.fixture
def mnist_dir(tmp_path, rng):
    """A tiny MNIST layout: 40 training and 20 test digits"""
    for split, n in (("train", 40), ("test", 20)):
        images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
        write_mnist_files(tmp_path, images, np.arange(n) % 10, split)
    return tmp_path
