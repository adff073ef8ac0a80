"""Datasets: CIFAR-10 (binary version), synthetic Gaussian clusters, batching."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .numerics import SHUFFLE, InvalidParameterError, PerturbNetError, RngStream

RECORD_BYTES = 3073
PIXELS = 3072
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
DATA_ENV = "PERTURBNET_DATA"


class DataFormatError(PerturbNetError, IOError):
    """A dataset file does not follow the expected layout."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise InvalidParameterError("inputs and targets differ in length")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def labels(self) -> np.ndarray:
        return self.targets.argmax(axis=1)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.split)


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def read_cifar_file(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into (labels uint8, pixels uint8 [n, 3072])."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        raise DataFormatError(
            f"{path}: {raw.size} bytes is not a multiple of the {RECORD_BYTES}-byte record")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0]
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{path}: label {int(labels.max())} outside 0..9")
    return labels, records[:, 1:]


def resolve_cifar_dir(path: Optional[Union[str, Path]] = None) -> Path:
    """Locate the directory holding the binary batch files.

    Falls back to ``$PERTURBNET_DATA`` and accepts the ``cifar-10-batches-bin``
    subdirectory the official archive unpacks to.
    """
    if path is None:
        path = os.environ.get(DATA_ENV)
    if path is None:
        raise FileNotFoundError(f"no CIFAR-10 directory given and ${DATA_ENV} is unset")
    root = Path(path)
    for cand in (root, root / "cifar-10-batches-bin"):
        if (cand / TEST_FILE).exists():
            return cand
    raise FileNotFoundError(f"{root} does not contain {TEST_FILE}")


def load_cifar10(path: Optional[Union[str, Path]] = None,
                 standardize: bool = True) -> tuple[Dataset, Dataset]:
    """Load CIFAR-10 train/test splits as flat float64 vectors.

    Pixels are scaled to [0, 1]; with ``standardize`` every feature is then
    shifted and scaled by the train-split mean and standard deviation.
    """
    root = resolve_cifar_dir(path)
    missing = [f for f in TRAIN_FILES if not (root / f).exists()]
    if missing:
        raise FileNotFoundError(f"{root} is missing {missing}")
    parts = [read_cifar_file(root / f) for f in TRAIN_FILES]
    train_y = np.concatenate([p[0] for p in parts])
    train_x = np.concatenate([p[1] for p in parts]).astype(np.float64) / 255.0
    test_y, test_px = read_cifar_file(root / TEST_FILE)
    test_x = test_px.astype(np.float64) / 255.0
    if standardize:
        mean = train_x.mean(axis=0)
        std = train_x.std(axis=0)
        std[std == 0] = 1.0
        train_x -= mean
        train_x /= std
        test_x -= mean
        test_x /= std
    return (Dataset(train_x, one_hot(train_y, 10), "train"),
            Dataset(test_x, one_hot(test_y, 10), "test"))


def synthetic_classification(n: int, dim: int, classes: int, margin: float, stream: RngStream,
                             n_test: Optional[int] = None,
                             correlation: float = 0.0) -> tuple[Dataset, Dataset]:
    """Unit-variance Gaussian clusters around random class centres.

    Centres are ``margin / sqrt(2)`` times random unit vectors, so two centres
    sit about ``margin`` apart in high dimension.  Labels are balanced.  With
    ``correlation`` > 0 every feature also carries a shared per-sample factor,
    giving that pairwise correlation between input features.
    """
    if classes < 2:
        raise InvalidParameterError("need at least two classes")
    if not 0 <= correlation < 1:
        raise InvalidParameterError("correlation must lie in [0, 1)")
    if n_test is None:
        n_test = n // 5
    rng = stream.generator()
    centres = rng.standard_normal((classes, dim))
    centres *= margin / np.sqrt(2.0) / np.linalg.norm(centres, axis=1, keepdims=True)

    def draw(count):
        labels = rng.permutation(np.arange(count) % classes)
        noise = rng.standard_normal((count, dim))
        shared = rng.standard_normal((count, 1))
        x = centres[labels] + np.sqrt(1.0 - correlation) * noise + np.sqrt(correlation) * shared
        return Dataset(x, one_hot(labels, classes))

    train = draw(n)
    test = draw(n_test)
    return train, Dataset(test.inputs, test.targets, "test")


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    epoch: int = 0


def batches(dataset: Union[Dataset, int], plan: BatchPlan) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; the last short batch is kept."""
    if plan.batch_size < 1:
        raise InvalidParameterError("batch size must be >= 1")
    n = dataset if isinstance(dataset, int) else len(dataset)
    order = RngStream(plan.seed, (SHUFFLE, plan.epoch)).generator().permutation(n)
    return [order[i:i + plan.batch_size] for i in range(0, n, plan.batch_size)]
