import json
from pathlib import Path

import numpy as np
import pytest

from npshape import EmbeddingMatrix, LabeledDataset

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def benchmark_rows_path():
    return DATA_DIR / "benchmark_rows.json"


@pytest.fixture(scope="session")
def benchmark_rows(benchmark_rows_path):
    return json.loads(benchmark_rows_path.read_text())


def random_mask(rng, h, w, p=0.4):
    return rng.random((h, w)) < p


def make_dataset(rng, n_per_class, centers, spread=0.5, split="train", dim=None):
    """Gaussian blobs around the given class centers."""
    rows, labels = [], []
    for cls, center in centers.items():
        center = np.asarray(center, dtype=np.float64)
        for _ in range(n_per_class):
            rows.append(center + rng.normal(0, spread, size=center.shape))
            labels.append(cls)
    X = np.asarray(rows, dtype=np.float32)
    ids = [f"{split}{i:04d}" for i in range(len(rows))]
    return LabeledDataset(EmbeddingMatrix(ids, X, "test-blobs"), labels, split)
