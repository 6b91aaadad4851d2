from pathlib import Path

import numpy as np
import pytest

from netdeconv.services.data_io import synthetic_natural_images, write_idx
from netdeconv.services.linalg import seeded_rng

@pytest.fixture
def rng() -> np.random.Generator:
    return seeded_rng(1234)

@pytest.fixture
def natural_images() -> np.ndarray:
    """Ocho imágenes RGB 16×16 sintéticas en [0, 1]."""
    return synthetic_natural_images(8, channels=3, size=16, seed=3).astype(np.float64)

@pytest.fixture
def mnist_dir(tmp_path: Path) -> Path:
    """Directorio MNIST diminuto con los nombres estándar."""
    rng = seeded_rng(7)
    for prefix, count in (("train", 12), ("t10k", 6)):
        images = rng.integers(0, 256, size=(count, 28, 28)).astype(np.uint8)
        labels = rng.integers(0, 10, size=count).astype(np.uint8)
        write_idx(tmp_path / f"{prefix}-images-idx3-ubyte", images)
        write_idx(tmp_path / f"{prefix}-labels-idx1-ubyte", labels)
    return tmp_path
