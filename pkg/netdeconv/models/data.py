"""
Modelos de datos para conjuntos de imágenes y problemas de desenfoque.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from netdeconv.errors import ContractError, ShapeError


@dataclass
class Dataset:
    """
    Imágenes NCHW escaladas a [0, 1] con sus etiquetas.
    """
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"se esperaban imágenes NCHW, forma {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.images.shape[0]} imágenes pero {self.labels.shape[0]} etiquetas"
            )
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ContractError(
                f"etiqueta {int(self.labels.max())} fuera de rango para {self.num_classes} clases"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def flat_images(self) -> np.ndarray:
        """Imágenes aplanadas a (N, C·H·W)."""
        return self.images.reshape(len(self), -1)

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def take(self, indices: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices],
                       split or self.split, self.num_classes)

    def subset(self, count: int, seed: int = 0) -> "Dataset":
        """
        Subconjunto aleatorio determinista de `count` elementos.
        """
        if count >= len(self):
            return self
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(len(self), size=count, replace=False))
        return self.take(indices)


@dataclass
class BlurProblem:
    """
    Problema de estimación de kernel: y = conv(x, kernel) + ruido.
    """
    true_kernel: np.ndarray
    x_clean: np.ndarray
    y_blurred: np.ndarray
    noise_sigma: float
    seed: int

    @property
    def kernel_size(self) -> int:
        return self.true_kernel.shape[0]
