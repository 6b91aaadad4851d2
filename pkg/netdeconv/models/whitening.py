"""
Modelos de datos para parches (im2col) y estado de blanqueo.
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from netdeconv.errors import ContractError, ShapeError


@dataclass(frozen=True)
class PatchSpec:
    """
    Geometría de la extracción de parches de una capa convolucional.

    `block_size` es el ancho B de cada grupo de canales; se recorta a
    `channels_in` cuando la capa tiene menos canales.
    """
    kernel: int
    stride: int = 1
    padding: int = 0
    channels_in: int = 1
    block_size: int = 64

    def __post_init__(self):
        if self.kernel < 1:
            raise ContractError(f"kernel debe ser >= 1, recibido {self.kernel}")
        if self.stride < 1:
            raise ContractError(f"stride debe ser >= 1, recibido {self.stride}")
        if self.padding < 0:
            raise ContractError(f"padding debe ser >= 0, recibido {self.padding}")
        if self.channels_in < 1:
            raise ContractError(f"channels_in debe ser >= 1, recibido {self.channels_in}")
        if self.block_size < 1:
            raise ContractError(f"block_size debe ser >= 1, recibido {self.block_size}")

    @classmethod
    def same(cls, kernel: int, channels_in: int, block_size: int = 64) -> "PatchSpec":
        """Geometría 'same' con padding = k // 2 y stride 1."""
        return cls(kernel=kernel, stride=1, padding=kernel // 2,
                   channels_in=channels_in, block_size=block_size)

    @property
    def patch_size(self) -> int:
        """Columnas por canal (k·k)."""
        return self.kernel * self.kernel

    @property
    def columns(self) -> int:
        return self.channels_in * self.patch_size

    @property
    def group_width(self) -> int:
        """Canales por grupo, B recortado a C."""
        return min(self.block_size, self.channels_in)

    @property
    def groups(self) -> int:
        return math.ceil(self.channels_in / self.group_width)

    def group_slices(self) -> List[slice]:
        """
        Rangos de columnas de cada grupo. El último grupo toma el resto
        cuando C no es múltiplo de B.
        """
        slices = []
        for start in range(0, self.channels_in, self.group_width):
            stop = min(start + self.group_width, self.channels_in)
            slices.append(slice(start * self.patch_size, stop * self.patch_size))
        return slices

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        """
        Tamaño espacial de salida; exige que la división por el stride sea exacta.
        """
        sizes = []
        for extent in (height, width):
            span = extent + 2 * self.padding - self.kernel
            if span < 0:
                raise ShapeError(
                    f"kernel {self.kernel} mayor que la entrada {extent} con padding {self.padding}"
                )
            if span % self.stride != 0:
                raise ShapeError(
                    f"tamaño de salida no entero: ({extent}+2*{self.padding}-{self.kernel})/{self.stride}"
                )
            sizes.append(span // self.stride + 1)
        return sizes[0], sizes[1]


@dataclass
class PatchMatrix:
    """
    Matriz de datos X: filas = lote × posiciones espaciales, columnas = parches.
    """
    data: np.ndarray
    spec: PatchSpec
    batch: int
    out_h: int
    out_w: int
    group_index: Optional[int] = None
    column_offset: int = 0

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray) -> "PatchMatrix":
        """Misma geometría con otra matriz de datos."""
        return PatchMatrix(data, self.spec, self.batch, self.out_h, self.out_w,
                           self.group_index, self.column_offset)


class WhiteningConfig(BaseModel):
    """
    Hiperparámetros del blanqueo de una capa.
    """
    eps: float = Field(default=1e-5, ge=0.0)
    ns_iters: int = Field(default=5, ge=1)
    sample_stride: int = Field(default=1, ge=1)
    block_size: int = Field(default=64, ge=1)
    freeze_after: Optional[int] = Field(default=None, ge=1)
    momentum: float = Field(default=0.1, ge=0.0, le=1.0)
    centered: bool = True
    # Reintentos con eps x10 cuando Newton-Schulz produce valores no finitos
    ns_retries: int = Field(default=2, ge=0)

    @classmethod
    def input_layer(cls, **overrides) -> "WhiteningConfig":
        """Primera capa: 15 iteraciones y D congelada tras 200 pasos."""
        values = {"ns_iters": 15, "freeze_after": 200}
        values.update(overrides)
        return cls(**values)


@dataclass
class WhiteningState:
    """
    Estado de blanqueo de un grupo: media, matriz de deconvolución y promedios móviles.
    """
    mu: np.ndarray
    D: np.ndarray
    running_mu: np.ndarray
    running_D: np.ndarray
    step: int = 0
    frozen: bool = False
    last_residual: Optional[float] = None

    @classmethod
    def initial(cls, features: int) -> "WhiteningState":
        """Estado inicial: media cero y D = I."""
        return cls(
            mu=np.zeros(features),
            D=np.eye(features),
            running_mu=np.zeros(features),
            running_D=np.eye(features),
        )

    @property
    def features(self) -> int:
        return self.mu.shape[0]


@dataclass
class CovarianceStats:
    """Diagnóstico de una covarianza blanqueada."""
    offdiag_mean_abs: float
    diag_min: float
    diag_max: float
    extras: dict = field(default_factory=dict)

    def is_identity_like(self, offdiag_tol: float = 1e-2, diag_band: float = 0.1) -> bool:
        return (
            self.offdiag_mean_abs < offdiag_tol
            and self.diag_min >= 1.0 - diag_band
            and self.diag_max <= 1.0 + diag_band
        )
