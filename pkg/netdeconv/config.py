"""
Configuración del proceso de netdeconv.
"""
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Configuración global cargada desde variables de entorno o .env
    """
    # Paralelismo de los kernels (bloques de filas en matmul)
    NETDECONV_THREADS: int = Field(default=1, ge=1)
    NETDECONV_MATMUL_BLOCK_ROWS: int = Field(default=256, ge=1)

    # Precisión de las activaciones; el blanqueo siempre usa float64
    NETDECONV_DTYPE: Literal["float64", "float32"] = "float64"

    # Rutas por defecto de datos y artefactos
    NETDECONV_DATA_DIR: Path = Path("./data")
    NETDECONV_OUT_DIR: Path = Path("./runs")

    # Logging
    NETDECONV_LOG_LEVEL: str = "INFO"
    NETDECONV_LOG_JSON: bool = False

    # Con False, wall_ms se escribe como 0 y los CSV son idénticos byte a byte
    NETDECONV_RECORD_WALL_TIME: bool = True

    @property
    def activation_dtype(self) -> np.dtype:
        """
        Tipo numpy de las activaciones.
        """
        return np.dtype(self.NETDECONV_DTYPE)

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )


# Instancia global de configuración
settings = Settings()
