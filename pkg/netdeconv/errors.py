"""
Jerarquía de excepciones de netdeconv.
"""
from pathlib import Path
from typing import Any, Dict, Optional, Union


class NetDeconvError(Exception):
    """Excepción base de la librería."""
    pass


class ShapeError(NetDeconvError):
    """Dimensiones incompatibles o tamaño de salida no entero."""
    pass


class ContractError(NetDeconvError):
    """Precondición violada por el llamador."""
    pass


class InsufficientDataError(NetDeconvError):
    """No hay suficientes muestras para estimar una estadística."""
    pass


class DegenerateDataError(NetDeconvError):
    """Datos constantes para los que la estadística no está definida."""
    pass


class StateError(NetDeconvError):
    """Operación llamada en un estado inválido (p. ej. backward sin forward)."""
    pass


class NumericalFailureError(NetDeconvError):
    """
    Aparecieron valores no finitos durante un cálculo iterativo.
    """

    def __init__(
        self,
        message: str,
        step: Optional[int] = None,
        layer_index: Optional[int] = None,
        snapshot: Optional[Dict[str, Any]] = None,
    ):
        super().__init__(message)
        self.step = step
        self.layer_index = layer_index
        self.snapshot = snapshot or {}

    def with_layer(self, layer_index: int) -> "NumericalFailureError":
        """Devuelve una copia con el índice de capa adjunto."""
        return NumericalFailureError(
            f"capa {layer_index}: {self}",
            step=self.step,
            layer_index=layer_index,
            snapshot=self.snapshot,
        )


class DataFormatError(NetDeconvError):
    """
    Bytes inválidos en un contenedor binario (IDX, CIFAR, NDCV, PGM).
    """

    def __init__(self, message: str, offset: int = 0, path: Union[str, Path, None] = None):
        location = f"{path}@{offset}" if path is not None else f"offset {offset}"
        super().__init__(f"{message} ({location})")
        self.offset = offset
        self.path = path
