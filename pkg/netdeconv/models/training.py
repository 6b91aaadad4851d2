"""
Modelos de datos para el entrenamiento: configuración, registros y alertas.
"""
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Union

import pandas as pd
from pydantic import BaseModel, Field

from netdeconv.errors import ContractError
from netdeconv.models.whitening import WhiteningConfig


BASE_COLUMNS = ["step", "epoch", "split", "loss", "acc", "wall_ms"]


class TrainConfig(BaseModel):
    """
    Configuración de una corrida de SGD.
    """
    lr: float = Field(default=0.1, ge=0.0)
    weight_decay: float = Field(default=0.001, ge=0.0)
    momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    batch_size: int = Field(default=128, ge=1)
    epochs: int = Field(default=1, ge=1)
    schedule: Literal["constant", "cosine"] = "constant"
    seed: int = Field(default=0, ge=0)
    loss: Literal["xent", "l2", "logistic"] = "xent"
    # Tope de pasos por época para corridas de escritorio
    max_steps_per_epoch: Optional[int] = Field(default=None, ge=1)
    # Diagnóstico de residuos de blanqueo por capa en cada paso
    diagnostics: bool = False
    whitening_overrides: Dict[int, WhiteningConfig] = Field(default_factory=dict)


class TrainingAlertType(str, Enum):
    """Tipos de alertas emitidas durante el entrenamiento"""
    NON_FINITE_LOSS = "non_finite_loss"
    LOSS_SPIKE = "loss_spike"
    LAYER_FROZEN = "layer_frozen"


@dataclass
class TrainingAlert:
    """
    Alerta generada cuando el entrenamiento cumple ciertas condiciones.
    """
    alert_type: TrainingAlertType
    step: int
    value: float
    layer_index: Optional[int] = None
    timestamp: datetime = field(default_factory=datetime.now)
    message: str = field(init=False)

    def __post_init__(self):
        """Genera el mensaje de alerta automáticamente"""
        where = f" en la capa {self.layer_index}" if self.layer_index is not None else ""
        self.message = (
            f"¡{self.alert_type.value.upper()}!{where} paso {self.step}: valor {self.value:.6g}"
        )


@dataclass
class MetricRow:
    """
    Métricas de un paso (split='train') o de una evaluación (split='eval').
    """
    step: int
    epoch: int
    split: str
    loss: float
    acc: float
    wall_ms: float
    layer_diag: Dict[str, float] = field(default_factory=dict)

    def flat(self) -> Dict[str, Union[int, float, str]]:
        values = {key: value for key, value in asdict(self).items() if key != "layer_diag"}
        values.update(self.layer_diag)
        return values


@dataclass
class RunRecord:
    """
    Serie de métricas de una corrida, serializable a CSV.
    """
    name: str = "run"
    rows: List[MetricRow] = field(default_factory=list)

    def append(self, row: MetricRow) -> None:
        """Agrega una fila; los pasos deben crecer estrictamente dentro de cada split."""
        previous = self.last(row.split)
        if previous is not None and row.step <= previous.step:
            raise ContractError(
                f"paso {row.step} no crece respecto a {previous.step} en split {row.split}"
            )
        self.rows.append(row)

    def extend(self, rows: Iterable[MetricRow]) -> None:
        for row in rows:
            self.append(row)

    def last(self, split: str) -> Optional[MetricRow]:
        for row in reversed(self.rows):
            if row.split == split:
                return row
        return None

    def split_rows(self, split: str) -> List[MetricRow]:
        return [row for row in self.rows if row.split == split]

    def diag_columns(self) -> List[str]:
        columns: List[str] = []
        for row in self.rows:
            for key in row.layer_diag:
                if key not in columns:
                    columns.append(key)
        return columns

    def to_dataframe(self) -> pd.DataFrame:
        columns = BASE_COLUMNS + self.diag_columns()
        return pd.DataFrame([row.flat() for row in self.rows], columns=columns)

    def to_csv(self, path: Path, header_lines: Optional[List[str]] = None) -> Path:
        """Escribe el registro con líneas de cabecera '# ...' opcionales."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            for line in header_lines or []:
                handle.write(f"# {line}\n")
            self.to_dataframe().to_csv(handle, index=False, float_format="%.10g")
        return path

    def same_metrics(self, other: "RunRecord") -> bool:
        """Compara dos registros ignorando wall_ms."""
        if len(self.rows) != len(other.rows):
            return False
        for mine, theirs in zip(self.rows, other.rows):
            a, b = mine.flat(), theirs.flat()
            a.pop("wall_ms")
            b.pop("wall_ms")
            if a.keys() != b.keys():
                return False
            for key in a:
                left, right = a[key], b[key]
                if isinstance(left, float) and math.isnan(left) and math.isnan(right):
                    continue
                if left != right:
                    return False
        return True


@dataclass
class ConvergenceReport:
    """
    Resultado del chequeo de convergencia en un paso de descenso de gradiente.
    """
    loss_one_step: float
    loss_optimal: float
    relative_gap: float
    whitened: bool
    ridge_applied: bool
    eps: float
    method: str
    diverged: bool = False

    def as_dict(self) -> Dict[str, Union[float, bool, str]]:
        return asdict(self)
