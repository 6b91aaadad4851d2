"""
Observadores del entrenamiento: escritura incremental de CSV y logging estructurado.
"""
from pathlib import Path
from typing import Any, List, Optional, TextIO

import pandas as pd
import structlog

from netdeconv.models.observer import Observable
from netdeconv.models.training import BASE_COLUMNS, MetricRow, TrainingAlert


logger = structlog.get_logger(__name__)


class CsvRecordWriter:
    """
    Escribe cada fila de métricas en cuanto llega y vacía el buffer, de modo
    que una corrida interrumpida deja un CSV válido hasta el último paso.

    Las columnas se fijan con la primera fila: las base más las diag_<capa>.
    """

    def __init__(self, path: Path, header_lines: Optional[List[str]] = None):
        self.path = Path(path)
        self.header_lines = header_lines or []
        self.columns: Optional[List[str]] = None
        self.rows_written = 0
        self._handle: Optional[TextIO] = None

    def _open(self, row: MetricRow) -> TextIO:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        handle = self.path.open("w", encoding="utf-8", newline="")
        for line in self.header_lines:
            handle.write(f"# {line}\n")
        self.columns = BASE_COLUMNS + list(row.layer_diag)
        self._handle = handle
        return handle

    def update(self, subject: Observable, row: Optional[MetricRow] = None,
               alert: Optional[TrainingAlert] = None, **kwargs: Any) -> None:
        if row is None:
            return
        first = self._handle is None
        handle = self._open(row) if first else self._handle
        frame = pd.DataFrame([row.flat()], columns=self.columns)
        frame.to_csv(handle, header=first, index=False, float_format="%.10g")
        handle.flush()
        self.rows_written += 1

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "CsvRecordWriter":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()


class LogObserver:
    """
    Registra con structlog una fila de cada `every` pasos, todas las
    evaluaciones y todas las alertas.
    """

    def __init__(self, every: int = 50, run: str = "run"):
        self.every = max(1, every)
        self.run = run
        self.alerts: List[TrainingAlert] = []

    def update(self, subject: Observable, row: Optional[MetricRow] = None,
               alert: Optional[TrainingAlert] = None, **kwargs: Any) -> None:
        if alert is not None:
            self.alerts.append(alert)
            logger.warning("Alerta", run=self.run, type=alert.alert_type.value,
                           step=alert.step, layer=alert.layer_index, message=alert.message)
        if row is None:
            return
        if row.split != "train" or row.step % self.every == 0:
            logger.info("Métricas", run=self.run, **row.flat())
