import pandas as pd
import pytest

from netdeconv.errors import ContractError
from netdeconv.models.observer import Observable
from netdeconv.models.training import (
    BASE_COLUMNS,
    MetricRow,
    RunRecord,
    TrainingAlert,
    TrainingAlertType,
)
from netdeconv.services.recording import CsvRecordWriter, LogObserver


def _row(step: int, split: str = "train", **diag) -> MetricRow:
    return MetricRow(step, 1, split, 1.0 / step, 0.5, 0.0, dict(diag))


def test_csv_writer_streams_rows(tmp_path):
    subject = Observable()
    path = tmp_path / "run_demo.csv"
    writer = CsvRecordWriter(path, ["netdeconv demo", "seed=0"])
    subject.register_observer(writer)

    subject.notify_observers(row=_row(1, diag_1=0.25))
    subject.notify_observers(row=_row(2, diag_1=0.125))
    # Se puede leer antes de cerrar: cada fila se vacía al disco
    frame = pd.read_csv(path, comment="#")
    assert list(frame.columns) == BASE_COLUMNS + ["diag_1"]
    assert frame["step"].tolist() == [1, 2]
    assert frame["diag_1"].tolist() == [0.25, 0.125]
    writer.close()

    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[:2] == ["# netdeconv demo", "# seed=0"]
    assert writer.rows_written == 2


def test_csv_writer_ignores_alerts(tmp_path):
    path = tmp_path / "run_alerts.csv"
    with CsvRecordWriter(path) as writer:
        writer.update(Observable(), alert=TrainingAlert(TrainingAlertType.LOSS_SPIKE, 3, 9.0))
    assert not path.exists()
    assert writer.rows_written == 0


def test_log_observer_collects_alerts():
    observer = LogObserver(every=2)
    alert = TrainingAlert(TrainingAlertType.LAYER_FROZEN, 200, 200.0, layer_index=1)
    observer.update(Observable(), row=_row(1), alert=alert)
    assert observer.alerts == [alert]
    assert "capa 1" in alert.message


def test_run_record_requires_increasing_steps():
    record = RunRecord("demo")
    record.append(_row(1))
    record.append(_row(1, split="eval"))
    with pytest.raises(ContractError):
        record.append(_row(1))


def test_run_record_csv_and_comparison(tmp_path):
    first, second = RunRecord("a"), RunRecord("b")
    for record, wall in ((first, 1.0), (second, 99.0)):
        record.append(MetricRow(1, 1, "train", 0.5, 0.1, wall))
        record.append(MetricRow(2, 1, "train", float("nan"), 0.2, wall))
    assert first.same_metrics(second)

    path = first.to_csv(tmp_path / "record.csv", ["cabecera"])
    frame = pd.read_csv(path, comment="#")
    assert list(frame.columns) == BASE_COLUMNS
    assert len(frame) == 2
