import math

import numpy as np
import pytest

from netdeconv.errors import NumericalFailureError, ShapeError
from netdeconv.models.training import TrainConfig, TrainingAlertType
from netdeconv.models.whitening import WhiteningConfig
from netdeconv.services import layers, whitening
from netdeconv.services.data_io import synthetic_classification
from netdeconv.services.linalg import random_spd, seeded_rng
from netdeconv.services.networks import build_mlp
from netdeconv.services.recording import LogObserver
from netdeconv.services.trainer import (
    BATCH_SIZE_PRESETS,
    Trainer,
    batch_indices,
    closed_form_l2,
    fit,
    l2_objective,
    learning_rate,
    one_step_convergence_check,
    sgd_step,
)
from netdeconv.services.whitening import covariance_from_rows, inverse_sqrt_oracle


@pytest.fixture
def regression(rng):
    mixing = random_spd(rng, 10, condition=10.0)
    X = rng.normal(size=(500, 10)) @ mixing
    y = X @ rng.normal(size=10) + 0.1 * rng.normal(size=500)
    return X, y


@pytest.fixture
def tiny_data():
    train = synthetic_classification(96, channels=1, size=4, seed=0)
    test = synthetic_classification(32, channels=1, size=4, seed=0, split="test")
    return train, test


def _tiny_mlp(**kwargs):
    return build_mlp(in_features=16, hidden=8, depth=1, variant="deconv",
                     whitening=WhiteningConfig(ns_iters=5), **kwargs)


# SGD

def test_sgd_step_with_coupled_weight_decay():
    param = np.array([1.0, -2.0])
    sgd_step([param], [np.array([0.5, 0.5])], lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(param, [1.0 - 0.1 * (0.5 + 0.01), -2.0 - 0.1 * (0.5 - 0.02)])


def test_sgd_step_momentum():
    param = np.zeros(1)
    velocity = [np.zeros(1)]
    for _ in range(2):
        sgd_step([param], [np.ones(1)], lr=1.0, momentum=0.5, velocity=velocity)
    np.testing.assert_allclose(param, [-(1.0 + 1.5)])


def test_sgd_step_length_mismatch():
    with pytest.raises(ShapeError):
        sgd_step([np.zeros(1)], [], lr=0.1)


def test_learning_rate_schedules():
    constant = TrainConfig(lr=0.2)
    cosine = TrainConfig(lr=0.2, schedule="cosine")
    assert learning_rate(constant, 7, 10) == 0.2
    assert learning_rate(cosine, 1, 10) == pytest.approx(0.2)
    assert learning_rate(cosine, 6, 10) == pytest.approx(0.1)
    assert learning_rate(cosine, 11, 10) == pytest.approx(0.0, abs=1e-15)


def test_batch_indices_drops_incomplete_batch():
    batches = batch_indices(10, 3, seeded_rng(0))
    assert [len(b) for b in batches] == [3, 3, 3]
    assert len(np.unique(np.concatenate(batches))) == 9
    assert [len(b) for b in batch_indices(2, 5, seeded_rng(0))] == [2]


# Mínimos cuadrados y convergencia en un paso

def test_closed_form_matches_lstsq(regression):
    X, y = regression
    expected, *_ = np.linalg.lstsq(X, y, rcond=None)
    np.testing.assert_allclose(closed_form_l2(X, y), expected, atol=1e-8)


def test_closed_form_singular_needs_rcond(rng):
    X = rng.normal(size=(20, 3))
    X = np.hstack([X, X[:, :1]])
    y = rng.normal(size=20)
    with pytest.raises(NumericalFailureError):
        closed_form_l2(X, y)
    w = closed_form_l2(X, y, rcond=1e-10)
    assert l2_objective(X, w, y) <= l2_objective(X, np.zeros(4), y)


def test_one_step_whitened_reaches_optimum(regression):
    X, y = regression
    report = one_step_convergence_check(X, y, whiten=True, method="oracle")
    assert report.relative_gap < 1e-8
    assert report.method == "oracle"
    assert not report.diverged and not report.ridge_applied


def test_one_step_newton_schulz_close_to_optimum(regression):
    X, y = regression
    report = one_step_convergence_check(X, y, method="newton_schulz", eps=1e-10, ns_iters=40)
    assert report.relative_gap < 1e-4


def test_one_step_raw_with_unit_rate_diverges(regression):
    X, y = regression
    report = one_step_convergence_check(X, y, whiten=False)
    assert report.method == "raw"
    assert report.diverged


def test_one_step_rank_deficient_applies_ridge(rng):
    X = rng.normal(size=(100, 4))
    X = np.hstack([X, X[:, :1]])
    y = X @ rng.normal(size=5)
    report = one_step_convergence_check(X, y, eps=0.0)
    assert report.ridge_applied
    assert report.eps > 0
    assert math.isfinite(report.loss_one_step)


def test_whitened_step_equals_inverse_covariance_step(rng):
    features = 12
    x = rng.normal(size=(200, features)) @ random_spd(rng, features, condition=10.0)
    target = rng.normal(size=(200, 1))
    layer = layers.DeconvLinear(features, 1, whitening=WhiteningConfig(eps=0.0, ns_iters=40,
                                                                      centered=False))
    _, grad = layers.l2_loss(layer.forward(x), target)
    layer.backward(grad)
    D = layer.whitener.last_D[0]
    raw_before = layer.params["W"] @ D.T

    sgd_step([layer.params["W"]], [layer.grads["W"]], lr=0.1)
    raw_after = layer.params["W"] @ D.T

    _, cov = covariance_from_rows(x, centered=False)
    inverse = inverse_sqrt_oracle(cov) @ inverse_sqrt_oracle(cov)
    corrected = raw_before - 0.1 * (grad.T @ x) @ inverse
    step = raw_before - corrected
    assert np.linalg.norm(raw_after - corrected) <= 1e-8 * np.linalg.norm(step)


# Entrenamiento

def test_fit_records_steps_and_evaluations(tiny_data):
    train, test = tiny_data
    config = TrainConfig(lr=0.1, batch_size=16, epochs=2, seed=3)
    record = fit(_tiny_mlp(), train, config, test)
    train_rows = record.split_rows("train")
    assert [row.step for row in train_rows] == list(range(1, 13))
    assert [row.epoch for row in record.split_rows("eval")] == [1, 2]
    assert all(math.isfinite(row.loss) for row in record.rows)


def test_fit_is_deterministic(tiny_data):
    train, test = tiny_data
    config = TrainConfig(lr=0.1, batch_size=16, epochs=1, seed=5, diagnostics=True)
    first = fit(_tiny_mlp(), train, config, test)
    second = fit(_tiny_mlp(), train, config, test)
    assert first.same_metrics(second)
    assert "diag_1" in first.rows[0].layer_diag


def test_max_steps_per_epoch(tiny_data):
    train, _ = tiny_data
    config = TrainConfig(batch_size=16, epochs=2, max_steps_per_epoch=2)
    record = fit(_tiny_mlp(), train, config)
    assert len(record.split_rows("train")) == 4


def test_layer_frozen_alert(tiny_data):
    train, _ = tiny_data
    observer = LogObserver()
    network = _tiny_mlp(overrides={1: WhiteningConfig(freeze_after=2, ns_iters=5)})
    fit(network, train, TrainConfig(batch_size=16, epochs=1), observers=[observer])
    frozen = [a for a in observer.alerts if a.alert_type == TrainingAlertType.LAYER_FROZEN]
    assert len(frozen) == 1
    assert frozen[0].step == 2 and frozen[0].layer_index == 1


def test_non_finite_loss_raises_with_snapshot(tiny_data, monkeypatch):
    train, _ = tiny_data
    monkeypatch.setitem(layers.LOSSES, "xent", lambda out, target: (float("nan"), out))
    observer = LogObserver()
    trainer = Trainer(_tiny_mlp(), TrainConfig(batch_size=16))
    trainer.register_observer(observer)
    with pytest.raises(NumericalFailureError) as info:
        trainer.fit(train)
    assert info.value.step == 1
    assert "param_norms" in info.value.snapshot
    assert observer.alerts[0].alert_type == TrainingAlertType.NON_FINITE_LOSS


def test_whitening_failure_raises_with_snapshot(tiny_data, monkeypatch):
    def failing(cov, eps, iters):
        raise NumericalFailureError("valores no finitos", step=3)

    monkeypatch.setattr(whitening, "coupled_newton_schulz", failing)
    train, _ = tiny_data
    trainer = Trainer(_tiny_mlp(), TrainConfig(batch_size=16))
    with pytest.raises(NumericalFailureError) as info:
        trainer.fit(train)
    assert info.value.layer_index == 1
    assert info.value.snapshot["step"] == 1
    assert set(info.value.snapshot["param_norms"]) == {name for name, _, _ in
                                                       trainer.network.parameters()}


def test_batch_size_presets():
    sizes = [preset.batch_size for preset in BATCH_SIZE_PRESETS]
    assert sizes == [2, 8, 32, 128, 512, 2048]
    assert BATCH_SIZE_PRESETS[0].eps == 0.01 and BATCH_SIZE_PRESETS[0].ns_iters == 2
