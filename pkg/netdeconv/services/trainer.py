"""
Bucle de SGD con weight decay y calendarios de tasa de aprendizaje, soluciones
cerradas de mínimos cuadrados y el chequeo de convergencia en un paso.
"""
import math
import time
from dataclasses import dataclass
from typing import Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
import structlog

from netdeconv.config import settings
from netdeconv.errors import NumericalFailureError, ShapeError
from netdeconv.models.data import Dataset
from netdeconv.models.observer import Observable, Observer
from netdeconv.models.training import (
    ConvergenceReport,
    MetricRow,
    RunRecord,
    TrainConfig,
    TrainingAlert,
    TrainingAlertType,
)
from netdeconv.services.layers import LOSSES, Network, loss_targets
from netdeconv.services.linalg import frobenius_norm, matmul, seeded_rng, sym_eig, symmetrize
from netdeconv.services.whitening import coupled_newton_schulz, inverse_sqrt_oracle


logger = structlog.get_logger(__name__)

# Factor sobre la mejor pérdida que dispara una alerta LOSS_SPIKE
LOSS_SPIKE_FACTOR = 10.0


@dataclass(frozen=True)
class BatchSizePreset:
    """Ajustes por tamaño de lote: tasa de aprendizaje, eps e iteraciones."""
    batch_size: int
    lr: float
    eps: float
    ns_iters: int
    reported_acc: float


BATCH_SIZE_PRESETS: Tuple[BatchSizePreset, ...] = (
    BatchSizePreset(2, 0.001, 0.01, 2, 0.8912),
    BatchSizePreset(8, 0.01, 0.01, 2, 0.9126),
    BatchSizePreset(32, 0.01, 1e-5, 5, 0.9118),
    BatchSizePreset(128, 0.1, 1e-5, 5, 0.9156),
    BatchSizePreset(512, 0.5, 1e-5, 5, 0.9166),
    BatchSizePreset(2048, 1.0, 1e-5, 5, 0.9064),
)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float,
             weight_decay: float = 0.0, momentum: float = 0.0,
             velocity: Optional[List[np.ndarray]] = None) -> Sequence[np.ndarray]:
    """
    p ← p − lr·(g + weight_decay·p), en el lugar.

    Con momentum > 0 acumula v ← momentum·v + (g + wd·p) en `velocity`.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parámetros pero {len(grads)} gradientes")
    for index, (param, grad) in enumerate(zip(params, grads)):
        update = grad + weight_decay * param if weight_decay else grad
        if momentum:
            if velocity is None:
                raise ShapeError("momentum requiere buffers de velocidad")
            velocity[index] *= momentum
            velocity[index] += update
            update = velocity[index]
        param -= (lr * update).astype(param.dtype, copy=False)
    return params


def l2_objective(X: np.ndarray, w: np.ndarray, y_hat: np.ndarray) -> float:
    """½·(1/N)·‖Xw − ŷ‖²"""
    residual = matmul(X, w.reshape(X.shape[1], -1)) - y_hat.reshape(X.shape[0], -1)
    return 0.5 * float(np.sum(residual * residual)) / X.shape[0]


def closed_form_l2(X: np.ndarray, y_hat: np.ndarray, ridge: float = 0.0,
                   rcond: Optional[float] = None) -> np.ndarray:
    """
    Solución de las ecuaciones normales w = (XᵀX + ridge·I)⁻¹Xᵀŷ vía autodescomposición.

    Con `rcond` se descartan los autovalores menores que rcond·λ_max
    (pseudo-inversa) en lugar de fallar.

    Raises:
        NumericalFailureError: Si XᵀX es singular y no hay ridge ni rcond
    """
    gram = symmetrize(matmul(X.T, X))
    if ridge:
        gram = gram + ridge * np.eye(gram.shape[0])
    eigenvalues, V = sym_eig(gram)
    top = max(float(eigenvalues.max()), np.finfo(np.float64).tiny)
    keep = eigenvalues > (rcond if rcond is not None else 1e-12) * top
    if rcond is None and not np.all(keep):
        raise NumericalFailureError("XᵀX singular: use ridge o rcond")
    rhs = matmul(V.T, matmul(X.T, y_hat.reshape(X.shape[0], -1)))
    inverse = np.where(keep, 1.0 / np.where(keep, eigenvalues, 1.0), 0.0)
    w = matmul(V, rhs * inverse[:, None])
    return w.reshape(-1) if y_hat.ndim == 1 else w


def one_step_convergence_check(X: np.ndarray, y_hat: np.ndarray, whiten: bool = True,
                               eps: float = 0.0,
                               method: Literal["oracle", "newton_schulz"] = "oracle",
                               ns_iters: int = 15, lr: float = 1.0) -> ConvergenceReport:
    """
    Un paso de descenso de gradiente completo desde w = 0 comparado con el óptimo.

    Con `whiten` los datos se transforman con D = ((1/N)XᵀX + εI)^(-1/2); si la
    matriz es singular y eps = 0 se añade un ridge mínimo y se marca en el reporte.
    """
    n, features = X.shape
    X = np.asarray(X, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(n, -1)
    ridge_applied = False

    if whiten:
        cov = symmetrize(matmul(X.T, X) / n)
        eigenvalues, _ = sym_eig(cov)
        if eps == 0.0 and eigenvalues[0] <= 1e-12 * max(eigenvalues[-1], 1e-300):
            eps = 1e-10 * float(np.trace(cov)) / features
            ridge_applied = True
            logger.warning("X con rango deficiente, se aplica ridge", eps=eps)
        if method == "oracle":
            D = inverse_sqrt_oracle(cov, eps)
        else:
            D = coupled_newton_schulz(cov, eps, ns_iters)
        data = matmul(X, D)
    else:
        data = X

    w_one = lr * matmul(data.T, y_hat) / n
    loss_start = l2_objective(data, np.zeros((features, y_hat.shape[1])), y_hat)
    loss_one = l2_objective(data, w_one, y_hat)
    w_star = closed_form_l2(data, y_hat, rcond=1e-12)
    loss_star = l2_objective(data, w_star, y_hat)

    gap = loss_one - loss_star
    relative = gap / loss_star if loss_star > 1e-300 else gap
    diverged = not math.isfinite(loss_one) or loss_one > loss_start
    report = ConvergenceReport(
        loss_one_step=loss_one,
        loss_optimal=loss_star,
        relative_gap=float(relative),
        whitened=whiten,
        ridge_applied=ridge_applied,
        eps=eps,
        method=method if whiten else "raw",
        diverged=diverged,
    )
    logger.info("Chequeo de convergencia en un paso", **report.as_dict())
    return report


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    """Tasa constante o con recocido coseno hasta 0."""
    if config.schedule == "cosine" and total_steps > 0:
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / total_steps))
    return config.lr


def accuracy(outputs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(outputs, axis=1) == labels))


def evaluate(network: Network, dataset: Dataset, loss: str = "xent",
             batch_size: int = 256) -> Tuple[float, float]:
    """(pérdida, exactitud) en modo eval; restaura el modo entrenamiento."""
    network.eval()
    try:
        outputs = network.predict(dataset.images, batch_size)
    finally:
        network.train()
    targets = loss_targets(loss, dataset.labels, dataset.num_classes)
    value, _ = LOSSES[loss](outputs, targets)
    return value, accuracy(outputs, dataset.labels)


def batch_indices(count: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """
    Permutación aleatoria partida en lotes; el último lote incompleto se
    descarta salvo que sea el único.
    """
    order = rng.permutation(count)
    if count <= batch_size:
        return [order]
    full = count // batch_size
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(full)]


class Trainer(Observable):
    """
    Entrena una red con SGD y notifica a los observadores cada fila de
    métricas y cada alerta.
    """

    def __init__(self, network: Network, config: TrainConfig, name: str = "run"):
        super().__init__()
        self.network = network
        self.config = config
        self.name = name
        self.record = RunRecord(name=name)
        self.step = 0
        self._best_loss = math.inf
        self._velocity: Optional[List[np.ndarray]] = None

    def _alert(self, alert_type: TrainingAlertType, value: float,
               layer_index: Optional[int] = None) -> None:
        alert = TrainingAlert(alert_type, self.step, value, layer_index)
        logger.warning("Alerta de entrenamiento", message=alert.message)
        self.notify_observers(alert=alert)

    def _emit(self, row: MetricRow) -> None:
        self.record.append(row)
        self.notify_observers(row=row)

    def _snapshot(self, last_loss: float) -> dict:
        return {
            "step": self.step,
            "last_finite_loss": last_loss,
            "param_norms": {name: frobenius_norm(value)
                            for name, value, _ in self.network.parameters()},
        }

    def _train_step(self, images: np.ndarray, labels: np.ndarray, targets: np.ndarray,
                    lr: float, epoch: int) -> None:
        config = self.config
        started = time.perf_counter()
        self.step += 1
        try:
            outputs = self.network.forward(images)
        except NumericalFailureError as exc:
            exc.snapshot.update(self._snapshot(self._best_loss))
            raise
        loss, grad = LOSSES[config.loss](outputs, targets)
        if not math.isfinite(loss):
            self._alert(TrainingAlertType.NON_FINITE_LOSS, loss)
            raise NumericalFailureError(
                f"pérdida no finita en el paso {self.step}",
                step=self.step, snapshot=self._snapshot(self._best_loss),
            )
        self.network.backward(grad)

        entries = self.network.parameters()
        params = [value for _, value, _ in entries]
        grads = [gradient for _, _, gradient in entries]
        if config.momentum and self._velocity is None:
            self._velocity = [np.zeros_like(value) for value in params]
        sgd_step(params, grads, lr, config.weight_decay, config.momentum, self._velocity)

        if self.step > 10 and loss > LOSS_SPIKE_FACTOR * self._best_loss:
            self._alert(TrainingAlertType.LOSS_SPIKE, loss)
        self._best_loss = min(self._best_loss, loss)
        for layer in self.network.deconv_layers():
            if layer.whitener.just_frozen:
                self._alert(TrainingAlertType.LAYER_FROZEN, float(self.step), layer.index)

        wall_ms = (time.perf_counter() - started) * 1000 if settings.NETDECONV_RECORD_WALL_TIME else 0.0
        diag = self.network.whitening_diagnostics() if config.diagnostics else {}
        self._emit(MetricRow(self.step, epoch, "train", loss,
                             accuracy(outputs, labels), wall_ms, diag))

    def fit(self, train: Dataset, eval_set: Optional[Dataset] = None) -> RunRecord:
        """
        Entrena `epochs` épocas con barajado determinista y evalúa al final de cada una.

        Raises:
            NumericalFailureError: Si la pérdida deja de ser finita
        """
        config = self.config
        rng = seeded_rng(config.seed)
        self.network.train()
        self.network.set_diagnostics(config.diagnostics)
        targets_all = loss_targets(config.loss, train.labels, train.num_classes)

        steps_per_epoch = len(batch_indices(len(train), config.batch_size, seeded_rng(0)))
        if config.max_steps_per_epoch:
            steps_per_epoch = min(steps_per_epoch, config.max_steps_per_epoch)
        total_steps = steps_per_epoch * config.epochs

        logger.info("Iniciando entrenamiento", run=self.name, network=self.network.name,
                    steps=total_steps, batch_size=config.batch_size, lr=config.lr)
        for epoch in range(1, config.epochs + 1):
            batches = batch_indices(len(train), config.batch_size, rng)[:steps_per_epoch]
            for indices in batches:
                lr = learning_rate(config, self.step + 1, total_steps)
                self._train_step(train.images[indices], train.labels[indices],
                                 targets_all[indices], lr, epoch)
            if eval_set is not None:
                started = time.perf_counter()
                loss, acc = evaluate(self.network, eval_set, config.loss)
                wall_ms = (time.perf_counter() - started) * 1000 if settings.NETDECONV_RECORD_WALL_TIME else 0.0
                self._emit(MetricRow(self.step, epoch, "eval", loss, acc, wall_ms))
                logger.info("Evaluación", run=self.name, epoch=epoch, loss=loss, acc=acc)
        return self.record


def fit(network: Network, dataset: Dataset, config: TrainConfig,
        eval_set: Optional[Dataset] = None, observers: Iterable[Observer] = (),
        name: str = "run") -> RunRecord:
    """Atajo: crea un Trainer, registra observadores y entrena."""
    trainer = Trainer(network, config, name)
    for observer in observers:
        trainer.register_observer(observer)
    return trainer.fit(dataset, eval_set)
