"""
Covarianzas agrupadas, raíces cuadradas inversas (Newton-Schulz acoplado y
clásico, oráculo por autodescomposición), kernels de deconvolución y
medidas de dispersión.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from netdeconv.errors import (
    ContractError,
    DegenerateDataError,
    InsufficientDataError,
    NumericalFailureError,
    ShapeError,
)
from netdeconv.models.whitening import (
    CovarianceStats,
    PatchMatrix,
    PatchSpec,
    WhiteningConfig,
    WhiteningState,
)
from netdeconv.services.linalg import frobenius_norm, matmul, sym_eig, symmetrize
from netdeconv.services.patches import partition_groups, subsample_rows


logger = structlog.get_logger(__name__)

# Umbral a partir del cual la iteración clásica se considera desbordada
_OVERFLOW_RESIDUAL = 1e100


class CovarianceAccumulator:
    """
    Acumula sumas y matrices de Gram por bloques de filas, en float64.
    """

    def __init__(self, features: int):
        self.features = features
        self.count = 0
        self._sum = np.zeros(features)
        self._gram = np.zeros((features, features))

    def update(self, rows: np.ndarray) -> None:
        if rows.ndim != 2 or rows.shape[1] != self.features:
            raise ShapeError(f"se esperaban filas de {self.features} columnas, forma {rows.shape}")
        rows = np.asarray(rows, dtype=np.float64)
        self.count += rows.shape[0]
        self._sum += rows.sum(axis=0)
        self._gram += matmul(rows.T, rows)

    def finalize(self, centered: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        if self.count < 2:
            raise InsufficientDataError(f"se necesitan al menos 2 filas, hay {self.count}")
        mu = self._sum / self.count
        cov = self._gram / self.count
        if centered:
            cov = cov - np.outer(mu, mu)
        return mu, symmetrize(cov)


def covariance_from_rows(rows: np.ndarray, centered: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    Media por columna y covarianza (1/N)(X−μ)ᵀ(X−μ), o (1/N)XᵀX sin centrar.
    """
    if rows.shape[0] < 2:
        raise InsufficientDataError(f"se necesitan al menos 2 filas muestreadas, hay {rows.shape[0]}")
    rows = np.asarray(rows, dtype=np.float64)
    mu = rows.mean(axis=0)
    data = rows - mu if centered else rows
    cov = matmul(data.T, data) / rows.shape[0]
    return mu, symmetrize(cov)


def covariance(X: Union[PatchMatrix, np.ndarray], stride: int = 1,
               centered: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    Covarianza de la matriz de parches con submuestreo espacial.

    Args:
        X: Matriz de parches (o matriz 2D sin geometría, sin submuestreo)
        stride: Toma cada S-ésima posición en ambos ejes de cada mapa
        centered: Resta la media por columna

    Returns:
        (mu, Cov)

    Raises:
        InsufficientDataError: Si quedan menos de 2 filas
    """
    rows = subsample_rows(X, stride) if isinstance(X, PatchMatrix) else X
    return covariance_from_rows(rows, centered)


def prescale_bound(A: np.ndarray) -> float:
    """
    Cota superior de λ_max para una matriz PSD: mínimo entre la traza y la
    mayor suma absoluta por fila.
    """
    return float(min(np.trace(A), np.max(np.sum(np.abs(A), axis=1))))


def _ridged(cov: np.ndarray, eps: float) -> Tuple[np.ndarray, float]:
    A = np.asarray(cov, dtype=np.float64) + eps * np.eye(cov.shape[0])
    scale = prescale_bound(A)
    if not np.isfinite(scale) or scale <= 0.0:
        raise NumericalFailureError(f"escala de pre-normalización inválida: {scale}", step=0)
    return A, scale


def _coupled_iterates(A_hat: np.ndarray, iters: int):
    n = A_hat.shape[0]
    eye = np.eye(n)
    Y = A_hat.copy()
    Z = eye.copy()
    for step in range(1, iters + 1):
        T = 0.5 * (3.0 * eye - matmul(Z, Y))
        Y = matmul(Y, T)
        Z = matmul(T, Z)
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(Z))):
            raise NumericalFailureError(
                f"Newton-Schulz acoplado produjo valores no finitos en el paso {step}", step=step
            )
        yield step, Z


def coupled_newton_schulz(cov: np.ndarray, eps: float = 1e-5, iters: int = 5) -> np.ndarray:
    """
    Raíz cuadrada inversa aproximada D ≈ (Cov + εI)^(-1/2) por Newton-Schulz acoplado.

    Y₀ = Â, Z₀ = I con Â = A/c; en cada paso
    T = ½(3I − ZY), Y ← YT, Z ← TZ. Se devuelve D = Z/√c simetrizada.

    Raises:
        NumericalFailureError: Con el paso en que aparecieron valores no finitos
    """
    A, scale = _ridged(cov, eps)
    Z = np.eye(A.shape[0])
    for _, Z in _coupled_iterates(A / scale, iters):
        pass
    return symmetrize(Z / np.sqrt(scale))


def coupled_newton_schulz_trace(cov: np.ndarray, eps: float = 1e-5,
                                iters: int = 1000) -> Tuple[np.ndarray, List[float]]:
    """
    Newton-Schulz acoplado registrando ‖Z_k Z_k Â − I‖_F en cada paso.
    """
    A, scale = _ridged(cov, eps)
    A_hat = A / scale
    eye = np.eye(A.shape[0])
    residuals: List[float] = []
    Z = eye
    for _, Z in _coupled_iterates(A_hat, iters):
        residuals.append(frobenius_norm(matmul(matmul(Z, Z), A_hat) - eye))
    return symmetrize(Z / np.sqrt(scale)), residuals


def vanilla_newton_schulz(cov: np.ndarray, eps: float = 1e-5,
                          iters: int = 1000) -> Tuple[np.ndarray, List[float]]:
    """
    Iteración de Newton-Schulz sin acoplar X_{k+1} = ½X_k(3I − ÂX_k²), X₀ = I.

    Un desbordamiento no lanza excepción: se registra como residuo infinito,
    se detiene la iteración y se devuelve la traza parcial.

    Returns:
        (D del último iterado finito, residuos ‖X_k X_k Â − I‖_F por paso)
    """
    A, scale = _ridged(cov, eps)
    A_hat = A / scale
    eye = np.eye(A.shape[0])
    X = eye.copy()
    last_finite = X
    residuals: List[float] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, iters + 1):
            X = 0.5 * matmul(X, 3.0 * eye - matmul(A_hat, matmul(X, X)))
            residual = frobenius_norm(matmul(matmul(X, X), A_hat) - eye)
            if not np.isfinite(residual) or residual > _OVERFLOW_RESIDUAL:
                residuals.append(float("inf"))
                logger.info("Newton-Schulz clásico desbordado", step=step)
                break
            residuals.append(residual)
            last_finite = X
    return symmetrize(last_finite / np.sqrt(scale)), residuals


def inverse_sqrt_oracle(cov: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """
    V·diag((λ+ε)^(-1/2))·Vᵀ con la autodescomposición simétrica.
    """
    eigenvalues, V = sym_eig(symmetrize(np.asarray(cov, dtype=np.float64)))
    shifted = np.maximum(eigenvalues, 0.0) + eps
    if np.any(shifted <= 0.0):
        raise NumericalFailureError("covarianza singular sin regularización (eps = 0)")
    return symmetrize((V / np.sqrt(shifted)) @ V.T)


def sqrt_oracle(cov: np.ndarray) -> np.ndarray:
    """V·diag(λ^(1/2))·Vᵀ."""
    eigenvalues, V = sym_eig(symmetrize(np.asarray(cov, dtype=np.float64)))
    return symmetrize((V * np.sqrt(np.maximum(eigenvalues, 0.0))) @ V.T)


def whitening_residual(D: np.ndarray, cov: np.ndarray, eps: float = 0.0) -> float:
    """‖D·D·(Cov + εI) − I‖_F"""
    n = cov.shape[0]
    A = cov + eps * np.eye(n)
    return frobenius_norm(matmul(matmul(D, D), A) - np.eye(n))


def whitened_covariance_stats(whitened: np.ndarray) -> CovarianceStats:
    """
    Diagnóstico de la covarianza de datos ya blanqueados (ya centrados).
    """
    _, cov = covariance_from_rows(whitened, centered=True)
    diag = np.diag(cov)
    n = cov.shape[0]
    off = cov[~np.eye(n, dtype=bool)]
    return CovarianceStats(
        offdiag_mean_abs=float(np.mean(np.abs(off))) if off.size else 0.0,
        diag_min=float(diag.min()),
        diag_max=float(diag.max()),
    )


def update_running(state: WhiteningState, mu: np.ndarray, D: np.ndarray,
                   momentum: float, freeze_after: Optional[int] = None) -> WhiteningState:
    """
    Actualiza los promedios móviles: running ← (1−m)·running + m·actual.

    Al alcanzar `freeze_after` pasos el estado queda congelado y los valores
    vigentes se reemplazan por los promedios. Un estado congelado no cambia.
    """
    if state.frozen:
        return state
    if mu.shape != state.running_mu.shape or D.shape != state.running_D.shape:
        raise ShapeError(f"formas incompatibles: mu {mu.shape}, D {D.shape}")

    state.mu = mu
    state.D = D
    state.running_mu = (1.0 - momentum) * state.running_mu + momentum * mu
    state.running_D = (1.0 - momentum) * state.running_D + momentum * D
    state.step += 1
    if freeze_after is not None and state.step >= freeze_after:
        state.frozen = True
        state.mu = state.running_mu.copy()
        state.D = state.running_D.copy()
        logger.info("Matriz de deconvolución congelada", step=state.step)
    return state


def extract_deconv_kernel(D: np.ndarray, k: int, channels: int) -> np.ndarray:
    """
    Kernels de deconvolución: la fila de D del píxel central de cada canal,
    reorganizada como (C, k, k). Equivale a D·vec(δ_c).

    Returns:
        Tensor (C, C, k, k)

    Raises:
        ContractError: Si k es par o D no tiene tamaño (C·k·k)²
    """
    if k % 2 == 0:
        raise ContractError(f"k={k} es par: no hay píxel central")
    size = channels * k * k
    if D.shape != (size, size):
        raise ContractError(f"D debe ser {size}x{size}, forma {D.shape}")
    center = (k // 2) * k + k // 2
    rows = [D[c * k * k + center].reshape(channels, k, k) for c in range(channels)]
    return np.stack(rows)


@dataclass
class CenterSurround:
    """Comparación de signo entre el centro y el anillo de un kernel."""
    channel: int
    center: float
    ring_mean: float

    @property
    def opposed(self) -> bool:
        return bool(np.sign(self.center) != 0 and np.sign(self.center) == -np.sign(self.ring_mean))


def center_surround_report(kernels: np.ndarray, radii: Tuple[int, int] = (1, 3)) -> List[CenterSurround]:
    """
    Para cada canal compara el centro de kernels[c, c] con la media de los
    vecinos a distancia de Chebyshev entre radii[0] y radii[1].
    """
    channels, _, k, _ = kernels.shape
    mid = k // 2
    yy, xx = np.mgrid[0:k, 0:k]
    distance = np.maximum(np.abs(yy - mid), np.abs(xx - mid))
    ring = (distance >= radii[0]) & (distance <= radii[1])
    report = []
    for c in range(channels):
        kernel = kernels[c, c]
        report.append(CenterSurround(c, float(kernel[mid, mid]), float(kernel[ring].mean())))
    return report


@dataclass
class SparsityStats:
    """Histogramas y curtosis antes y después de la deconvolución."""
    edges: np.ndarray
    hist_before: np.ndarray
    hist_after: np.ndarray
    log_density_before: np.ndarray
    log_density_after: np.ndarray
    kurtosis_before: float
    kurtosis_after: float

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bin_left": self.edges[:-1],
            "bin_right": self.edges[1:],
            "density_before": self.hist_before,
            "density_after": self.hist_after,
            "log_density_before": self.log_density_before,
            "log_density_after": self.log_density_after,
        })


def excess_kurtosis(values: np.ndarray) -> float:
    """
    Curtosis en exceso (Fisher) con el estimador de pandas.

    Raises:
        DegenerateDataError: Si la entrada es constante
    """
    series = pd.Series(np.asarray(values, dtype=np.float64).ravel())
    if series.size < 4 or series.std() == 0.0:
        raise DegenerateDataError("curtosis no definida para datos constantes")
    return float(series.kurt())


def sparsity_stats(x_before: np.ndarray, x_after: np.ndarray, bins: int = 64) -> SparsityStats:
    """
    Histogramas de 64 clases sobre valores normalizados min-max y curtosis en exceso.
    """
    if x_before.size != x_after.size:
        raise ShapeError(f"tamaños distintos: {x_before.size} vs {x_after.size}")
    kurt_before = excess_kurtosis(x_before)
    kurt_after = excess_kurtosis(x_after)

    def _normalized_hist(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        values = np.asarray(values, dtype=np.float64).ravel()
        lo, hi = values.min(), values.max()
        scaled = (values - lo) / (hi - lo)
        return np.histogram(scaled, bins=bins, range=(0.0, 1.0), density=True)

    hist_before, edges = _normalized_hist(x_before)
    hist_after, _ = _normalized_hist(x_after)
    tiny = np.finfo(np.float64).tiny
    return SparsityStats(
        edges=edges,
        hist_before=hist_before,
        hist_after=hist_after,
        log_density_before=np.log(hist_before + tiny),
        log_density_after=np.log(hist_after + tiny),
        kurtosis_before=kurt_before,
        kurtosis_after=kurt_after,
    )


@dataclass
class GroupWhitener:
    """
    Blanqueo por grupos de canales de una matriz de parches, con un
    WhiteningState por grupo.
    """
    spec: PatchSpec
    config: WhiteningConfig
    layer_index: Optional[int] = None
    states: List[WhiteningState] = field(default_factory=list)
    last_D: List[np.ndarray] = field(default_factory=list)
    diagnostics: bool = False
    just_frozen: bool = False

    def __post_init__(self):
        if not self.states:
            self.states = [
                WhiteningState.initial(cols.stop - cols.start)
                for cols in self.spec.group_slices()
            ]

    @property
    def frozen(self) -> bool:
        return all(state.frozen for state in self.states)

    def residuals(self) -> List[Optional[float]]:
        return [state.last_residual for state in self.states]

    def _inverse_sqrt(self, cov: np.ndarray, group: int) -> np.ndarray:
        base_eps = self.config.eps
        retrying = Retrying(
            stop=stop_after_attempt(self.config.ns_retries + 1),
            retry=retry_if_exception_type(NumericalFailureError),
            reraise=True,
        )
        for attempt in retrying:
            with attempt:
                number = attempt.retry_state.attempt_number
                eps = base_eps if number == 1 else max(base_eps, 1e-8) * 10 ** (number - 1)
                if number > 1:
                    logger.warning("Reintentando Newton-Schulz", layer=self.layer_index,
                                   group=group, eps=eps, attempt=number)
                return coupled_newton_schulz(cov, eps, self.config.ns_iters)

    def whiten(self, X: PatchMatrix, training: bool) -> np.ndarray:
        """
        Devuelve (X − μ)·D por grupo. En entrenamiento estima μ y D del lote
        (salvo grupos congelados); en evaluación usa los promedios móviles.
        """
        out = np.empty((X.rows, X.cols), dtype=np.float64)
        self.last_D = []
        self.just_frozen = False
        for group, state in zip(partition_groups(X, self.spec.block_size), self.states):
            if training and not state.frozen:
                try:
                    mu, cov = covariance(group, self.config.sample_stride, self.config.centered)
                    D = self._inverse_sqrt(cov, group.group_index)
                except NumericalFailureError as exc:
                    if self.layer_index is None:
                        raise
                    raise exc.with_layer(self.layer_index) from exc
                if not self.config.centered:
                    mu = np.zeros_like(mu)
                if self.diagnostics:
                    state.last_residual = whitening_residual(D, cov, self.config.eps)
                update_running(state, mu, D, self.config.momentum, self.config.freeze_after)
                self.just_frozen = self.just_frozen or state.frozen
                mu_use, D_use = state.mu, state.D
            elif state.frozen:
                mu_use, D_use = state.mu, state.D
            else:
                mu_use, D_use = state.running_mu, state.running_D
            cols = slice(group.column_offset, group.column_offset + group.cols)
            out[:, cols] = matmul(np.asarray(group.data, dtype=np.float64) - mu_use, D_use)
            self.last_D.append(D_use)
        return out

    def project_gradient(self, grad: np.ndarray) -> np.ndarray:
        """Gradiente respecto a X dado el de (X−μ)·D, con μ y D constantes."""
        out = np.empty_like(grad, dtype=np.float64)
        for cols, D in zip(self.spec.group_slices(), self.last_D):
            out[:, cols] = matmul(grad[:, cols], D.T)
        return out

    def effective(self, training: bool = False) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(μ, D) que usaría un forward en el modo indicado."""
        pairs = []
        for state in self.states:
            if state.frozen or training:
                pairs.append((state.mu, state.D))
            else:
                pairs.append((state.running_mu, state.running_D))
        return pairs
