"""
Núcleo de álgebra lineal densa: productos deterministas, normas, Jacobi simétrico
y generadores aleatorios con semilla.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Literal, Optional, Tuple

import numpy as np
import structlog

from netdeconv.config import settings
from netdeconv.errors import ContractError, ShapeError


logger = structlog.get_logger(__name__)

# Por encima de esta dimensión sym_eig delega en LAPACK (método "auto")
JACOBI_MAX_DIM = 128

RandomStream = np.random.Generator


def matmul(a: np.ndarray, b: np.ndarray, block_rows: Optional[int] = None,
           workers: Optional[int] = None) -> np.ndarray:
    """
    Producto matricial por bloques fijos de filas.

    Cada bloque de salida se calcula de forma independiente, así que el
    resultado no depende del número de hilos.

    Args:
        a: Matriz (m, k)
        b: Matriz (k, n)
        block_rows: Filas por bloque (por defecto settings)
        workers: Hilos (por defecto NETDECONV_THREADS)

    Returns:
        Matriz (m, n)

    Raises:
        ShapeError: Si las dimensiones internas no coinciden
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul espera matrices 2D, recibió {a.shape} y {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"dimensiones incompatibles {a.shape} x {b.shape}")

    block_rows = block_rows or settings.NETDECONV_MATMUL_BLOCK_ROWS
    workers = workers or settings.NETDECONV_THREADS
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    starts = range(0, a.shape[0], block_rows)

    def _block(start: int) -> None:
        stop = min(start + block_rows, a.shape[0])
        np.matmul(a[start:stop], b, out=out[start:stop])

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_block, starts))
    else:
        for start in starts:
            _block(start)
    return out


def frobenius_norm(a: np.ndarray) -> float:
    """Raíz de la suma de cuadrados."""
    return float(np.sqrt(np.sum(np.square(a, dtype=np.float64))))


def is_symmetric(a: np.ndarray, rtol: float = 1e-12) -> bool:
    """
    |A[i,j] − A[j,i]| ≤ rtol·max(1, |A[i,j]|) para todo i, j.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return False
    gap = np.abs(a - a.T)
    return bool(np.all(gap <= rtol * np.maximum(1.0, np.abs(a))))


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _jacobi_eig(a: np.ndarray, tol: float, max_sweeps: int) -> Tuple[np.ndarray, np.ndarray]:
    A = np.array(a, dtype=np.float64, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    scale = max(1.0, frobenius_norm(A))

    for sweep in range(max_sweeps):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off < tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c

                col_p = A[:, p].copy()
                col_q = A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p = A[p, :].copy()
                row_q = A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                A[p, q] = A[q, p] = 0.0

                vec_p = V[:, p].copy()
                vec_q = V[:, q].copy()
                V[:, p] = c * vec_p - s * vec_q
                V[:, q] = s * vec_p + c * vec_q
    else:
        logger.warning("Jacobi sin converger", sweeps=max_sweeps, dim=n)

    return np.diag(A).copy(), V


def sym_eig(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100,
            method: Literal["auto", "jacobi", "lapack"] = "auto") -> Tuple[np.ndarray, np.ndarray]:
    """
    Autodescomposición de una matriz simétrica con rotaciones de Jacobi cíclicas.

    Itera hasta que la masa fuera de la diagonal cae por debajo de
    tol·max(1, ‖A‖_F). Con method="auto" las matrices de más de
    JACOBI_MAX_DIM filas se resuelven con LAPACK (numpy.linalg.eigh).

    Returns:
        (autovalores ascendentes, autovectores en columnas)

    Raises:
        ContractError: Si la matriz no es simétrica
    """
    if not is_symmetric(a):
        raise ContractError("sym_eig requiere una matriz cuadrada simétrica")

    use_lapack = method == "lapack" or (method == "auto" and a.shape[0] > JACOBI_MAX_DIM)
    if use_lapack:
        eigenvalues, eigenvectors = np.linalg.eigh(np.asarray(a, dtype=np.float64))
    else:
        eigenvalues, eigenvectors = _jacobi_eig(a, tol, max_sweeps)

    order = np.argsort(eigenvalues, kind="stable")
    return eigenvalues[order], eigenvectors[:, order]


def seeded_rng(seed: int) -> RandomStream:
    """Flujo aleatorio determinista."""
    return np.random.Generator(np.random.PCG64(seed))


def gaussian(rng: RandomStream, shape, mean: float = 0.0, std: float = 1.0,
             dtype=np.float64) -> np.ndarray:
    return rng.normal(mean, std, size=shape).astype(dtype, copy=False)


def uniform(rng: RandomStream, shape, low: float = 0.0, high: float = 1.0,
            dtype=np.float64) -> np.ndarray:
    return rng.uniform(low, high, size=shape).astype(dtype, copy=False)


def random_spd(rng: RandomStream, n: int, condition: float = 10.0) -> np.ndarray:
    """
    Matriz SPD con autovalores log-espaciados entre 1 y `condition`.
    """
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eigenvalues = np.logspace(0.0, np.log10(condition), n)
    return symmetrize((q * eigenvalues) @ q.T)
