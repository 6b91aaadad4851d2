from typing import Callable

import numpy as np


def numerical_grad(f: Callable[[], float], x: np.ndarray, delta: float = 1e-6) -> np.ndarray:
    """Gradiente por diferencias centrales de f() respecto a x (modificado en el lugar)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + delta
        plus = f()
        flat[i] = original - delta
        minus = f()
        flat[i] = original
        out[i] = (plus - minus) / (2 * delta)
    return grad
