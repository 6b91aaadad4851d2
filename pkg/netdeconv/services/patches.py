"""
Construcción de la matriz de parches X (im2col), su adjunta (col2im) y la
partición en grupos de canales.
"""
from typing import List, Tuple

import numpy as np

from netdeconv.errors import ShapeError
from netdeconv.models.whitening import PatchMatrix, PatchSpec


def im2col(x: np.ndarray, spec: PatchSpec) -> PatchMatrix:
    """
    Convierte un tensor NCHW en la matriz de parches.

    Filas en orden lote, fila, columna de salida. Columnas agrupadas por canal
    (canal, ky, kx), es decir, los bloques por canal concatenados en horizontal.

    Args:
        x: Tensor (N, C, H, W)
        spec: Geometría de los parches

    Returns:
        PatchMatrix de N·H_out·W_out filas y C·k·k columnas

    Raises:
        ShapeError: Si el tensor no es 4D, C no coincide o la salida no es entera
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col espera NCHW, forma {x.shape}")
    n, c, h, w = x.shape
    if c != spec.channels_in:
        raise ShapeError(f"{c} canales pero la geometría declara {spec.channels_in}")
    out_h, out_w = spec.output_size(h, w)
    k, s, p = spec.kernel, spec.stride, spec.padding

    img = np.pad(x, [(0, 0), (0, 0), (p, p), (p, p)], mode="constant") if p else x
    col = np.empty((n, c, k, k, out_h, out_w), dtype=x.dtype)
    for ky in range(k):
        y_max = ky + s * out_h
        for kx in range(k):
            x_max = kx + s * out_w
            col[:, :, ky, kx, :, :] = img[:, :, ky:y_max:s, kx:x_max:s]

    data = col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, c * k * k)
    return PatchMatrix(data=data, spec=spec, batch=n, out_h=out_h, out_w=out_w)


def col2im(g: np.ndarray, spec: PatchSpec, out_shape: Tuple[int, int, int, int]) -> np.ndarray:
    """
    Adjunta de im2col: suma dispersa de cada parche en su posición.

    Args:
        g: Matriz (N·H_out·W_out, C·k·k)
        spec: Geometría usada en im2col
        out_shape: Forma (N, C, H, W) del tensor original

    Returns:
        Tensor (N, C, H, W)
    """
    n, c, h, w = out_shape
    out_h, out_w = spec.output_size(h, w)
    k, s, p = spec.kernel, spec.stride, spec.padding
    expected = (n * out_h * out_w, c * k * k)
    if g.shape != expected:
        raise ShapeError(f"col2im esperaba {expected}, recibió {g.shape}")

    col = g.reshape(n, out_h, out_w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
    for ky in range(k):
        y_max = ky + s * out_h
        for kx in range(k):
            x_max = kx + s * out_w
            img[:, :, ky:y_max:s, kx:x_max:s] += col[:, :, ky, kx, :, :]
    return img[:, :, p:p + h, p:p + w]


def partition_groups(X: PatchMatrix, block_size: int = None) -> List[PatchMatrix]:
    """
    Divide las columnas de X en grupos de B canales (vistas, sin copia).

    Con C % B != 0 el último grupo toma el resto.
    """
    spec = X.spec
    if block_size is not None and block_size != spec.block_size:
        spec = PatchSpec(spec.kernel, spec.stride, spec.padding, spec.channels_in, block_size)
    groups = []
    for index, cols in enumerate(spec.group_slices()):
        groups.append(PatchMatrix(
            data=X.data[:, cols],
            spec=spec,
            batch=X.batch,
            out_h=X.out_h,
            out_w=X.out_w,
            group_index=index,
            column_offset=cols.start,
        ))
    return groups


def subsample_rows(X: PatchMatrix, stride: int) -> np.ndarray:
    """
    Toma cada S-ésima posición espacial en ambos ejes; el lote no se submuestrea.
    """
    if stride == 1:
        return X.data
    grid = X.data.reshape(X.batch, X.out_h, X.out_w, X.cols)
    return grid[:, ::stride, ::stride, :].reshape(-1, X.cols)


def rows_to_nchw(y: np.ndarray, batch: int, out_h: int, out_w: int) -> np.ndarray:
    """(N·H·W, C) → (N, C, H, W)."""
    return y.reshape(batch, out_h, out_w, -1).transpose(0, 3, 1, 2)


def nchw_to_rows(y: np.ndarray) -> np.ndarray:
    """(N, C, H, W) → (N·H·W, C)."""
    n, c, h, w = y.shape
    return y.transpose(0, 2, 3, 1).reshape(n * h * w, c)


def direct_conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """
    Convolución (correlación) por ventana deslizante, sin im2col. Sirve de oráculo.

    Args:
        x: (N, C, H, W)
        kernel: (C_out, C, k, k)
    """
    n, c, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    img = np.pad(x, [(0, 0), (0, 0), (padding, padding), (padding, padding)])
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, out_h, out_w), dtype=np.result_type(x, kernel))
    for i in range(out_h):
        for j in range(out_w):
            window = img[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.tensordot(window, kernel, axes=([1, 2, 3], [1, 2, 3]))
    return out
