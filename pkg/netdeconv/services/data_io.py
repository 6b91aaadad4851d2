"""
Ingesta de datos: MNIST/Fashion-MNIST (IDX), CIFAR-10 binario, problemas de
desenfoque sintéticos, muestreo de imágenes e imágenes naturales sintéticas.
"""
import struct
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from netdeconv.config import settings
from netdeconv.errors import ContractError, DataFormatError, ShapeError
from netdeconv.models.data import BlurProblem, Dataset
from netdeconv.models.whitening import PatchSpec
from netdeconv.services.linalg import matmul, seeded_rng
from netdeconv.services.patches import im2col


logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_IDX_UBYTE = 0x08

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def read_idx(path: PathLike, expected_magic: Optional[int] = None) -> np.ndarray:
    """
    Lee un archivo IDX de bytes sin signo (cabecera big-endian).

    Raises:
        DataFormatError: Magic inesperado o carga truncada, con el offset del fallo
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataFormatError("cabecera IDX truncada", offset=len(raw), path=path)
    magic = struct.unpack_from(">I", raw, 0)[0]
    zero, data_type, dims = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or data_type != _IDX_UBYTE or dims == 0:
        raise DataFormatError(f"magic IDX inválido 0x{magic:08x}", offset=0, path=path)
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(
            f"magic IDX 0x{magic:08x}, se esperaba 0x{expected_magic:08x}", offset=0, path=path
        )
    header_end = 4 + 4 * dims
    if len(raw) < header_end:
        raise DataFormatError("dimensiones IDX truncadas", offset=len(raw), path=path)
    shape = struct.unpack_from(f">{dims}I", raw, 4)
    expected = int(np.prod(shape))
    payload = raw[header_end:]
    if len(payload) < expected:
        raise DataFormatError(
            f"carga IDX de {len(payload)} bytes, se esperaban {expected}",
            offset=len(raw), path=path,
        )
    if len(payload) > expected:
        raise DataFormatError("bytes sobrantes tras la carga IDX",
                              offset=header_end + expected, path=path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def write_idx(path: PathLike, array: np.ndarray) -> Path:
    """Escribe un arreglo uint8 en formato IDX."""
    path = Path(path)
    data = np.asarray(array)
    if data.dtype != np.uint8:
        raise ContractError(f"IDX requiere uint8, dtype {data.dtype}")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack(">HBB", 0, _IDX_UBYTE, data.ndim)
    header += struct.pack(f">{data.ndim}I", *data.shape)
    path.write_bytes(header + np.ascontiguousarray(data).tobytes())
    return path


def load_idx(images_path: PathLike, labels_path: Optional[PathLike] = None,
             split: str = "train", num_classes: int = 10) -> Dataset:
    """
    Carga imágenes IDX (magic 0x803) y, si se indican, sus etiquetas (0x801).

    Sin etiquetas, todas valen 0.
    """
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = (read_idx(labels_path, IDX_LABELS_MAGIC) if labels_path is not None
              else np.zeros(images.shape[0], dtype=np.uint8))
    if labels.shape[0] != images.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} imágenes pero {labels.shape[0]} etiquetas",
            offset=4, path=Path(labels_path) if labels_path else None,
        )
    scaled = (images.astype(np.float64) / 255.0).astype(settings.activation_dtype)
    logger.info("IDX cargado", path=str(images_path), count=int(images.shape[0]))
    return Dataset(scaled[:, None, :, :], labels, split, num_classes)


def save_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Escribe un Dataset de un canal como par de archivos IDX."""
    if dataset.images.shape[1] != 1:
        raise ShapeError(f"IDX admite un canal, forma {dataset.images.shape}")
    pixels = np.rint(np.asarray(dataset.images[:, 0], dtype=np.float64) * 255.0)
    write_idx(images_path, np.clip(pixels, 0, 255).astype(np.uint8))
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def _find(directory: Path, name: str) -> Path:
    # Se aceptan "train-images-idx3-ubyte" y "train-images.idx3-ubyte"
    for candidate in (name, name.replace("-idx", ".idx")):
        path = directory / candidate
        if path.exists():
            return path
    raise FileNotFoundError(f"no se encontró {name} en {directory}")


def load_mnist_dir(directory: PathLike, split: str = "train") -> Dataset:
    """MNIST o Fashion-MNIST desde un directorio con los nombres estándar."""
    directory = Path(directory)
    images_name, labels_name = MNIST_FILES[split]
    return load_idx(_find(directory, images_name), _find(directory, labels_name), split)


def load_cifar10(paths: Union[PathLike, Sequence[PathLike]], split: str = "train") -> Dataset:
    """
    Uno o varios archivos binarios de CIFAR-10: registros de 1 byte de etiqueta
    más 3072 bytes de píxeles en orden CHW.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in map(Path, paths):
        raw = path.read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataFormatError(
                f"tamaño {len(raw)} no es múltiplo de {CIFAR_RECORD}",
                offset=len(raw) - len(raw) % CIFAR_RECORD, path=path,
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(records[:, 0] > 9)
        if bad.size:
            raise DataFormatError(f"etiqueta {records[bad[0], 0]} fuera de rango",
                                  offset=int(bad[0]) * CIFAR_RECORD, path=path)
        labels.append(records[:, 0].copy())
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images).astype(np.float64) / 255.0
    logger.info("CIFAR-10 cargado", files=len(images), count=int(pixels.shape[0]))
    return Dataset(pixels.astype(settings.activation_dtype), np.concatenate(labels), split, 10)


def load_cifar10_dir(directory: PathLike, split: str = "train") -> Dataset:
    """CIFAR-10 desde `directory` o su subdirectorio cifar-10-batches-bin."""
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    paths = [directory / name for name in names if (directory / name).exists()]
    if not paths:
        raise FileNotFoundError(f"no hay archivos CIFAR-10 ({split}) en {directory}")
    return load_cifar10(paths, split)


def gaussian_kernel(k: int, sigma: float) -> np.ndarray:
    """
    Kernel gaussiano k×k normalizado a suma 1; con sigma → 0 tiende a un delta.
    """
    if k < 1 or k % 2 == 0:
        raise ContractError(f"el tamaño del kernel debe ser impar, k={k}")
    if sigma <= 0:
        kernel = np.zeros((k, k))
        kernel[k // 2, k // 2] = 1.0
        return kernel
    offsets = np.arange(k) - k // 2
    yy, xx = np.meshgrid(offsets, offsets, indexing="ij")
    kernel = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def blur_valid(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolución en la región válida (correlación, como el resto de capas)."""
    k = kernel.shape[0]
    X = im2col(np.asarray(image, dtype=np.float64)[None, None], PatchSpec(k))
    out = matmul(X.data, kernel.reshape(-1, 1))
    return out.reshape(X.out_h, X.out_w)


def make_blur_problem(image: np.ndarray, k: int = 5, sigma_kernel: float = 1.0,
                      noise_sigma: float = 0.0, seed: int = 0) -> BlurProblem:
    """
    y = conv_válida(x, G_σ) + N(0, noise_sigma²), reproducible a partir de `seed`.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"se esperaba una imagen 2D, forma {image.shape}")
    kernel = gaussian_kernel(k, sigma_kernel)
    blurred = blur_valid(image, kernel)
    if noise_sigma > 0:
        blurred = blurred + seeded_rng(seed).normal(0.0, noise_sigma, size=blurred.shape)
    return BlurProblem(kernel, image, blurred, noise_sigma, seed)


def sample_patch_batch(dataset: Dataset, count: int, seed: int = 0,
                       replace: bool = False) -> np.ndarray:
    """
    Muestra uniforme de `count` imágenes con un generador sembrado.

    Raises:
        ContractError: count > N sin reemplazo
    """
    if not replace and count > len(dataset):
        raise ContractError(f"se pidieron {count} imágenes de {len(dataset)} sin reemplazo")
    indices = seeded_rng(seed).choice(len(dataset), size=count, replace=replace)
    return dataset.images[indices]


def _pink_noise(rng: np.random.Generator, shape: Tuple[int, ...], size: int) -> np.ndarray:
    """Campos aleatorios con espectro de amplitud 1/f, varianza unitaria."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    radius[0, 0] = 1.0 / size
    phases = rng.uniform(0.0, 2.0 * np.pi, size=shape + (size, size))
    fields = np.real(np.fft.ifft2(np.exp(1j * phases) / radius, axes=(-2, -1)))
    return fields / fields.std()


def synthetic_natural_images(count: int, channels: int = 3, size: int = 32,
                             seed: int = 0, leaves: int = 48, noise: float = 0.01) -> np.ndarray:
    """
    Imágenes "de hojas muertas": rectángulos opacos de tamaño con ley de
    potencia apilados sobre textura 1/f, con colores correlacionados entre
    canales, escaladas a [0, 1]. Tienen bordes nítidos y vecinos muy
    correlacionados, como las fotografías; sustituyen a estas en pruebas y
    en --synthetic.
    """
    rng = seeded_rng(seed)
    images = 0.15 * _pink_noise(rng, (count, channels), size)
    # Color = luminancia común + desviación pequeña por canal
    luminance = rng.uniform(-1.0, 1.0, size=(count, leaves, 1))
    tint = 0.2 * rng.standard_normal(size=(count, leaves, channels))
    colors = luminance + tint
    # Tamaños de 2 px a la imagen completa, de mayor a menor
    extents = np.sort(size * rng.uniform(0.06, 1.0, size=(count, leaves, 2)) ** 2, axis=1)[:, ::-1]
    corners = rng.uniform(-0.2, 1.0, size=(count, leaves, 2)) * size
    for n in range(count):
        for leaf in range(leaves):
            top, left = corners[n, leaf].astype(int)
            height, width = np.maximum(extents[n, leaf].astype(int), 2)
            rows = slice(max(top, 0), max(min(top + height, size), 0))
            cols = slice(max(left, 0), max(min(left + width, size), 0))
            images[n, :, rows, cols] = colors[n, leaf][:, None, None] + 0.15 * images[n, :, rows, cols]
    if noise:
        images = images + noise * rng.standard_normal(images.shape)

    lo = images.min(axis=(1, 2, 3), keepdims=True)
    hi = images.max(axis=(1, 2, 3), keepdims=True)
    images = (images - lo) / np.maximum(hi - lo, 1e-12)
    return images.astype(settings.activation_dtype)


def synthetic_classification(count: int, channels: int = 1, size: int = 28,
                             classes: int = 10, seed: int = 0, split: str = "train",
                             noise: float = 0.25) -> Dataset:
    """
    Dataset etiquetado sintético: un prototipo suave por clase más textura
    natural y ruido. Los prototipos dependen solo de `seed`; `split` cambia las
    muestras.
    """
    prototypes = synthetic_natural_images(classes, channels, size, seed)
    sample_seed = seed + (1 if split == "train" else 2) * 7919
    rng = seeded_rng(sample_seed)
    labels = rng.integers(0, classes, size=count).astype(np.uint8)
    texture = synthetic_natural_images(count, channels, size, sample_seed)
    images = (1.0 - noise) * prototypes[labels] + noise * texture
    return Dataset(np.clip(images, 0.0, 1.0).astype(settings.activation_dtype),
                   labels, split, classes)


def grayscale(image: np.ndarray) -> np.ndarray:
    """Promedio de canales para imágenes (H, W, 3), (C, H, W) o 2D."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[-1] == 3:
        return image.mean(axis=-1)
    if image.ndim == 3:
        return image.mean(axis=0)
    raise ShapeError(f"imagen con forma no soportada {image.shape}")


def iter_chunks(images: np.ndarray, chunk: int) -> Iterable[np.ndarray]:
    for start in range(0, images.shape[0], chunk):
        yield images[start:start + chunk]
