"""
Persistencia: contenedor binario NDCV, checkpoints de redes e imágenes PGM/PPM.
"""
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np
import structlog

from netdeconv.errors import DataFormatError
from netdeconv.models.experiment import CheckpointManifest, LayerEntry, TensorEntry
from netdeconv.services.layers import Network, build_layer


logger = structlog.get_logger(__name__)

NDCV_MAGIC = b"NDCV"
NDCV_VERSION = 1
_NDCV_HEADER = struct.Struct("<4sIII")

PathLike = Union[str, Path]


def write_ndcv(path: PathLike, matrix: np.ndarray) -> Path:
    """
    Escribe una matriz como float64 little-endian con cabecera de 16 bytes
    (magic "NDCV", versión, filas, columnas). Los vectores se guardan como 1×n
    y los tensores de más dimensiones como (shape[0], resto).
    """
    path = Path(path)
    data = np.asarray(matrix, dtype="<f8")
    if data.ndim == 0:
        data = data.reshape(1, 1)
    elif data.ndim == 1:
        data = data.reshape(1, -1)
    elif data.ndim > 2:
        data = data.reshape(data.shape[0], -1)
    rows, cols = data.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(_NDCV_HEADER.pack(NDCV_MAGIC, NDCV_VERSION, rows, cols))
        handle.write(np.ascontiguousarray(data).tobytes())
    return path


def read_ndcv(path: PathLike) -> np.ndarray:
    """
    Lee una matriz NDCV.

    Raises:
        DataFormatError: Magic, versión o tamaño de carga inválidos
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _NDCV_HEADER.size:
        raise DataFormatError("cabecera NDCV truncada", offset=len(raw), path=path)
    magic, version, rows, cols = _NDCV_HEADER.unpack_from(raw)
    if magic != NDCV_MAGIC:
        raise DataFormatError(f"magic NDCV inválido {magic!r}", offset=0, path=path)
    if version != NDCV_VERSION:
        raise DataFormatError(f"versión NDCV no soportada {version}", offset=4, path=path)
    expected = rows * cols * 8
    payload = raw[_NDCV_HEADER.size:]
    if len(payload) != expected:
        raise DataFormatError(
            f"carga NDCV de {len(payload)} bytes, se esperaban {expected}",
            offset=_NDCV_HEADER.size + min(len(payload), expected), path=path,
        )
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def _save_tensors(directory: Path, prefix: str, tensors: Dict[str, np.ndarray]) -> Dict[str, TensorEntry]:
    entries = {}
    for name, value in tensors.items():
        file_name = f"{prefix}.{name}.ndcv"
        write_ndcv(directory / file_name, value)
        entries[name] = TensorEntry(file=file_name, shape=list(np.shape(value)))
    return entries


def _load_tensors(directory: Path, entries: Dict[str, TensorEntry]) -> Dict[str, np.ndarray]:
    return {
        name: read_ndcv(directory / entry.file).reshape(entry.shape)
        for name, entry in entries.items()
    }


def save_network(network: Network, directory: PathLike) -> Path:
    """
    Guarda la red: un archivo NDCV por tensor y manifest.json con tipos,
    configuraciones y estado de blanqueo.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = CheckpointManifest(name=network.name)
    for layer in network.layers:
        prefix = f"{layer.index:03d}_{layer.kind}"
        manifest.layers.append(LayerEntry(
            kind=layer.kind,
            config=layer.config(),
            params=_save_tensors(directory, prefix, layer.params),
            buffers=_save_tensors(directory, prefix, layer.buffers()),
            meta=layer.buffer_meta(),
        ))
    path = directory / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Checkpoint guardado", path=str(path), layers=len(network))
    return path


def load_network(directory: PathLike) -> Network:
    """Reconstruye una red guardada con save_network."""
    directory = Path(directory)
    manifest = CheckpointManifest.model_validate_json(
        (directory / "manifest.json").read_text(encoding="utf-8")
    )
    layers = []
    for entry in manifest.layers:
        layer = build_layer(entry.kind, entry.config)
        params = _load_tensors(directory, entry.params)
        for name, value in params.items():
            layer.params[name] = value.astype(layer.params[name].dtype)
        layer.zero_grads()
        layer.load_buffers(_load_tensors(directory, entry.buffers))
        layer.load_buffer_meta(entry.meta)
        layers.append(layer)
    return Network(layers, name=manifest.name)


def normalize_to_u8(image: np.ndarray) -> np.ndarray:
    """Normalización min-max a 0..255."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.rint((image - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: PathLike, image: np.ndarray, normalize: bool = True) -> Path:
    """Imagen en gris como PGM binario (P5, 8 bits)."""
    path = Path(path)
    pixels = normalize_to_u8(image) if normalize else np.asarray(image, dtype=np.uint8)
    if pixels.ndim != 2:
        raise DataFormatError(f"PGM requiere una imagen 2D, forma {pixels.shape}", path=path)
    height, width = pixels.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        handle.write(pixels.tobytes())
    return path


def read_pnm(path: PathLike) -> np.ndarray:
    """
    Lee PGM (P5) o PPM (P6) de 8 bits.

    Returns:
        (H, W) para P5 o (H, W, 3) para P6, uint8
    """
    path = Path(path)
    raw = path.read_bytes()
    tokens = []
    offset = 0
    while len(tokens) < 4:
        while offset < len(raw) and raw[offset:offset + 1].isspace():
            offset += 1
        if offset >= len(raw):
            raise DataFormatError("cabecera PNM truncada", offset=offset, path=path)
        if raw[offset:offset + 1] == b"#":
            while offset < len(raw) and raw[offset:offset + 1] not in (b"\n", b"\r"):
                offset += 1
            continue
        start = offset
        while offset < len(raw) and not raw[offset:offset + 1].isspace():
            offset += 1
        tokens.append(raw[start:offset])
    offset += 1

    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataFormatError(f"magic PNM no soportado {magic!r}", offset=0, path=path)
    try:
        width, height, maxval = (int(token) for token in tokens[1:4])
    except ValueError as exc:
        raise DataFormatError("cabecera PNM no numérica", offset=offset, path=path) from exc
    if maxval != 255:
        raise DataFormatError(f"solo se admiten 8 bits, maxval={maxval}", offset=offset, path=path)
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    payload = raw[offset:offset + expected]
    if len(payload) != expected:
        raise DataFormatError("carga PNM truncada", offset=offset + len(payload), path=path)
    pixels = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy()
