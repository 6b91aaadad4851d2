"""
Manifiestos de experimentos: todo lo necesario para reproducir una corrida.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from netdeconv.models.training import TrainConfig
from netdeconv.models.whitening import WhiteningConfig


DESK_SCALE_NOTE = (
    "escala de escritorio: subconjuntos reducidos y pocas épocas; "
    "no comparable con resultados a escala completa"
)


class ExperimentManifest(BaseModel):
    """
    Descripción serializable de un experimento.
    """
    name: str
    command: str
    seed: int = Field(default=0, ge=0)
    data_dir: Optional[Path] = None
    out_dir: Path = Path("./runs")
    config: TrainConfig = Field(default_factory=TrainConfig)
    whitening: WhiteningConfig = Field(default_factory=WhiteningConfig)
    # Parámetros específicos del subcomando (tamaños, grillas, banderas)
    options: Dict[str, Any] = Field(default_factory=dict)

    def option(self, key: str, default: Any = None) -> Any:
        return self.options.get(key, default)

    def for_seed(self, seed: int) -> "ExperimentManifest":
        """Copia con otra semilla y un directorio de salida propio."""
        return self.model_copy(update={
            "seed": seed,
            "out_dir": self.out_dir / f"seed_{seed}",
            "config": self.config.model_copy(update={"seed": seed}),
        })

    def write(self, path: Optional[Path] = None) -> Path:
        path = Path(path or self.out_dir / "manifest.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: Path) -> "ExperimentManifest":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class ExperimentResult:
    """Artefactos y resumen de un experimento terminado."""
    name: str
    out_dir: Path
    artifacts: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


class TensorEntry(BaseModel):
    """Tensor guardado en un archivo NDCV."""
    file: str
    shape: List[int]


class LayerEntry(BaseModel):
    """Capa de un checkpoint: tipo, configuración, tensores y metadatos."""
    kind: str
    config: Dict[str, Any] = Field(default_factory=dict)
    params: Dict[str, TensorEntry] = Field(default_factory=dict)
    buffers: Dict[str, TensorEntry] = Field(default_factory=dict)
    meta: Dict[str, Any] = Field(default_factory=dict)


class CheckpointManifest(BaseModel):
    """Manifiesto JSON de un checkpoint de red."""
    name: str
    format_version: int = 1
    layers: List[LayerEntry] = Field(default_factory=list)
