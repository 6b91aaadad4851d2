"""
Router de la línea de comandos: un subcomando por experimento más `replay`.
"""
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Annotated, Any, Dict, List, Optional

import structlog
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from netdeconv.config import settings
from netdeconv.errors import (
    ContractError,
    DataFormatError,
    DegenerateDataError,
    InsufficientDataError,
    NumericalFailureError,
    ShapeError,
)
from netdeconv.models.experiment import ExperimentManifest, ExperimentResult
from netdeconv.services.experiments import run_experiment


logger = structlog.get_logger(__name__)
console = Console()

app = typer.Typer(
    name="netdeconv",
    help="Experimentos de deconvolución de redes a escala de escritorio.",
    no_args_is_help=True,
    add_completion=False,
)

EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3

BAD_INPUT_ERRORS = (
    json.JSONDecodeError,
    DataFormatError,
    ContractError,
    ShapeError,
    FileNotFoundError,
    ValidationError,
    InsufficientDataError,
    DegenerateDataError,
)


# Opciones comunes a todos los subcomandos
DataDir = Annotated[Optional[Path], typer.Option("--data-dir", help="Directorio de datos")]
OutDir = Annotated[Optional[Path], typer.Option("--out", help="Directorio de salida")]
Seeds = Annotated[Optional[List[int]], typer.Option("--seed", help="Semilla (repetible)")]
ConfigFile = Annotated[Optional[Path], typer.Option("--config", help="Manifiesto JSON parcial")]
Uncentered = Annotated[bool, typer.Option("--uncentered", help="Covarianza sin centrar")]
Jobs = Annotated[int, typer.Option("--jobs", min=1, help="Procesos en paralelo por semilla")]
Synthetic = Annotated[bool, typer.Option("--synthetic", help="Datos sintéticos en lugar de archivos")]
SelfCheck = Annotated[bool, typer.Option("--self-check", help="Releer y validar los CSV emitidos")]

# Opciones de entrenamiento
Epochs = Annotated[Optional[int], typer.Option("--epochs", min=1)]
BatchSize = Annotated[Optional[int], typer.Option("--batch-size", min=1)]
LearningRate = Annotated[Optional[float], typer.Option("--lr", min=0.0)]
TrainCount = Annotated[Optional[int], typer.Option("--train-count", min=1)]
TestCount = Annotated[Optional[int], typer.Option("--test-count", min=1)]


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_manifest(command: str, data_dir: Optional[Path] = None, out: Optional[Path] = None,
                   seed: Optional[int] = None, config_path: Optional[Path] = None,
                   uncentered: bool = False, synthetic: bool = False,
                   self_check: bool = False, config: Optional[Dict[str, Any]] = None,
                   options: Optional[Dict[str, Any]] = None) -> ExperimentManifest:
    """
    Manifiesto resuelto: valores por defecto, luego el archivo --config y por
    último las banderas de la línea de comandos que se hayan indicado.
    """
    data: Dict[str, Any] = {
        "name": command,
        "command": command,
        "data_dir": str(settings.NETDECONV_DATA_DIR),
        "out_dir": str(settings.NETDECONV_OUT_DIR / command),
        "options": {},
    }
    if config_path is not None:
        data = _merge(data, json.loads(Path(config_path).read_text(encoding="utf-8")))
    data["command"] = command

    flags: Dict[str, Any] = {"options": {}}
    if data_dir is not None:
        flags["data_dir"] = str(data_dir)
    if out is not None:
        flags["out_dir"] = str(out)
    if seed is not None:
        flags["seed"] = seed
    if uncentered:
        flags["whitening"] = {"centered": False}
    if synthetic:
        flags["options"]["synthetic"] = True
    if self_check:
        flags["options"]["self_check"] = True
    flags["config"] = {key: value for key, value in (config or {}).items() if value is not None}
    flags["options"].update({key: value for key, value in (options or {}).items()
                             if value is not None})
    return ExperimentManifest.model_validate(_merge(data, flags))


def _configure_worker() -> None:
    from netdeconv.main import configure_logging

    configure_logging()


def execute(manifests: List[ExperimentManifest], jobs: int = 1) -> List[ExperimentResult]:
    """Ejecuta los manifiestos; con jobs > 1 en procesos independientes."""
    if jobs <= 1 or len(manifests) <= 1:
        return [run_experiment(manifest) for manifest in manifests]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_configure_worker) as pool:
        return list(pool.map(run_experiment, manifests))


def print_results(results: List[ExperimentResult]) -> None:
    for result in results:
        table = Table(title=f"{result.name} → {result.out_dir}")
        table.add_column("Métrica", style="cyan")
        table.add_column("Valor", justify="right")
        for key, value in result.summary.items():
            shown = f"{value:.6g}" if isinstance(value, float) else str(value)
            table.add_row(key, shown)
        table.add_row("artefactos", str(len(result.artifacts)))
        console.print(table)


def run_command(command: str, data_dir: Optional[Path], out: Optional[Path],
                seeds: Optional[List[int]], config_path: Optional[Path], uncentered: bool,
                jobs: int, synthetic: bool, self_check: bool,
                config: Optional[Dict[str, Any]] = None,
                options: Optional[Dict[str, Any]] = None) -> List[ExperimentResult]:
    """
    Construye los manifiestos (uno por semilla), los ejecuta y traduce los
    errores a códigos de salida: 2 entrada inválida, 3 fallo numérico.
    """
    try:
        seeds = list(seeds or [])
        base = build_manifest(command, data_dir, out, seeds[0] if len(seeds) == 1 else None,
                              config_path, uncentered, synthetic, self_check, config, options)
        manifests = [base.for_seed(seed) for seed in seeds] if len(seeds) > 1 else [base]
        results = execute(manifests, jobs)
    except NumericalFailureError as exc:
        logger.error("Fallo numérico", command=command, step=exc.step,
                     layer=exc.layer_index, error=str(exc))
        raise typer.Exit(code=EXIT_NUMERICAL)
    except BAD_INPUT_ERRORS as exc:
        logger.error("Entrada inválida", command=command, error=str(exc))
        raise typer.Exit(code=EXIT_BAD_INPUT)
    print_results(results)
    return results


@app.command("converge")
def converge(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
             config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
             synthetic: Synthetic = False, self_check: SelfCheck = False,
             ns_iters: Annotated[Optional[int], typer.Option("--ns-iters", min=1)] = None,
             train_count: TrainCount = None):
    """Convergencia en un paso de GD sobre datos blanqueados."""
    run_command("converge", data_dir, out, seed, config, uncentered, jobs, synthetic, self_check,
                options={"ns_iters": ns_iters, "train_count": train_count})


@app.command("regress")
def regress(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
            config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
            synthetic: Synthetic = False, self_check: SelfCheck = False,
            steps: Annotated[Optional[int], typer.Option("--steps", min=1)] = None,
            batch_size: BatchSize = None, train_count: TrainCount = None):
    """Regresión L2 y logística de una capa en Fashion-MNIST."""
    run_command("regress", data_dir, out, seed, config, uncentered, jobs, synthetic, self_check,
                config={"batch_size": batch_size},
                options={"steps": steps, "train_count": train_count})


@app.command("mlp")
def mlp(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
        config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
        synthetic: Synthetic = False, self_check: SelfCheck = False,
        epochs: Epochs = None, batch_size: BatchSize = None, lr: LearningRate = None,
        train_count: TrainCount = None, test_count: TestCount = None):
    """MLP 3×128 en MNIST: batch norm contra deconvolución."""
    run_command("mlp", data_dir, out, seed, config, uncentered, jobs, synthetic, self_check,
                config={"epochs": epochs, "batch_size": batch_size, "lr": lr},
                options={"train_count": train_count, "test_count": test_count})


@app.command("cnn")
def cnn(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
        config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
        synthetic: Synthetic = False, self_check: SelfCheck = False,
        epochs: Epochs = None, batch_size: BatchSize = None, lr: LearningRate = None,
        train_count: TrainCount = None, test_count: TestCount = None,
        widths: Annotated[Optional[List[int]], typer.Option("--width")] = None):
    """CNN estilo VGG en un subconjunto de CIFAR-10."""
    run_command("cnn", data_dir, out, seed, config, uncentered, jobs, synthetic, self_check,
                config={"epochs": epochs, "batch_size": batch_size, "lr": lr},
                options={"train_count": train_count, "test_count": test_count,
                         "widths": widths or None})


@app.command("kernel-viz")
def kernel_viz(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
               config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
               synthetic: Synthetic = False, self_check: SelfCheck = False,
               count: Annotated[Optional[int], typer.Option("--count", min=2)] = None,
               kernel: Annotated[Optional[int], typer.Option("--kernel", min=1)] = None):
    """Kernels de deconvolución 15×15 y reporte centro-periferia."""
    run_command("kernel-viz", data_dir, out, seed, config, uncentered, jobs, synthetic,
                self_check, options={"count": count, "kernel": kernel})


@app.command("ns-bench")
def ns_bench(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
             config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
             synthetic: Synthetic = False, self_check: SelfCheck = False,
             image: Annotated[Optional[Path], typer.Option("--image", help="PGM/PPM de prueba")] = None,
             iters: Annotated[Optional[int], typer.Option("--iters", min=100)] = None):
    """Estabilidad de Newton-Schulz acoplado contra clásico."""
    run_command("ns-bench", data_dir, out, seed, config, uncentered, jobs, synthetic, self_check,
                options={"image": str(image) if image else None, "iters": iters})


@app.command("sparsity")
def sparsity(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
             config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
             synthetic: Synthetic = False, self_check: SelfCheck = False,
             count: Annotated[Optional[int], typer.Option("--count", min=2)] = None):
    """Histogramas y curtosis antes y después de la deconvolución."""
    run_command("sparsity", data_dir, out, seed, config, uncentered, jobs, synthetic, self_check,
                options={"count": count})


@app.command("timing")
def timing(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
           config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
           synthetic: Synthetic = False, self_check: SelfCheck = False,
           batch: Annotated[Optional[int], typer.Option("--batch", min=1)] = None,
           rows: Annotated[Optional[List[int]], typer.Option("--row")] = None):
    """Desglose de tiempos por componente sobre la grilla de capas."""
    run_command("timing", data_dir, out, seed, config, uncentered, jobs, synthetic, self_check,
                options={"batch": batch, "rows": rows or None})


@app.command("blur")
def blur(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
         config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
         synthetic: Synthetic = False, self_check: SelfCheck = False,
         image: Annotated[Optional[Path], typer.Option("--image")] = None,
         kernel: Annotated[Optional[int], typer.Option("--kernel", min=1)] = None,
         noise_sigma: Annotated[Optional[float], typer.Option("--noise-sigma", min=0.0)] = None):
    """Estimación del kernel de desenfoque: GD crudo contra blanqueado."""
    run_command("blur", data_dir, out, seed, config, uncentered, jobs, synthetic, self_check,
                options={"image": str(image) if image else None, "kernel": kernel,
                         "noise_sigma": noise_sigma})


@app.command("batchsize")
def batchsize(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
              config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
              synthetic: Synthetic = False, self_check: SelfCheck = False,
              sizes: Annotated[Optional[List[int]], typer.Option("--size")] = None,
              train_count: TrainCount = None, test_count: TestCount = None):
    """Barrido de tamaños de lote con sus ajustes predefinidos."""
    run_command("batchsize", data_dir, out, seed, config, uncentered, jobs, synthetic,
                self_check, options={"batch_sizes": sizes or None, "train_count": train_count,
                                     "test_count": test_count})


@app.command("decay")
def decay(data_dir: DataDir = None, out: OutDir = None, seed: Seeds = None,
          config: ConfigFile = None, uncentered: Uncentered = False, jobs: Jobs = 1,
          synthetic: Synthetic = False, self_check: SelfCheck = False,
          model: Annotated[Optional[str], typer.Option("--model", help="mlp o cnn")] = None,
          epochs: Epochs = None, train_count: TrainCount = None, test_count: TestCount = None):
    """Comparación de weight decay 5e-3 contra 5e-4."""
    run_command("decay", data_dir, out, seed, config, uncentered, jobs, synthetic, self_check,
                config={"epochs": epochs},
                options={"model": model, "train_count": train_count, "test_count": test_count})


@app.command("replay")
def replay(manifest_path: Annotated[Path, typer.Argument(help="manifest.json de una corrida")],
           out: OutDir = None):
    """Vuelve a ejecutar una corrida a partir de su manifiesto."""
    try:
        manifest = ExperimentManifest.read(manifest_path)
        if out is not None:
            manifest = manifest.model_copy(update={"out_dir": out})
        results = execute([manifest])
    except NumericalFailureError as exc:
        logger.error("Fallo numérico", path=str(manifest_path), error=str(exc))
        raise typer.Exit(code=EXIT_NUMERICAL)
    except BAD_INPUT_ERRORS as exc:
        logger.error("Entrada inválida", path=str(manifest_path), error=str(exc))
        raise typer.Exit(code=EXIT_BAD_INPUT)
    print_results(results)
