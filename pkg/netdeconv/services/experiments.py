"""
Ejecutores de los experimentos a escala de escritorio. Cada uno recibe un
ExperimentManifest, escribe sus CSV (y PGM) en manifest.out_dir y devuelve un
ExperimentResult con los artefactos y un resumen.
"""
import fnmatch
import math
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import structlog

from netdeconv.config import settings
from netdeconv.errors import DataFormatError, InsufficientDataError, NumericalFailureError
from netdeconv.models.data import Dataset
from netdeconv.models.experiment import DESK_SCALE_NOTE, ExperimentManifest, ExperimentResult
from netdeconv.models.training import BASE_COLUMNS, RunRecord, TrainConfig
from netdeconv.models.whitening import PatchSpec, WhiteningConfig
from netdeconv.services.data_io import (
    grayscale,
    iter_chunks,
    load_cifar10_dir,
    load_mnist_dir,
    make_blur_problem,
    sample_patch_batch,
    synthetic_classification,
    synthetic_natural_images,
)
from netdeconv.services.layers import Network
from netdeconv.services.linalg import matmul, seeded_rng, sym_eig
from netdeconv.services.networks import build_mlp, build_regressor, build_vgg_small
from netdeconv.services.patches import im2col, partition_groups
from netdeconv.services.recording import CsvRecordWriter, LogObserver
from netdeconv.services.storage import read_pnm, write_pgm
from netdeconv.services.trainer import (
    BATCH_SIZE_PRESETS,
    Trainer,
    closed_form_l2,
    l2_objective,
    one_step_convergence_check,
)
from netdeconv.services.whitening import (
    CovarianceAccumulator,
    center_surround_report,
    coupled_newton_schulz,
    coupled_newton_schulz_trace,
    covariance,
    extract_deconv_kernel,
    inverse_sqrt_oracle,
    sparsity_stats,
    vanilla_newton_schulz,
    whitened_covariance_stats,
)


logger = structlog.get_logger(__name__)

Runner = Callable[[ExperimentManifest], ExperimentResult]

# Columnas mínimas de cada artefacto CSV, por patrón de nombre
SCHEMAS: Dict[str, List[str]] = {
    "regress_curves.csv": ["run", "variant", "loss_fn", "lr", "step", "loss", "loss_smoothed"],
    "regress_summary.csv": ["run", "variant", "loss_fn", "lr", "final_loss", "loss_at_5",
                            "optimal_loss", "gap_at_5", "diverged"],
    "converge_summary.csv": ["dataset", "method", "loss_one_step", "loss_optimal",
                             "relative_gap", "ridge_applied", "diverged"],
    "*_summary_runs.csv": ["run", "variant", "seed", "epoch", "eval_loss", "eval_acc"],
    "cnn_whitening.csv": ["layer", "group", "offdiag_mean_abs", "diag_min", "diag_max",
                          "identity_like", "rank_limited"],
    "kernels.csv": ["channel_out", "channel_in", "y", "x", "value"],
    "center_surround.csv": ["channel", "center", "ring_mean", "opposed"],
    "ns_residuals.csv": ["step", "coupled", "vanilla"],
    "ns_summary.csv": ["coupled_min", "coupled_final", "coupled_stable", "vanilla_min",
                       "vanilla_peak_before_100", "vanilla_exploded",
                       "coupled_oracle_error_20", "vanilla_oracle_error_20"],
    "sparsity_hist.csv": ["bin_left", "bin_right", "density_before", "density_after",
                          "log_density_before", "log_density_after"],
    "sparsity_summary.csv": ["kurtosis_before", "kurtosis_after", "increased"],
    "timing.csv": ["H", "W", "ch_in", "ch_out", "groups", "k", "stride", "batch",
                   "im2col_s", "cov_s", "inv_s", "conv_s", "overhead_ratio"],
    "blur_curves.csv": ["method", "iteration", "rel_error", "loss"],
    "blur_summary.csv": ["method", "lr", "iterations_to_tol", "final_rel_error", "converged"],
    "batchsize_summary.csv": ["batch_size", "lr", "eps", "ns_iters", "steps", "eval_loss",
                              "eval_acc", "reported_acc"],
    "run_*.csv": BASE_COLUMNS,
}

# Filas de la tabla de tiempos: (H, W, ch_in, ch_out, grupos, k, stride de muestreo)
TIMING_GRID: Tuple[Tuple[int, int, int, int, int, int, int], ...] = (
    (256, 256, 3, 64, 1, 3, 3),
    (128, 128, 64, 128, 1, 3, 3),
    (64, 64, 128, 256, 2, 3, 3),
    (32, 32, 256, 512, 4, 3, 3),
    (16, 16, 512, 512, 8, 3, 3),
    (128, 128, 64, 128, 64, 3, 3),
    (64, 64, 128, 256, 128, 3, 3),
    (32, 32, 256, 512, 256, 3, 3),
    (16, 16, 512, 512, 512, 3, 3),
    (128, 128, 64, 128, 32, 3, 3),
    (64, 64, 128, 256, 32, 3, 3),
    (32, 32, 256, 512, 32, 3, 3),
    (16, 16, 512, 512, 32, 3, 3),
    (256, 256, 3, 64, 1, 3, 5),
    (128, 128, 64, 128, 1, 3, 5),
    (256, 256, 3, 64, 1, 7, 3),
    (256, 256, 3, 64, 1, 7, 5),
    (256, 256, 3, 64, 1, 7, 7),
    (256, 256, 3, 64, 1, 11, 3),
    (256, 256, 3, 64, 1, 11, 5),
    (256, 256, 3, 64, 1, 11, 7),
    (256, 256, 3, 64, 1, 11, 11),
)


def header_lines(manifest: ExperimentManifest, *extra: str) -> List[str]:
    """Cabecera '# ...' de cada CSV; sin marcas de tiempo para que sea reproducible."""
    return [f"netdeconv {manifest.command} name={manifest.name} seed={manifest.seed}",
            DESK_SCALE_NOTE, *extra]


def write_frame(frame: pd.DataFrame, path: Path, header: List[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        for line in header:
            handle.write(f"# {line}\n")
        frame.to_csv(handle, index=False, float_format="%.10g")
    return path


def read_artifact(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def schema_for(path: Path) -> Optional[List[str]]:
    for pattern, columns in SCHEMAS.items():
        if fnmatch.fnmatch(Path(path).name, pattern):
            return columns
    return None


def self_check(result: ExperimentResult) -> Dict[str, int]:
    """
    Relee cada CSV emitido y verifica su esquema.

    Returns:
        Filas por artefacto

    Raises:
        DataFormatError: Si falta una columna o el CSV está vacío
    """
    counts = {}
    for path in result.artifacts:
        if path.suffix != ".csv":
            continue
        frame = read_artifact(path)
        expected = schema_for(path)
        if expected is None:
            raise DataFormatError("artefacto CSV sin esquema registrado", path=path)
        missing = [column for column in expected if column not in frame.columns]
        if missing:
            raise DataFormatError(f"faltan columnas {missing}", path=path)
        if frame.empty:
            raise DataFormatError("CSV sin filas", path=path)
        counts[path.name] = len(frame)
    logger.info("Autoverificación completada", name=result.name, files=len(counts))
    return counts


# Fuentes de datos

def _data_dir(manifest: ExperimentManifest) -> Path:
    return Path(manifest.data_dir or settings.NETDECONV_DATA_DIR)


def _synthetic(manifest: ExperimentManifest) -> bool:
    return bool(manifest.option("synthetic", False))


def _mnist(manifest: ExperimentManifest) -> Tuple[Dataset, Dataset]:
    """(train, test) de MNIST o Fashion-MNIST, reducidos a escala de escritorio."""
    train_count = manifest.option("train_count", 10000)
    test_count = manifest.option("test_count", 2000)
    if _synthetic(manifest):
        train = synthetic_classification(train_count, 1, 28, 10, manifest.seed, "train")
        test = synthetic_classification(test_count, 1, 28, 10, manifest.seed, "test")
        return train, test
    directory = _data_dir(manifest)
    train = load_mnist_dir(directory, "train").subset(train_count, manifest.seed)
    test = load_mnist_dir(directory, "test").subset(test_count, manifest.seed)
    return train, test


def _cifar(manifest: ExperimentManifest) -> Tuple[Dataset, Dataset]:
    train_count = manifest.option("train_count", 10000)
    test_count = manifest.option("test_count", 2000)
    if _synthetic(manifest):
        train = synthetic_classification(train_count, 3, 32, 10, manifest.seed, "train")
        test = synthetic_classification(test_count, 3, 32, 10, manifest.seed, "test")
        return train, test
    directory = _data_dir(manifest)
    train = load_cifar10_dir(directory, "train").subset(train_count, manifest.seed)
    test = load_cifar10_dir(directory, "test").subset(test_count, manifest.seed)
    return train, test


def _natural_images(manifest: ExperimentManifest, count: int) -> np.ndarray:
    """`count` imágenes en color muestreadas de CIFAR-10 o sintéticas."""
    if _synthetic(manifest):
        size = manifest.option("image_size", 32)
        return synthetic_natural_images(count, 3, size, manifest.seed)
    dataset = load_cifar10_dir(_data_dir(manifest), "train")
    if count > len(dataset):
        raise InsufficientDataError(f"se pidieron {count} imágenes, hay {len(dataset)}")
    return sample_patch_batch(dataset, count, manifest.seed)


def _test_image(manifest: ExperimentManifest) -> np.ndarray:
    """Imagen de prueba (C, H, W) en [0, 1]: --image PNM o una sintética."""
    path = manifest.option("image")
    if path:
        pixels = read_pnm(path).astype(np.float64) / 255.0
        return pixels[None] if pixels.ndim == 2 else pixels.transpose(2, 0, 1)
    size = manifest.option("image_size", 64)
    return synthetic_natural_images(1, 3, size, manifest.seed)[0].astype(np.float64)


def _train_config(manifest: ExperimentManifest, **updates) -> TrainConfig:
    return manifest.config.model_copy(update={"seed": manifest.seed, **updates})


def _train_run(manifest: ExperimentManifest, network: Network, train: Dataset,
               test: Optional[Dataset], config: TrainConfig, run: str,
               artifacts: List[Path]) -> RunRecord:
    """Entrena escribiendo el registro en run_<run>.csv paso a paso."""
    path = Path(manifest.out_dir) / f"run_{run}.csv"
    trainer = Trainer(network, config, name=run)
    with CsvRecordWriter(path, header_lines(manifest, f"run={run}")) as writer:
        trainer.register_observer(writer)
        trainer.register_observer(LogObserver(run=run))
        record = trainer.fit(train, test)
    artifacts.append(path)
    return record


def _epoch_rows(record: RunRecord, run: str, variant: str, seed: int) -> List[dict]:
    return [{"run": run, "variant": variant, "seed": seed, "epoch": row.epoch,
             "eval_loss": row.loss, "eval_acc": row.acc}
            for row in record.split_rows("eval")]


# Experimentos

def run_converge(manifest: ExperimentManifest) -> ExperimentResult:
    """
    Convergencia en un paso: regresión sintética 1000×20 y, si hay datos,
    Fashion-MNIST con objetivos binarios.
    """
    out = Path(manifest.out_dir)
    rng = seeded_rng(manifest.seed)
    rows_n, features = manifest.option("rows", 1000), manifest.option("features", 20)
    mixing = rng.standard_normal((features, features))
    X = matmul(rng.standard_normal((rows_n, features)), mixing)
    y = matmul(X, rng.standard_normal((features, 1))) + 0.1 * rng.standard_normal((rows_n, 1))

    rows = []

    def _report(dataset: str, X: np.ndarray, y: np.ndarray, **kwargs) -> None:
        report = one_step_convergence_check(X, y, **kwargs)
        rows.append({"dataset": dataset, **report.as_dict()})

    _report("synthetic", X, y, whiten=True, method="oracle")
    _report("synthetic", X, y, whiten=True, method="newton_schulz",
            eps=manifest.whitening.eps, ns_iters=manifest.option("ns_iters", 15))
    _report("synthetic", X, y, whiten=False)

    fashion = None
    if not _synthetic(manifest):
        try:
            fashion, _ = _mnist(manifest)
        except FileNotFoundError:
            logger.warning("Fashion-MNIST no disponible, solo datos sintéticos",
                           data_dir=str(_data_dir(manifest)))
    if fashion is not None:
        Xf, yf = fashion.flat_images().astype(np.float64), fashion.one_hot()
        _report("fashion_mnist", Xf, yf, whiten=True, method="newton_schulz",
                eps=manifest.whitening.eps, ns_iters=manifest.option("ns_iters", 15))
        _report("fashion_mnist", Xf, yf, whiten=True, method="oracle")
        _report("fashion_mnist", Xf, yf, whiten=False)

    frame = pd.DataFrame(rows)
    path = write_frame(frame, out / "converge_summary.csv", header_lines(manifest))
    summary = {f"{r['dataset']}.{r['method']}.relative_gap": r["relative_gap"] for r in rows}
    return ExperimentResult(manifest.name, out, [path], summary)


def _optimal_l2(train: Dataset) -> float:
    """Pérdida L2 óptima del modelo lineal con sesgo sobre todo el conjunto."""
    X = train.flat_images().astype(np.float64)
    X1 = np.hstack([X, np.ones((X.shape[0], 1))])
    Y = train.one_hot()
    w = closed_form_l2(X1, Y, rcond=1e-10)
    return l2_objective(X1, w, Y)


def run_regress(manifest: ExperimentManifest) -> ExperimentResult:
    """
    Regresión de una capa (L2 y logística) en Fashion-MNIST: SGD plano con
    varias tasas, batch norm y deconvolución con tasa 1.0.
    """
    out = Path(manifest.out_dir)
    train, _ = _mnist(manifest)
    steps = manifest.option("steps", 100)
    batch_size = manifest.config.batch_size
    per_epoch = max(1, len(train) // batch_size)
    epochs = math.ceil(steps / per_epoch)
    features = int(np.prod(train.image_shape))

    runs = [("plain", lr) for lr in manifest.option("plain_lrs", [0.02, 0.05, 0.1])]
    runs += [("plain", 1.0), ("batchnorm", manifest.option("bn_lr", 0.1)),
             ("deconv", manifest.option("deconv_lr", 1.0))]
    losses = manifest.option("losses", ["l2", "logistic"])
    optimal = _optimal_l2(train) if "l2" in losses else float("nan")

    curves, summary_rows, artifacts = [], [], []
    for loss_fn in losses:
        for variant, lr in runs:
            run = f"{loss_fn}_{variant}_lr{lr:g}"
            network = build_regressor(features, train.num_classes, variant,
                                      manifest.whitening, manifest.seed)
            config = _train_config(manifest, lr=lr, loss=loss_fn, weight_decay=0.0,
                                   epochs=epochs, max_steps_per_epoch=min(per_epoch, steps))
            diverged = False
            try:
                record = _train_run(manifest, network, train, None, config, run, artifacts)
            except NumericalFailureError as exc:
                logger.warning("Corrida divergente", run=run, error=str(exc))
                diverged = True
                record = RunRecord(run)
            losses_seen = [row.loss for row in record.split_rows("train")][:steps]
            smoothed = np.minimum.accumulate(losses_seen) if losses_seen else []
            for step, (value, smooth) in enumerate(zip(losses_seen, smoothed), start=1):
                curves.append({"run": run, "variant": variant, "loss_fn": loss_fn, "lr": lr,
                               "step": step, "loss": value, "loss_smoothed": smooth})
            final = losses_seen[-1] if losses_seen else float("nan")
            diverged = diverged or not math.isfinite(final) or (
                bool(losses_seen) and final > losses_seen[0])
            at_5 = losses_seen[4] if len(losses_seen) >= 5 else float("nan")
            reference = optimal if loss_fn == "l2" else float("nan")
            summary_rows.append({
                "run": run, "variant": variant, "loss_fn": loss_fn, "lr": lr,
                "final_loss": final, "loss_at_5": at_5, "optimal_loss": reference,
                "gap_at_5": (at_5 - reference) / reference if reference > 0 else float("nan"),
                "diverged": diverged,
            })

    header = header_lines(manifest, f"optimal_l2={optimal:.10g}")
    artifacts.append(write_frame(pd.DataFrame(curves), out / "regress_curves.csv", header))
    artifacts.append(write_frame(pd.DataFrame(summary_rows), out / "regress_summary.csv", header))
    summary = {row["run"]: ("divergente" if row["diverged"] else row["final_loss"])
               for row in summary_rows}
    return ExperimentResult(manifest.name, out, artifacts, summary)


def _compare_variants(manifest: ExperimentManifest, prefix: str,
                      build: Callable[[str], Network],
                      data: Tuple[Dataset, Dataset],
                      variants: Tuple[str, ...] = ("batchnorm", "deconv"),
                      decays: Optional[List[float]] = None) -> ExperimentResult:
    out = Path(manifest.out_dir)
    train, test = data
    artifacts: List[Path] = []
    rows: List[dict] = []
    for variant in variants:
        for decay in decays or [manifest.config.weight_decay]:
            run = f"{prefix}_{variant}" + (f"_wd{decay:g}" if decays else "")
            config = _train_config(manifest, weight_decay=decay)
            record = _train_run(manifest, build(variant), train, test, config, run, artifacts)
            rows.extend(dict(row, weight_decay=decay)
                        for row in _epoch_rows(record, run, variant, manifest.seed))
    path = write_frame(pd.DataFrame(rows), out / f"{prefix}_summary_runs.csv",
                       header_lines(manifest))
    artifacts.append(path)
    summary = {f"{row['run']}.epoch{row['epoch']}.acc": row["eval_acc"] for row in rows}
    return ExperimentResult(manifest.name, out, artifacts, summary)


def run_mlp(manifest: ExperimentManifest) -> ExperimentResult:
    """MLP de 3×128 sigmoides en MNIST: batch norm contra deconvolución."""
    data = _mnist(manifest)
    features = int(np.prod(data[0].image_shape))

    def build(variant: str) -> Network:
        return build_mlp(features, manifest.option("hidden", 128), manifest.option("depth", 3),
                         data[0].num_classes, variant, manifest.whitening, manifest.seed,
                         manifest.config.whitening_overrides)

    return _compare_variants(manifest, "mlp", build, data)


def whitening_identity_report(network: Network, images: np.ndarray) -> pd.DataFrame:
    """
    Covarianza de las columnas blanqueadas de cada grupo de cada capa de
    deconvolución tras un forward de entrenamiento.
    """
    network.train()
    network.forward(images)
    rows = []
    for layer in network.deconv_layers():
        whitened = layer.whitened_columns()
        for group, cols in enumerate(layer.spec.group_slices()):
            stats = whitened_covariance_stats(whitened[:, cols])
            rows.append({"layer": layer.index, "group": group,
                         "offdiag_mean_abs": stats.offdiag_mean_abs,
                         "diag_min": stats.diag_min, "diag_max": stats.diag_max,
                         "identity_like": stats.is_identity_like(),
                         # Menos filas que columnas: la covarianza no puede ser I
                         "rank_limited": whitened.shape[0] <= cols.stop - cols.start})
    return pd.DataFrame(rows)


def run_cnn(manifest: ExperimentManifest) -> ExperimentResult:
    """
    CNN pequeña estilo VGG en un subconjunto de CIFAR-10, batch norm contra
    deconvolución, más la verificación de blanqueo del primer lote.
    """
    data = _cifar(manifest)
    widths = tuple(manifest.option("widths", [64, 128, 256, 256]))
    size = data[0].image_shape[-1]

    def build(variant: str, whitening: Optional[WhiteningConfig] = None) -> Network:
        return build_vgg_small(data[0].image_shape[0], data[0].num_classes, size, widths,
                               variant=variant, whitening=whitening or manifest.whitening,
                               seed=manifest.seed,
                               overrides=manifest.config.whitening_overrides)

    result = _compare_variants(manifest, "cnn", build, data)

    diagnostic = manifest.whitening.model_copy(update={"ns_iters": 15, "sample_stride": 1})
    first_batch = data[0].images[:manifest.config.batch_size]
    frame = whitening_identity_report(build("deconv", diagnostic), first_batch)
    result.artifacts.append(write_frame(frame, result.out_dir / "cnn_whitening.csv",
                                        header_lines(manifest, "ns_iters=15")))
    full_rank = frame[~frame["rank_limited"]]
    result.summary["whitening_identity_like"] = bool(full_rank["identity_like"].all())
    return result


def patch_covariance(images: np.ndarray, spec: PatchSpec, centered: bool = True,
                     chunk: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Covarianza de parches acumulada por bloques de imágenes."""
    accumulator = CovarianceAccumulator(spec.columns)
    for batch in iter_chunks(images, chunk):
        accumulator.update(np.asarray(im2col(batch, spec).data, dtype=np.float64))
    return accumulator.finalize(centered)


def run_kernel_viz(manifest: ExperimentManifest) -> ExperimentResult:
    """
    Kernels de deconvolución 15×15 de 3 canales estimados sobre 1024 imágenes;
    PGM por canal, CSV crudo y reporte centro-periferia.
    """
    out = Path(manifest.out_dir)
    count, k = manifest.option("count", 1024), manifest.option("kernel", 15)
    images = _natural_images(manifest, count)
    channels = images.shape[1]
    spec = PatchSpec(k, 1, 0, channels, block_size=channels)
    _, cov = patch_covariance(images, spec, manifest.whitening.centered, chunk=16)
    D = inverse_sqrt_oracle(cov, manifest.whitening.eps)
    kernels = extract_deconv_kernel(D, k, channels)

    artifacts = []
    for c in range(channels):
        artifacts.append(write_pgm(out / f"kernel_c{c}.pgm", kernels[c, c]))
    co, ci, yy, xx = np.indices(kernels.shape)
    raw = pd.DataFrame({"channel_out": co.ravel(), "channel_in": ci.ravel(),
                        "y": yy.ravel(), "x": xx.ravel(), "value": kernels.ravel()})
    header = header_lines(manifest, f"images={count} k={k}")
    artifacts.append(write_frame(raw, out / "kernels.csv", header))
    report = center_surround_report(kernels)
    frame = pd.DataFrame([{"channel": r.channel, "center": r.center,
                           "ring_mean": r.ring_mean, "opposed": r.opposed} for r in report])
    artifacts.append(write_frame(frame, out / "center_surround.csv", header))
    summary = {f"channel{r.channel}.opposed": r.opposed for r in report}
    return ExperimentResult(manifest.name, out, artifacts, summary)


def _relative_error(estimate: np.ndarray, reference: np.ndarray) -> float:
    return float(np.linalg.norm(estimate - reference) / np.linalg.norm(reference))


def ns_stability(cov: np.ndarray, eps: float, iters: int = 1000) -> Tuple[pd.DataFrame, dict]:
    """
    Residuos por paso de Newton-Schulz acoplado y clásico, y su resumen.

    El acoplado es estable si tras su mínimo no supera 2× ese mínimo (más una
    holgura absoluta de 1e-12); el clásico explota si supera 10³× su mínimo
    antes del paso 100.
    """
    _, coupled = coupled_newton_schulz_trace(cov, eps, iters)
    _, vanilla = vanilla_newton_schulz(cov, eps, iters)
    padded = vanilla + [float("inf")] * (len(coupled) - len(vanilla))
    frame = pd.DataFrame({"step": np.arange(1, len(coupled) + 1),
                          "coupled": coupled, "vanilla": padded})

    best = int(np.argmin(coupled))
    coupled_min = coupled[best]
    early = np.asarray(vanilla[:99])
    vanilla_min = float(np.min(early))
    after_min = early[int(np.argmin(early)):]
    vanilla_peak = float(np.max(after_min))
    oracle = inverse_sqrt_oracle(cov, eps)
    vanilla_20, _ = vanilla_newton_schulz(cov, eps, 20)
    summary = {
        "coupled_min": coupled_min,
        "coupled_final": coupled[-1],
        "coupled_stable": bool(max(coupled[best:]) <= 2.0 * coupled_min + 1e-12),
        "vanilla_min": vanilla_min,
        "vanilla_peak_before_100": vanilla_peak,
        "vanilla_exploded": bool(vanilla_peak > 1e3 * vanilla_min),
        "coupled_oracle_error_20": _relative_error(coupled_newton_schulz(cov, eps, 20), oracle),
        "vanilla_oracle_error_20": _relative_error(vanilla_20, oracle),
    }
    return frame, summary


def run_ns_bench(manifest: ExperimentManifest) -> ExperimentResult:
    """
    Newton-Schulz acoplado contra clásico sobre la covarianza 27×27 de parches
    3×3 de 3 canales de una imagen de prueba, 1000 iteraciones.
    """
    out = Path(manifest.out_dir)
    image = _test_image(manifest)
    spec = PatchSpec(3, 1, 0, image.shape[0], block_size=image.shape[0])
    _, cov = covariance(im2col(image[None], spec), 1, manifest.whitening.centered)
    frame, summary = ns_stability(cov, manifest.whitening.eps, manifest.option("iters", 1000))
    header = header_lines(manifest, f"eps={manifest.whitening.eps:g} size={cov.shape[0]}")
    artifacts = [write_frame(frame, out / "ns_residuals.csv", header),
                 write_frame(pd.DataFrame([summary]), out / "ns_summary.csv", header)]
    return ExperimentResult(manifest.name, out, artifacts, summary)


def deconvolve_images(images: np.ndarray, k: int = 3, eps: float = 1e-5,
                      centered: bool = True, chunk: int = 64) -> np.ndarray:
    """
    Imágenes deconvolucionadas: columna del píxel central de cada canal de
    (X − μ)·D con D = (Cov + εI)^(-1/2) de parches k×k con relleno.
    Devuelve (N·H·W, C).
    """
    channels = images.shape[1]
    spec = PatchSpec.same(k, channels, block_size=channels)
    mu, cov = patch_covariance(images, spec, centered, chunk)
    D = inverse_sqrt_oracle(cov, eps)
    if not centered:
        mu = np.zeros_like(mu)
    center = (k // 2) * k + k // 2
    centers = [c * k * k + center for c in range(channels)]
    parts = [matmul(np.asarray(im2col(batch, spec).data, dtype=np.float64) - mu, D[:, centers])
             for batch in iter_chunks(images, chunk)]
    return np.concatenate(parts)


def run_sparsity(manifest: ExperimentManifest) -> ExperimentResult:
    """Histogramas y curtosis de los píxeles antes y después de la deconvolución."""
    out = Path(manifest.out_dir)
    images = _natural_images(manifest, manifest.option("count", 1024))
    after = deconvolve_images(images, manifest.option("kernel", 3), manifest.whitening.eps,
                              manifest.whitening.centered)
    before = np.asarray(images, dtype=np.float64).transpose(0, 2, 3, 1).reshape(-1, images.shape[1])
    stats = sparsity_stats(before, after, manifest.option("bins", 64))
    header = header_lines(manifest, f"images={images.shape[0]}")
    summary = {"kurtosis_before": stats.kurtosis_before, "kurtosis_after": stats.kurtosis_after,
               "increased": bool(stats.kurtosis_after > stats.kurtosis_before)}
    artifacts = [write_frame(stats.to_dataframe(), out / "sparsity_hist.csv", header),
                 write_frame(pd.DataFrame([summary]), out / "sparsity_summary.csv", header)]
    return ExperimentResult(manifest.name, out, artifacts, summary)


def time_components(height: int, width: int, ch_in: int, ch_out: int, groups: int, k: int,
                    stride: int, batch: int, ns_iters: int = 5, seed: int = 0) -> dict:
    """
    Tiempos de pared de una capa de deconvolución por componente: im2col,
    covarianzas por grupo con muestreo `stride`, raíces inversas y el GEMM
    de la convolución.
    """
    rng = seeded_rng(seed)
    x = rng.standard_normal((batch, ch_in, height, width)).astype(np.float32)
    weights = rng.standard_normal((ch_out, ch_in * k * k)).astype(np.float32)
    spec = PatchSpec.same(k, ch_in, block_size=max(1, ch_in // groups))

    started = time.perf_counter()
    X = im2col(x, spec)
    im2col_s = time.perf_counter() - started

    started = time.perf_counter()
    covariances = [covariance(group, stride)[1] for group in partition_groups(X)]
    cov_s = time.perf_counter() - started

    started = time.perf_counter()
    for cov in covariances:
        coupled_newton_schulz(cov, 1e-5, ns_iters)
    inv_s = time.perf_counter() - started

    started = time.perf_counter()
    matmul(X.data, weights.T)
    conv_s = time.perf_counter() - started

    return {"H": height, "W": width, "ch_in": ch_in, "ch_out": ch_out, "groups": groups,
            "k": k, "stride": stride, "batch": batch, "im2col_s": im2col_s, "cov_s": cov_s,
            "inv_s": inv_s, "conv_s": conv_s,
            "overhead_ratio": (im2col_s + cov_s + inv_s) / conv_s}


def run_timing(manifest: ExperimentManifest) -> ExperimentResult:
    """
    Desglose de tiempos sobre la grilla de la tabla de componentes. Los
    valores dependen de la máquina; se reportan también los cocientes.
    """
    out = Path(manifest.out_dir)
    batch = manifest.option("batch", 2)
    selected = manifest.option("rows") or list(range(len(TIMING_GRID)))
    rows = []
    for index in selected:
        row = time_components(*TIMING_GRID[index], batch=batch, seed=manifest.seed)
        logger.info("Tiempos medidos", row=index, **row)
        rows.append(row)
    frame = pd.DataFrame(rows)
    path = write_frame(frame, out / "timing.csv",
                       header_lines(manifest, f"batch={batch}", "valores dependientes de la máquina"))
    summary = {f"row{index}.overhead_ratio": row["overhead_ratio"]
               for index, row in zip(selected, rows)}
    return ExperimentResult(manifest.name, out, [path], summary)


def gradient_descent_curve(G: np.ndarray, b: np.ndarray, lr: float, target: np.ndarray,
                           transform: Optional[np.ndarray] = None, max_iters: int = 1000,
                           tol: float = 1e-3) -> List[Tuple[int, float, float]]:
    """
    GD sobre ½wᵀGw − bᵀw desde w = 0; el error relativo se mide sobre
    transform·w (el kernel en coordenadas crudas). Se detiene al alcanzar `tol`.
    """
    w = np.zeros_like(b)
    curve = []
    for iteration in range(1, max_iters + 1):
        w = w - lr * (G @ w - b)
        kernel = transform @ w if transform is not None else w
        loss = 0.5 * float(w @ G @ w) - float(b @ w)
        error = _relative_error(kernel, target)
        curve.append((iteration, error, loss))
        if error < tol or not math.isfinite(error):
            break
    return curve


def run_blur(manifest: ExperimentManifest) -> ExperimentResult:
    """
    Estimación del kernel de desenfoque: GD crudo con el mejor paso estable
    2/(λ_max+λ_min) contra GD sobre parches blanqueados con paso 1.
    """
    out = Path(manifest.out_dir)
    image = grayscale(_test_image(manifest))
    k = manifest.option("kernel", 5)
    problem = make_blur_problem(image, k, manifest.option("sigma_kernel", 1.0),
                                manifest.option("noise_sigma", 0.0), manifest.seed)
    X = im2col(problem.x_clean[None, None], PatchSpec(k)).data
    y = problem.y_blurred.reshape(-1)
    n = X.shape[0]
    G = matmul(X.T, X) / n
    b = X.T @ y / n
    target = problem.true_kernel.reshape(-1)
    max_iters = manifest.option("max_iters", 100000)

    eigenvalues, _ = sym_eig(0.5 * (G + G.T))
    raw_lr = 2.0 / (eigenvalues[-1] + eigenvalues[0])
    D = inverse_sqrt_oracle(G, 0.0)
    curves = {
        "raw": (raw_lr, gradient_descent_curve(G, b, raw_lr, target, max_iters=max_iters)),
        "whitened": (1.0, gradient_descent_curve(D @ G @ D, D @ b, 1.0, target, D,
                                                 max_iters=max_iters)),
    }
    curve_rows, summary_rows = [], []
    for method, (lr, curve) in curves.items():
        curve_rows += [{"method": method, "iteration": i, "rel_error": e, "loss": l}
                       for i, e, l in curve]
        converged = curve[-1][1] < 1e-3
        summary_rows.append({"method": method, "lr": lr,
                             "iterations_to_tol": curve[-1][0] if converged else -1,
                             "final_rel_error": curve[-1][1], "converged": converged})
    header = header_lines(manifest, f"k={k} condition={eigenvalues[-1] / eigenvalues[0]:.6g}")
    artifacts = [write_frame(pd.DataFrame(curve_rows), out / "blur_curves.csv", header),
                 write_frame(pd.DataFrame(summary_rows), out / "blur_summary.csv", header),
                 write_pgm(out / "kernel_true.pgm", problem.true_kernel)]
    summary = {f"{row['method']}.iterations": row["iterations_to_tol"] for row in summary_rows}
    return ExperimentResult(manifest.name, out, artifacts, summary)


def run_batchsize(manifest: ExperimentManifest) -> ExperimentResult:
    """Barrido de tamaños de lote con los ajustes (lr, ε, iteraciones) de cada preset."""
    out = Path(manifest.out_dir)
    train, test = _mnist(manifest)
    features = int(np.prod(train.image_shape))
    wanted = manifest.option("batch_sizes")
    artifacts: List[Path] = []
    rows = []
    for preset in BATCH_SIZE_PRESETS:
        if wanted and preset.batch_size not in wanted:
            continue
        whitening = manifest.whitening.model_copy(update={"eps": preset.eps,
                                                          "ns_iters": preset.ns_iters})
        # La primera capa usa los mismos ajustes del preset
        overrides = {1: whitening}
        network = build_mlp(features, 128, 3, train.num_classes, "deconv", whitening,
                            manifest.seed, overrides)
        config = _train_config(manifest, lr=preset.lr, batch_size=preset.batch_size)
        run = f"batch{preset.batch_size}"
        record = _train_run(manifest, network, train, test, config, run, artifacts)
        last = record.last("eval")
        rows.append({"batch_size": preset.batch_size, "lr": preset.lr, "eps": preset.eps,
                     "ns_iters": preset.ns_iters, "steps": len(record.split_rows("train")),
                     "eval_loss": last.loss, "eval_acc": last.acc,
                     "reported_acc": preset.reported_acc})
    artifacts.append(write_frame(pd.DataFrame(rows), out / "batchsize_summary.csv",
                                 header_lines(manifest)))
    summary = {f"batch{row['batch_size']}.acc": row["eval_acc"] for row in rows}
    return ExperimentResult(manifest.name, out, artifacts, summary)


def run_decay(manifest: ExperimentManifest) -> ExperimentResult:
    """Weight decay 5e-3 contra 5e-4 para batch norm y deconvolución."""
    decays = manifest.option("decays", [5e-3, 5e-4])
    if manifest.option("model", "mlp") == "cnn":
        data = _cifar(manifest)
        size = data[0].image_shape[-1]
        widths = tuple(manifest.option("widths", [64, 128, 256, 256]))

        def build(variant: str) -> Network:
            return build_vgg_small(data[0].image_shape[0], data[0].num_classes, size, widths,
                                   variant=variant, whitening=manifest.whitening,
                                   seed=manifest.seed)
    else:
        data = _mnist(manifest)
        features = int(np.prod(data[0].image_shape))

        def build(variant: str) -> Network:
            return build_mlp(features, 128, 3, data[0].num_classes, variant,
                             manifest.whitening, manifest.seed)

    return _compare_variants(manifest, "decay", build, data, decays=decays)


EXPERIMENTS: Dict[str, Runner] = {
    "converge": run_converge,
    "regress": run_regress,
    "mlp": run_mlp,
    "cnn": run_cnn,
    "kernel-viz": run_kernel_viz,
    "ns-bench": run_ns_bench,
    "sparsity": run_sparsity,
    "timing": run_timing,
    "blur": run_blur,
    "batchsize": run_batchsize,
    "decay": run_decay,
}


def run_experiment(manifest: ExperimentManifest) -> ExperimentResult:
    """
    Ejecuta el experimento del manifiesto, guarda el manifiesto resuelto en su
    directorio de salida y, con la opción self_check, valida los CSV emitidos.
    """
    runner = EXPERIMENTS[manifest.command]
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out / "manifest.json")
    logger.info("Iniciando experimento", command=manifest.command, name=manifest.name,
                seed=manifest.seed, out=str(out))
    result = runner(manifest)
    result.artifacts.append(out / "manifest.json")
    if manifest.option("self_check", False):
        result.summary["self_check_files"] = len(self_check(result))
    logger.info("Experimento terminado", command=manifest.command, artifacts=len(result.artifacts))
    return result
