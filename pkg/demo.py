"""
Demo de netdeconv con datos sintéticos: convergencia en un paso, estabilidad
de Newton-Schulz y entrenamiento observado de un MLP con deconvolución.
"""
from rich.console import Console
from rich.table import Table

from netdeconv.main import configure_logging
from netdeconv.models.observer import Observable
from netdeconv.models.training import MetricRow, TrainConfig, TrainingAlert
from netdeconv.models.whitening import WhiteningConfig
from netdeconv.services.data_io import synthetic_classification
from netdeconv.services.experiments import ns_stability
from netdeconv.services.linalg import random_spd, seeded_rng
from netdeconv.services.networks import build_mlp
from netdeconv.services.trainer import Trainer, one_step_convergence_check


console = Console()


class ObservadorEntrenamiento:
    """
    Observador de ejemplo que imprime métricas y alertas del entrenamiento.
    """

    def __init__(self, nombre: str, cada: int = 10):
        """
        Inicializa el observador con un nombre.

        Args:
            nombre: Nombre del observador
            cada: Imprime una fila de entrenamiento de cada `cada` pasos
        """
        self.nombre = nombre
        self.cada = cada

    def update(self,
               subject: Observable,
               row: MetricRow = None,
               alert: TrainingAlert = None,
               **kwargs):
        """
        Procesa las actualizaciones del entrenamiento.

        Args:
            subject: El entrenador que envió la notificación
            row: Fila de métricas nueva
            alert: Alerta de entrenamiento si se generó una
        """
        if row and (row.split == "eval" or row.step % self.cada == 0):
            console.print(f"[{self.nombre}] {row.split} paso {row.step}: "
                          f"pérdida {row.loss:.4f}, exactitud {row.acc:.3f}")

        if alert:
            console.print(f"[{self.nombre}] ⚠️ ALERTA: {alert.message}")


def demo_convergencia() -> None:
    """Un paso de descenso con y sin blanqueo sobre datos correlacionados."""
    rng = seeded_rng(0)
    mezcla = rng.normal(size=(20, 20))
    X = rng.normal(size=(1000, 20)) @ mezcla
    y = X @ rng.normal(size=20) + 0.1 * rng.normal(size=1000)

    tabla = Table(title="Convergencia en un paso")
    for columna in ("método", "pérdida 1 paso", "pérdida óptima", "brecha relativa"):
        tabla.add_column(columna)
    for nombre, kwargs in (("sin blanqueo", {"whiten": False, "lr": 1e-3}),
                           ("oráculo", {"method": "oracle"}),
                           ("Newton-Schulz", {"method": "newton_schulz", "eps": 1e-5})):
        reporte = one_step_convergence_check(X, y, **kwargs)
        tabla.add_row(nombre, f"{reporte.loss_one_step:.4g}", f"{reporte.loss_optimal:.4g}",
                      f"{reporte.relative_gap:.3g}")
    console.print(tabla)


def demo_newton_schulz() -> None:
    """Residuos de Newton-Schulz acoplado frente al clásico."""
    cov = random_spd(seeded_rng(1), 27, condition=1e4)
    _, resumen = ns_stability(cov, eps=1e-5, iters=200)

    tabla = Table(title="Estabilidad de Newton-Schulz")
    tabla.add_column("medida")
    tabla.add_column("valor")
    for clave, valor in resumen.items():
        tabla.add_row(clave, f"{valor:.4g}" if isinstance(valor, float) else str(valor))
    console.print(tabla)


def demo_entrenamiento() -> None:
    """
    Entrena un MLP con deconvolución y registra dos observadores; a mitad del
    entrenamiento uno de ellos deja de observar.
    """
    train = synthetic_classification(512, size=8, seed=0)
    test = synthetic_classification(128, size=8, seed=1, split="test")
    red = build_mlp(in_features=64, hidden=32, variant="deconv",
                    whitening=WhiteningConfig(eps=1e-5, ns_iters=5))
    config = TrainConfig(lr=0.1, batch_size=32, epochs=2, schedule="cosine")

    entrenador = Trainer(red, config, name="demo")
    consola = ObservadorEntrenamiento("Consola")
    auditor = ObservadorEntrenamiento("Auditor", cada=5)
    entrenador.register_observer(consola)
    entrenador.register_observer(auditor)

    console.print("Comenzando entrenamiento del MLP con deconvolución...")
    entrenador.fit(train, test)

    console.print("\n[Sistema] El Auditor ha dejado de observar el entrenamiento.")
    entrenador.unregister_observer(auditor)
    entrenador.config = config.model_copy(update={"epochs": 1, "schedule": "constant", "lr": 0.01})
    entrenador.fit(train, test)

    final = entrenador.record.last("eval")
    console.print(f"Exactitud final en test: {final.acc:.3f}")


if __name__ == "__main__":
    configure_logging()
    console.print("Demostrando netdeconv con datos sintéticos\n")
    demo_convergencia()
    demo_newton_schulz()
    demo_entrenamiento()
