"""
Implementación del patrón Observer para eventos de entrenamiento.
"""
from typing import Any, List, Optional, Protocol

from netdeconv.models.training import MetricRow, TrainingAlert


class Observer(Protocol):
    """Interfaz base para observadores."""

    def update(self,
               subject: 'Observable',
               row: Optional[MetricRow] = None,
               alert: Optional[TrainingAlert] = None,
               **kwargs: Any) -> None:
        """
        Método llamado cuando hay una actualización.

        Args:
            subject: El objeto observable que emitió la notificación
            row: Opcional, nueva fila de métricas
            alert: Opcional, nueva alerta de entrenamiento
            **kwargs: Datos adicionales que podrían ser necesarios
        """
        ...


class Observable:
    """Clase base para objetos observables."""

    def __init__(self):
        """Inicializa la lista de observadores."""
        # Lista y no conjunto: el orden de notificación es el de registro
        self._observers: List[Observer] = []

    def register_observer(self, observer: Observer) -> None:
        """
        Registra un nuevo observador.

        Args:
            observer: El observador a agregar
        """
        if observer not in self._observers:
            self._observers.append(observer)

    def unregister_observer(self, observer: Observer) -> None:
        """
        Elimina un observador.

        Args:
            observer: El observador a eliminar
        """
        if observer in self._observers:
            self._observers.remove(observer)

    def notify_observers(self,
                         row: Optional[MetricRow] = None,
                         alert: Optional[TrainingAlert] = None,
                         **kwargs: Any) -> None:
        """
        Notifica a todos los observadores.

        Args:
            row: Opcional, nueva fila de métricas
            alert: Opcional, nueva alerta
            **kwargs: Datos adicionales para pasar a los observadores
        """
        for observer in list(self._observers):
            observer.update(self, row=row, alert=alert, **kwargs)
