"""
Punto de entrada principal de netdeconv: configuración de logging y CLI.
"""
import logging
import sys

import structlog
from structlog.stdlib import LoggerFactory

from netdeconv.cli.router import app
from netdeconv.config import settings


def configure_logging() -> None:
    """
    Configura logging estándar y structlog para logging estructurado. Con
    NETDECONV_LOG_JSON=true los eventos se emiten como JSON.
    """
    logging.basicConfig(
        level=getattr(logging, settings.NETDECONV_LOG_LEVEL.upper(), logging.INFO),
        format="%(message)s",
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )
    renderer = (structlog.processors.JSONRenderer() if settings.NETDECONV_LOG_JSON
                else structlog.dev.ConsoleRenderer(colors=False))
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            renderer,
        ],
        context_class=dict,
        logger_factory=LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


def main() -> None:
    """Configura el logging y despacha el subcomando."""
    configure_logging()
    app()


# Esta sección se ejecuta solo si este archivo se ejecuta directamente
if __name__ == "__main__":
    main()
