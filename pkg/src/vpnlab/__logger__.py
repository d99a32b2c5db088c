import logging
import os
from logging import Logger
from logging.config import fileConfig

import rich

from vpnlab.config import is_vpnlab_debug_mode

VPNLAB_LOGS_DIR: str = os.path.join("logs")


class VpnlabLogger:
    def __init__(self) -> None:
        self.logger: VpnlabLogger
        self._loggers: list[Logger] = []

        if not os.path.isdir(VPNLAB_LOGS_DIR):
            os.makedirs(VPNLAB_LOGS_DIR)
        fileConfig(
            os.path.join(os.path.dirname(__file__), "logging.ini"),
            disable_existing_loggers=False,
        )

    def init(self, module_name: str) -> "VpnlabLogger":
        """NOTE: pass in __name__ as module name"""
        logger: Logger = logging.getLogger(module_name)
        logger.setLevel(self._level())
        self._loggers.append(logger)

        self.logger = logger  # type: ignore[assignment]
        return self.logger

    def refresh_level(self) -> None:
        """Re-level every module logger after the debug flag changes."""
        for logger in self._loggers:
            logger.setLevel(self._level())

    @staticmethod
    def _level() -> int:
        return logging.DEBUG if is_vpnlab_debug_mode() else logging.WARNING

    def exception(self, ex: Exception) -> None:
        rich.print(
            f"\nSomething went wrong. See logs ([blue underline]{VPNLAB_LOGS_DIR}[/blue underline]) for more details.\n"
        )
        rich.print("  [[red]Exception[/red]]:", str(ex))
        self.logger.exception(ex)

    def error(self, message: str) -> None:
        self.logger.error(message)

    def warning(self, message: str) -> None:
        self.logger.warning(message)

    def info(self, message: str) -> None:
        self.logger.info(message)

    def debug(self, message: str) -> None:
        self.logger.debug(message)


vpnlab_logger: VpnlabLogger = VpnlabLogger()
