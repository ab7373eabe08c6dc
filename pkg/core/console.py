"""
Colored stderr logging. Machine-readable output never goes through here.
"""

import logging
import sys
from typing import Optional

try:
    import colorama
    colorama.init()

    class Colors:
        DEBUG = colorama.Style.DIM
        INFO = colorama.Fore.CYAN
        SUCCESS = colorama.Fore.GREEN
        WARNING = colorama.Fore.YELLOW
        ERROR = colorama.Fore.RED
        BOLD = colorama.Style.BRIGHT
        ENDC = colorama.Style.RESET_ALL
except ImportError:
    class Colors:
        DEBUG = ""
        INFO = ""
        SUCCESS = ""
        WARNING = ""
        ERROR = ""
        BOLD = ""
        ENDC = ""

ROOT_LOGGER = "pfgan"
SUCCESS = 25
logging.addLevelName(SUCCESS, "SUCCESS")

_LEVEL_STYLE = {
    logging.DEBUG: (Colors.DEBUG, "·"),
    logging.INFO: (Colors.INFO, "ℹ️ "),
    SUCCESS: (Colors.SUCCESS, "✅"),
    logging.WARNING: (Colors.WARNING, "⚠️ "),
    logging.ERROR: (Colors.ERROR, "❌"),
    logging.CRITICAL: (Colors.ERROR + Colors.BOLD, "❌"),
}


class ConsoleFormatter(logging.Formatter):
    """Prefixes each record with a level symbol, colored when enabled"""

    def __init__(self, color: bool = True):
        super().__init__("%(asctime)s %(name)s: %(message)s", datefmt="%H:%M:%S")
        self.color = color

    def format(self, record: logging.LogRecord) -> str:
        color, symbol = _LEVEL_STYLE.get(record.levelno, ("", ""))
        line = f"{symbol} {super().format(record)}"
        if self.color and color:
            return f"{color}{line}{Colors.ENDC}"
        return line


def get_logger(name: str) -> logging.Logger:
    if name.startswith("core."):
        name = name[len("core."):]
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def setup_logging(level: int = logging.INFO, color: Optional[bool] = None) -> logging.Logger:
    """Install a single stderr handler on the toolkit's root logger"""
    if color is None:
        color = sys.stderr.isatty()
    root = logging.getLogger(ROOT_LOGGER)
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(ConsoleFormatter(color=color))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    return root


def success(logger: logging.Logger, message: str, *args) -> None:
    logger.log(SUCCESS, message, *args)
