"""Logger setup driven by MAVERIC_LOG (error | info | debug)."""

import logging
import os

from dotenv import load_dotenv

load_dotenv()

_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
_configured = False


def configure(level: str | None = None) -> None:
    global _configured
    name = (level or os.getenv("MAVERIC_LOG", "info")).strip().lower()
    logging.basicConfig(
        level=_LEVELS.get(name, logging.INFO),
        format="%(asctime)s %(levelname).1s [%(name)s] %(message)s",
        force=True,
    )
    _configured = True


def get_logger(name: str) -> logging.Logger:
    if not _configured:
        configure()
    return logging.getLogger(name)
