import logging
import sys

from dagster import get_dagster_logger

_FORMAT = "%(asctime)s %(levelname)s %(name)s - %(message)s"


def get_logger(name):
    return get_dagster_logger(name)


def configure(verbose=False):
    """Send lab logs to stderr; stdout is reserved for machine-readable payloads."""
    root = get_dagster_logger()
    handler = next((h for h in root.handlers if getattr(h, "_evomoe", False)), None)
    if handler is None:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT))
        handler._evomoe = True
        root.addHandler(handler)
        root.propagate = False
    else:
        handler.setStream(sys.stderr)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return root
