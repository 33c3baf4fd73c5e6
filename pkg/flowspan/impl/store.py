# Copyright (c) 2024 flowspan developers
"""
Utilities for storing and loading files.

All writes go to a temporary file in the destination directory that is
then renamed into place, so a reader never sees a partially written file.
"""

import json
import os
import tempfile
from logging import getLogger
from pathlib import Path
from typing import Any, Union

from flowspan.impl.exceptions import FlowspanException

logger = getLogger(__name__)

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """
    Write bytes to a file atomically.

    Parameters
    ----------
    path
        The destination. Its directory must exist.
    payload
        What to write.

    Returns
    -------
        The destination as a `Path`.
    """
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")

    fd, temp_name = tempfile.mkstemp(
        prefix=f".{path.name}.", suffix=".tmp", dir=directory
    )
    try:
        with os.fdopen(fd, "wb") as file:
            file.write(payload)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise

    logger.debug("Wrote %d bytes to %s.", len(payload), path)

    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: PathLike, value: Any) -> Path:
    """Write a JSON document atomically, pretty-printed with sorted keys."""
    return atomic_write_text(path, json.dumps(value, indent=2, sort_keys=True) + "\n")


def json_from_path(path: PathLike) -> Any:
    """
    Load a JSON document.

    Raises
    ------
    FlowspanException
        If the file is missing or is not valid JSON.
    """
    path = Path(path)

    try:
        with open(path, "r", encoding="utf-8") as file:
            return json.load(file)
    except FileNotFoundError as exc:
        raise FlowspanException(f"No such file {path}.") from exc
    except json.JSONDecodeError as exc:
        # Do our best to tell the user something informative.
        raise FlowspanException(
            f"File {path} is not valid JSON: {exc.msg} at line {exc.lineno}."
        ) from exc


def ensure_directory(path: PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
