# rfit/utils.py

# Copyright 2024 Nicko van Someren
# SPDX: MIT
# See LICENSE.md for the full license text.

"""General utility functions"""

import hashlib
import logging
import os
import tempfile
from pathlib import Path

from .errors import ParameterError

logger = logging.getLogger(__name__)

THREADS_ENV = "RFIT_THREADS"


def thread_count(requested=None):
    """Return the worker thread count: the request, else $RFIT_THREADS, else 1"""
    if requested is not None:
        if requested < 1:
            raise ParameterError("threads", "Thread count must be at least 1")
        return int(requested)
    env_value = os.environ.get(THREADS_ENV)
    if not env_value:
        return 1
    try:
        value = int(env_value)
    except ValueError:
        raise ParameterError("threads", f"{THREADS_ENV} must be an integer, not {env_value!r}") from None
    if value < 1:
        raise ParameterError("threads", f"{THREADS_ENV} must be at least 1")
    return value


def atomic_write(path, data):
    """Write text or bytes to ``path`` via a temporary file and a rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as f:
            f.write(data)
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise
    logger.debug("Wrote %s", path)
    return path


def file_digest(path):
    """Return the sha256 hex digest of a file's contents"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
