"""Atomic file writes: everything lands via temp file + rename, so a failed
command never leaves a partial output behind."""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .images import save_image


def _atomic(path: str, write_fn) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    suffix = os.path.splitext(path)[1]
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=suffix)
    try:
        with os.fdopen(fd, "wb") as handle:
            write_fn(handle, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str, data: bytes) -> None:
    _atomic(path, lambda handle, tmp: handle.write(data))


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_save_image(path: str, arr: np.ndarray) -> None:
    def write(handle, tmp):
        handle.close()
        save_image(tmp, arr)

    _atomic(path, write)
