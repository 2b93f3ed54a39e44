"""Shared file helpers: float formatting and atomic writes."""

from __future__ import annotations

import os
import tempfile


def fmt17(x: float) -> str:
    """Format with 17 significant digits; round-trips any finite double."""
    return format(float(x), ".17g")


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write text then rename into place, so readers never see partial files."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
