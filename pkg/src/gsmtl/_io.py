"""Small file helpers: atomic writes, matrix CSV and plain PGM."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .core import DataError


def atomic_write_text(path, text: str):
    """Write ``text`` to a temporary file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_matrix(M) -> str:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    lines = [f"# rows={M.shape[0]} cols={M.shape[1]}"]
    lines += [",".join(repr(float(v)) for v in row) for row in M]
    return "\n".join(lines) + "\n"


def write_matrix(M, path):
    """Row-major CSV preceded by a ``# rows=R cols=C`` line; values round-trip exactly."""
    atomic_write_text(path, format_matrix(M))


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise DataError(f"cannot read matrix file {path}: {err.strerror or err}") from None
    if not lines or not lines[0].startswith("# rows="):
        raise DataError(f"{path}, line 1: expected '# rows=R cols=C'")
    try:
        fields = dict(part.split("=") for part in lines[0][1:].split())
        R, C = int(fields["rows"]), int(fields["cols"])
    except (ValueError, KeyError):
        raise DataError(f"{path}, line 1: malformed header {lines[0]!r}") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != R:
        raise DataError(f"{path}: header declares {R} rows, found {len(body)}")
    out = np.empty((R, C))
    for i, line in enumerate(body):
        parts = line.split(",")
        if len(parts) != C:
            raise DataError(f"{path}, line {i + 2}: expected {C} values, found {len(parts)}")
        try:
            out[i] = [float(p) for p in parts]
        except ValueError:
            raise DataError(f"{path}, line {i + 2}: non-numeric value") from None
    return out


def pgm_pixels(A) -> np.ndarray:
    """Grey levels ``round(255 * |A| / max|A|)``; an all-zero matrix maps to black."""
    A = np.abs(np.asarray(A, dtype=float))
    top = A.max() if A.size else 0.0
    if top == 0:
        return np.zeros(A.shape, dtype=int)
    return np.rint(255.0 * A / top).astype(int)


def format_pgm(pixels) -> str:
    """Plain (P2) graymap; width is the number of columns, height the rows."""
    P = np.asarray(pixels, dtype=int)
    lines = ["P2", f"{P.shape[1]} {P.shape[0]}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in P]
    return "\n".join(lines) + "\n"
