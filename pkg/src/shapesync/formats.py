"""On-disk formats: FMAT matrices, index-list maps, JSON sidecars and CSV tables.

FMAT layout (little-endian)::

    bytes 0-3   b"FMAT"
    bytes 4-5   u16 version (= 1)
    bytes 6-9   u32 rows
    bytes 10-13 u32 cols
    payload     rows*cols float64, row-major
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ParseError

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def fmat_bytes(matrix: np.ndarray) -> bytes:
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"FMAT stores 2-D matrices, got ndim={a.ndim}")
    rows, cols = a.shape
    return _HEADER.pack(FMAT_MAGIC, FMAT_VERSION, rows, cols) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def parse_fmat(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ParseError("FMAT: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != FMAT_MAGIC:
        raise ParseError(f"FMAT: bad magic {magic!r}")
    if version != FMAT_VERSION:
        raise ParseError(f"FMAT: unsupported version {version}")
    payload = data[_HEADER.size:]
    if len(payload) != 8 * rows * cols:
        raise ParseError(f"FMAT: payload is {len(payload)} bytes, expected {8 * rows * cols}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_fmat(path: str | os.PathLike, matrix: np.ndarray) -> None:
    atomic_write_bytes(path, fmat_bytes(matrix))


def read_fmat(path: str | os.PathLike) -> np.ndarray:
    return parse_fmat(Path(path).read_bytes())


def write_index_map(path: str | os.PathLike, indices: Sequence[int]) -> None:
    """One 0-based target index per line, one line per source vertex."""
    text = "".join(f"{int(i)}\n" for i in indices)
    atomic_write_text(path, text)


def read_index_map(path: str | os.PathLike) -> np.ndarray:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            value = int(line)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: not an integer index: {line!r}") from exc
        if value < 0:
            raise ParseError(f"{path}:{lineno}: negative index {value}")
        out.append(value)
    return np.asarray(out, dtype=np.int64)


def write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | os.PathLike) -> Any:
    return json.loads(Path(path).read_text())


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
