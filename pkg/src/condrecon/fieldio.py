"""CSV field files and atomic writes.

Grid fields are written as ``i,j,value`` rows and mesh fields as
``node,value`` rows.  Values use ``repr`` so a reload is bit-identical.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .mesh import RectGrid, TriMesh

__all__ = ["atomic_write", "write_field", "read_field", "field_csv", "parse_field_csv", "write_json"]


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def field_csv(domain, values) -> str:
    values = np.asarray(values, dtype=float).ravel()
    if len(values) != domain.size:
        raise ValueError(f"field has {len(values)} values, domain has {domain.size} points")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    if isinstance(domain, RectGrid):
        wr.writerow(["i", "j", "value"])
        for k, v in enumerate(values):
            i, j = domain.unravel(k)
            wr.writerow([int(i), int(j), repr(float(v))])
    elif isinstance(domain, TriMesh):
        wr.writerow(["node", "value"])
        for k, v in enumerate(values):
            wr.writerow([k, repr(float(v))])
    else:
        raise TypeError(f"unsupported domain {type(domain).__name__}")
    return buf.getvalue()


def parse_field_csv(domain, text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty field file")
    head, body = rows[0], rows[1:]
    out = np.full(domain.size, np.nan)
    seen = np.zeros(domain.size, dtype=bool)
    for lineno, row in enumerate(body, start=2):
        if head == ["i", "j", "value"] and isinstance(domain, RectGrid):
            i, j, v = int(row[0]), int(row[1]), float(row[2])
            if not (0 <= i < domain.nx and 0 <= j < domain.ny):
                raise ValueError(f"line {lineno}: cell ({i}, {j}) outside the grid")
            k = int(domain.index(i, j))
        elif head == ["node", "value"] and isinstance(domain, TriMesh):
            k, v = int(row[0]), float(row[1])
            if not 0 <= k < domain.size:
                raise ValueError(f"line {lineno}: node {k} out of range")
        else:
            raise ValueError(f"header {head} does not match a {type(domain).__name__} field")
        if seen[k]:
            raise ValueError(f"line {lineno}: duplicate entry for point {k}")
        seen[k] = True
        out[k] = v
    if not seen.all():
        raise ValueError(f"field file covers {int(seen.sum())} of {domain.size} points")
    return out


def write_field(path, domain, values) -> Path:
    return atomic_write(path, field_csv(domain, values))


def read_field(path, domain) -> np.ndarray:
    return parse_field_csv(domain, Path(path).read_text())
