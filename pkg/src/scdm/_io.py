from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

from scdm import __version__


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str | Path, obj: dict) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=False) + "\n").encode("utf-8"))


def provenance(config: dict | None = None) -> dict:
    """Config echo embedded in every emitted artifact."""
    return {"code_version": __version__, "config": dict(config or {})}


def write_csv(path: str | Path, columns, rows, config: dict | None = None) -> None:
    """CSV whose first line is ``# {"schema": [...], "provenance": {...}}``."""
    buf = io.StringIO()
    buf.write("# " + json.dumps({"schema": list(columns), "provenance": provenance(config)}) + "\n")
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in columns})
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_csv(path: str | Path) -> tuple[dict, list[dict]]:
    """Inverse of :func:`write_csv`; values come back as strings."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path} lacks a schema header line")
    head = json.loads(lines[0][2:])
    return head, list(csv.DictReader(lines[1:]))
