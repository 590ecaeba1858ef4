"""Small helpers for writing result tables and manifests atomically."""

from __future__ import annotations

import csv
import hashlib
import json
import os


def fmt(value) -> str:
    """Full-precision, locale-free cell formatting."""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_csv_atomic(path, header, rows) -> None:
    """Write a CSV via a temp file + rename so readers never see partials."""
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(cell) for cell in row])
    os.replace(tmp, path)


def write_json_atomic(path, obj) -> None:
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
