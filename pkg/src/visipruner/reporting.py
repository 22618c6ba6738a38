"""Atomic report writers and schema validation.

Every file is written to a temporary sibling and renamed into place, so a
crashed run never leaves half a report behind. JSON is emitted with sorted
keys and no timestamps, so identical inputs give byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import jsonschema
import numpy as np

SCHEMAS = ("config", "summary", "flops", "trace", "probe", "schedule")


def to_jsonable(obj):
    """Recursively convert numpy scalars/arrays and tuples to plain JSON types."""
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path, obj, schema: str | None = None) -> Path:
    data = to_jsonable(obj)
    if schema:
        validate(data, schema)
    return atomic_write_text(path, dumps(data))


def write_jsonl(path, records: Iterable, schema: str | None = None) -> Path:
    lines = []
    for rec in records:
        data = to_jsonable(rec)
        if schema:
            validate(data, schema)
        lines.append(json.dumps(data, sort_keys=True, allow_nan=False))
    return atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: to_jsonable(row[k]) for k in columns})
    return atomic_write_text(path, buf.getvalue())


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in SCHEMAS:
        raise KeyError(f"unknown schema {name!r}")
    text = resources.files("visipruner").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validation_errors(data, name: str) -> list[dict]:
    """Field-level diagnostics, empty when ``data`` is valid."""
    validator = jsonschema.Draft202012Validator(load_schema(name))
    out = []
    for err in sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path))):
        out.append({"field": "/".join(str(p) for p in err.absolute_path) or "<root>", "message": err.message})
    return out


def validate(data, name: str) -> None:
    jsonschema.validate(data, load_schema(name), cls=jsonschema.Draft202012Validator)
