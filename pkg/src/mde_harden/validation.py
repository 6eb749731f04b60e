"""Strict validation of the JSON and CSV files the harness writes."""
from __future__ import annotations

import csv
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema


class SchemaError(ValueError):
    pass


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    ref = resources.files("mde_harden").joinpath("schemas", f"{name}.schema.json")
    if not ref.is_file():
        raise KeyError(f"no schema named {name!r}")
    return json.loads(ref.read_text())


def _check(obj, schema: dict, where: str):
    try:
        jsonschema.Draft202012Validator(schema).validate(obj)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path)
        raise SchemaError(f"{where}: {e.message} (at /{path})") from None


def validate_json(obj, name: str, where: str = "<object>"):
    _check(obj, load_schema(name), where)


def validate_json_file(path, name: str) -> dict:
    p = Path(path)
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{p}: not valid JSON ({e})") from None
    validate_json(obj, name, str(p))
    return obj


def _cell(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def validate_csv(path, name: str) -> list[dict]:
    """Check the header against the schema's column list, then every typed row."""
    p = Path(path)
    schema = load_schema(f"{name}.csv")
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{p}: empty CSV, header missing")
    header, body = rows[0], rows[1:]
    if "x-columns" in schema and header != schema["x-columns"]:
        raise SchemaError(f"{p}: header {header} != {schema['x-columns']}")
    if "x-first-column" in schema and (not header or header[0] != schema["x-first-column"]):
        raise SchemaError(f"{p}: first column must be {schema['x-first-column']!r}")
    if len(set(header)) != len(header):
        raise SchemaError(f"{p}: duplicate column names")
    out = []
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise SchemaError(f"{p}:{i}: {len(r)} cells, header has {len(header)}")
        rec = {h: _cell(c) for h, c in zip(header, r)}
        # text columns stay text even when they look numeric
        for h, spec in schema.get("properties", {}).items():
            if h in rec and spec.get("type") == "string" and rec[h] is not None:
                rec[h] = r[header.index(h)]
        _check(rec, schema, f"{p}:{i}")
        out.append(rec)
    return out
