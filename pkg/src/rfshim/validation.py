"""Validation of emitted CSV/JSON artifacts against the shipped schemas.

JSON files are checked with jsonschema against the draft-07 documents in
``rfshim/schemas``; CSV files are checked against the column descriptions in
the same directory (fixed columns in order, then dynamic columns matched by
pattern, with per-cell type parsing).
"""

from __future__ import annotations

import csv
import json
import re
from importlib import resources
from pathlib import Path

from .errors import InvalidArgumentError


def load_schema(name: str) -> dict:
    """Load a schema document shipped with the package."""
    ref = resources.files("rfshim.schemas") / f"{name}.json"
    return json.loads(ref.read_text())


def validate_json_file(path, schema_name: str) -> None:
    """Raise if the JSON document does not conform to the named schema."""
    import jsonschema

    document = json.loads(Path(path).read_text())
    jsonschema.validate(document, load_schema(schema_name))


def _check_cell(value: str, spec: dict, column: str, row_no: int) -> None:
    if value == "":
        if spec.get("nullable"):
            return
        raise InvalidArgumentError(f"row {row_no}: column {column} is empty")
    kind = spec["type"]
    try:
        if kind == "int":
            int(value)
        elif kind == "float":
            float(value)
        elif kind == "bool":
            if value not in ("True", "False", "true", "false", "0", "1"):
                raise ValueError(value)
    except ValueError as exc:
        raise InvalidArgumentError(
            f"row {row_no}: column {column} value {value!r} is not a {kind}"
        ) from exc


def validate_csv_file(path, schema_name: str) -> int:
    """Validate header layout and cell types; returns the data-row count."""
    schema = load_schema(schema_name)
    if schema.get("format") != "csv":
        raise InvalidArgumentError(f"{schema_name} is not a CSV schema")
    fixed = schema["columns"]
    dynamic = [
        (re.compile(d["pattern"]), d) for d in schema.get("dynamic_columns", [])
    ]
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        expected = [c["name"] for c in fixed]
        if header[: len(expected)] != expected:
            raise InvalidArgumentError(
                f"header {header[:len(expected)]} != expected {expected}"
            )
        specs = list(fixed)
        for name in header[len(expected) :]:
            for pattern, spec in dynamic:
                if pattern.match(name):
                    specs.append({**spec, "name": name})
                    break
            else:
                raise InvalidArgumentError(f"unexpected column {name!r}")
        rows = 0
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(specs):
                raise InvalidArgumentError(
                    f"row {row_no} has {len(row)} cells, expected {len(specs)}"
                )
            for value, spec in zip(row, specs):
                _check_cell(value, spec, spec["name"], row_no)
            rows += 1
    return rows
