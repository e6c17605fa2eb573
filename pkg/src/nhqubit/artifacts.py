"""CSV / manifest / config-file plumbing shared by the command-line runner.

CSV artifacts carry a header row and full double precision (17 significant
digits) so downstream tolerance checks are meaningful; manifests are JSON
with sorted keys and no timestamps, making byte-identical replay possible.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def fmt(value) -> str:
    """Render one scalar at full double precision."""
    if value is None:
        return "nan"
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(path, header, columns) -> None:
    """Write named columns (equal-length sequences) as CSV."""
    columns = [np.asarray(col) for col in columns]
    n_rows = len(columns[0])
    if any(len(col) != n_rows for col in columns):
        raise ValueError("all CSV columns must have equal length")
    lines = [",".join(header)]
    for i in range(n_rows):
        lines.append(",".join(fmt(col[i]) for col in columns))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path) -> dict[str, np.ndarray]:
    """Read a CSV written by write_csv back into named float columns."""
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split(",")
    data = np.array(
        [[float(cell) for cell in line.split(",")] for line in lines[1:]]
    )
    if data.size == 0:
        data = np.empty((0, len(header)))
    return {name: data[:, k] for k, name in enumerate(header)}


def write_manifest(path, config: dict, version: str) -> None:
    payload = {"config": config, "version": version}
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def write_json(path, payload) -> None:
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def parse_config_text(text: str) -> dict[str, str]:
    """Parse a flat `key = value` configuration file.

    Blank lines and `#` comments are ignored.  JSON input (a bare config
    object or a run manifest with a "config" entry) is accepted too, so a
    manifest can be replayed directly.
    """
    stripped = text.lstrip()
    if stripped.startswith("{"):
        payload = json.loads(text)
        if "config" in payload and isinstance(payload["config"], dict):
            payload = payload["config"]
        return {key: _unparse(value) for key, value in payload.items()}
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _unparse(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)
