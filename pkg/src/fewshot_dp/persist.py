"""Deterministic result files: RFC 4180 CSV, JSON summaries and config copies.

Every writer produces the same bytes for the same input: CSV rows keep the
given column order, JSON keys are sorted, and floats are written with
``repr`` so they parse back exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


def run_stem(kind: str, seed: int) -> str:
    return f"{kind}_seed{seed}"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def csv_text(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    """RFC 4180 text: header line, CRLF line ends, quotes only where needed."""
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    buf = io.StringIO(newline="")
    w = csv.writer(buf, dialect="excel", lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _jsonable(v):
    if isinstance(v, Mapping):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        # JSON has no inf/nan; null is the portable stand-in
        return v if math.isfinite(v) else None
    if hasattr(v, "value"):
        return v.value
    return v


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as err:
        raise OSError(err.errno, f"cannot write {path}: {err.strerror}") from None
    return path


def persist_results(
    out_dir: str | Path,
    kind: str,
    seed: int,
    rows: Iterable[Mapping],
    summary: Mapping,
    config_yaml: str,
    columns: Sequence[str] | None = None,
) -> list[Path]:
    """Write ``<kind>_seed<seed>.csv``, ``.json`` and ``_config.yaml`` into ``out_dir``."""
    out = Path(out_dir)
    stem = run_stem(kind, seed)
    return [
        _write(out / f"{stem}.csv", csv_text(list(rows), columns)),
        _write(out / f"{stem}.json", json_text(summary)),
        _write(out / f"{stem}_config.yaml", config_yaml),
    ]


def write_text(path: str | Path, text: str) -> Path:
    return _write(Path(path), text)
