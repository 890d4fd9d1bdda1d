"""Reading audio / sample files and writing CSV tables with JSON sidecars."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy.io import wavfile

__all__ = ["DataError", "read_samples", "write_csv", "write_json", "read_csv_rows", "write_signal"]


class DataError(ValueError):
    """Input data could not be read or has an unsupported layout."""


def read_samples(path, sample_rate: float | None = None) -> tuple[np.ndarray, float]:
    """Load a mono signal as floats in [-1, 1] plus its sample rate.

    WAV files carry their own rate; for CSV (one sample per line, or a single
    column with a header) ``sample_rate`` must be given. Multi-channel WAV is
    averaged to mono.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    suffix = path.suffix.lower()
    if suffix == ".wav":
        try:
            fs, data = wavfile.read(path)
        except (ValueError, OSError) as exc:
            raise DataError(f"unreadable WAV file {path}: {exc}") from exc
        x = _to_float(data)
        if x.ndim == 2:
            x = x.mean(axis=1)
        return x, float(fs)
    if suffix in (".csv", ".txt"):
        if sample_rate is None:
            raise DataError("a sample rate is required for CSV input")
        try:
            x = np.loadtxt(path, delimiter=",", ndmin=1)
        except ValueError:
            try:
                x = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=1)
            except ValueError as exc:
                raise DataError(f"unreadable CSV file {path}: {exc}") from exc
        if x.ndim != 1:
            raise DataError("CSV input must have a single column")
        return x.astype(float), float(sample_rate)
    raise DataError(f"unsupported format {suffix!r} (expected .wav or .csv)")


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype.kind == "f":
        return data.astype(float)
    if data.dtype == np.uint8:
        return (data.astype(float) - 128.0) / 128.0
    if data.dtype.kind == "i":
        return data.astype(float) / float(-np.iinfo(data.dtype).min)
    raise DataError(f"unsupported sample type {data.dtype}")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (np.integer,)):
        return str(int(v))
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, sort_keys=True)
    return v


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    """RFC-4180 style CSV; floats written with full ``repr`` precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c, "")) for c in columns])
    return path


def read_csv_rows(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> Path:
    """UTF-8 JSON with sorted keys; non-finite floats become strings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    return path


def write_signal(path, samples, truth: dict | None = None) -> list[Path]:
    """Complex samples as a ``real,imag`` CSV plus an optional JSON sidecar."""
    path = Path(path)
    z = np.asarray(samples, dtype=complex)
    out = [write_csv(path, [{"real": float(v.real), "imag": float(v.imag)} for v in z], ["real", "imag"])]
    if truth is not None:
        out.append(write_json(path.with_suffix(".json"), truth))
    return out
