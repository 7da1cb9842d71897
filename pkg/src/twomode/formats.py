"""On-disk formats: dataset CSV and binary container, variance CSV, sweep CSV, JSON documents."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from .errors import DomainError, SchemaError
from .synth import AcquisitionConfig, QuadratureDataset

DATASET_HEADER = ("record", "sample", "theta1", "w1", "theta2", "w2")
VARIANCES_HEADER = ("sample", "theta1", "theta2", "var_w1", "var_w2", "var_joint", "count")
SWEEP_HEADER = ("channel", "t_fridge_kelvin", "var_raw", "repeat_index")

SCHEMA_STATE = "twomode/state/1"
SCHEMA_PARAMS = "twomode/squeezer-params/1"
SCHEMA_REPORT = "twomode/analysis-report/1"
SCHEMA_BOOTSTRAP = "twomode/bootstrap/1"
SCHEMA_CALIBRATION = "twomode/thermal-calibration/1"
SCHEMA_DATASET_BINARY = "twomode/dataset-binary/1"
SCHEMA_REPRODUCTION = "twomode/reproduction/1"


class DatasetFormatError(DomainError):
    """Malformed dataset file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps_json(doc) -> str:
    """Canonical JSON: sorted keys, shortest round-trip floats, non-finite values as null."""
    return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(doc, path) -> None:
    Path(path).write_text(dumps_json(doc), encoding="utf-8")


def read_json(path, schema: str | tuple[str, ...] | None = None, required: bool = True) -> dict:
    """Load a JSON document and check its ``schema`` tag.

    A present-but-unknown tag is always rejected. A missing tag is rejected
    when ``required`` is true.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    if schema is not None:
        allowed = (schema,) if isinstance(schema, str) else schema
        tag = doc.get("schema")
        if tag is None and required:
            raise SchemaError(f"{path}: missing schema tag; expected one of {allowed}")
        if tag is not None and tag not in allowed:
            raise SchemaError(f"{path}: unsupported schema {tag!r}; expected one of {allowed}")
    return doc


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def format_dataset_csv(dataset: QuadratureDataset) -> str:
    buf = io.StringIO()
    buf.write(",".join(DATASET_HEADER) + "\n")
    t1, t2 = dataset.theta1, dataset.theta2
    for r in range(dataset.n_records):
        w1, w2 = dataset.w1[r], dataset.w2[r]
        a, b = t1[r], t2[r]
        buf.write(
            "".join(
                f"{r},{k},{a[k]:.12g},{w1[k]:.9g},{b[k]:.12g},{w2[k]:.9g}\n"
                for k in range(dataset.samples_per_record)
            )
        )
    return buf.getvalue()


def write_dataset_csv(dataset: QuadratureDataset, path) -> None:
    Path(path).write_text(format_dataset_csv(dataset), encoding="utf-8")


def _rows_to_dataset(rows: np.ndarray, first_line: int = 2) -> QuadratureDataset:
    if rows.shape[0] == 0:
        raise DatasetFormatError("dataset has no rows")
    rec = rows[:, 0]
    smp = rows[:, 1]
    if np.any(rec != np.round(rec)) or np.any(smp != np.round(smp)) or np.any(rec < 0) or np.any(smp < 0):
        bad = int(np.flatnonzero((rec != np.round(rec)) | (smp != np.round(smp)) | (rec < 0) | (smp < 0))[0])
        raise DatasetFormatError("record and sample must be nonnegative integers", first_line + bad)
    rec = rec.astype(np.int64)
    smp = smp.astype(np.int64)
    n_rec, n_smp = int(rec.max()) + 1, int(smp.max()) + 1
    if n_rec * n_smp != rows.shape[0]:
        raise DatasetFormatError(
            f"expected a complete grid of {n_rec} records x {n_smp} samples, got {rows.shape[0]} rows"
        )
    flat = rec * n_smp + smp
    seen = np.zeros(n_rec * n_smp, dtype=bool)
    seen[flat] = True
    if not seen.all():
        raise DatasetFormatError("duplicate (record, sample) pairs")
    order = np.empty_like(flat)
    order[flat] = np.arange(flat.size)
    grid = rows[order]
    shape = (n_rec, n_smp)
    theta1 = grid[:, 2].reshape(shape)
    theta2 = grid[:, 4].reshape(shape)
    if np.array_equal(theta1, np.broadcast_to(theta1[:1], shape)):
        theta1 = theta1[0]
    if np.array_equal(theta2, np.broadcast_to(theta2[:1], shape)):
        theta2 = theta2[0]
    return QuadratureDataset(theta1=theta1, w1=grid[:, 3].reshape(shape), theta2=theta2, w2=grid[:, 5].reshape(shape))


def _parse_lines_strict(lines) -> np.ndarray:
    values = []
    for lineno, row in enumerate(csv.reader(lines), start=2):
        if not row or all(not c.strip() for c in row):
            raise DatasetFormatError("empty row", lineno)
        if len(row) != len(DATASET_HEADER):
            raise DatasetFormatError(f"expected {len(DATASET_HEADER)} fields, got {len(row)}", lineno)
        try:
            parsed = [float(c) for c in row]
        except ValueError:
            raise DatasetFormatError(f"non-numeric field in {row!r}", lineno) from None
        if not all(math.isfinite(v) for v in parsed):
            raise DatasetFormatError("non-finite value", lineno)
        values.append(parsed)
    return np.array(values, dtype=float).reshape(-1, len(DATASET_HEADER))


def read_dataset_csv(path) -> QuadratureDataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty file", 1)
    header = tuple(c.strip() for c in lines[0].split(","))
    if header != DATASET_HEADER:
        raise DatasetFormatError(f"header must be {','.join(DATASET_HEADER)}", 1)
    body = lines[1:]
    if not body:
        raise DatasetFormatError("dataset has no rows", 2)
    try:
        rows = np.loadtxt(body, delimiter=",", ndmin=2)
        if rows.shape[1] != len(DATASET_HEADER) or not np.all(np.isfinite(rows)):
            raise ValueError
    except ValueError:
        rows = _parse_lines_strict(body)
    return _rows_to_dataset(rows)


def write_dataset_binary(dataset: QuadratureDataset, path) -> Path:
    """Write ``(theta1, w1, theta2, w2)`` rows as little-endian float64 plus a JSON sidecar.

    Returns the sidecar path (``<path>.json``).
    """
    path = Path(path)
    stacked = np.stack(
        [dataset.theta1, dataset.w1, dataset.theta2, dataset.w2], axis=-1
    ).astype("<f8", copy=False)
    path.write_bytes(np.ascontiguousarray(stacked).tobytes())
    sidecar = path.with_name(path.name + ".json")
    write_json(
        {
            "schema": SCHEMA_DATASET_BINARY,
            "columns": ["theta1", "w1", "theta2", "w2"],
            "dtype": "<f8",
            "n_records": dataset.n_records,
            "samples_per_record": dataset.samples_per_record,
            "config": dataset.config.to_dict() if dataset.config else None,
            "sha256": sha256_file(path),
        },
        sidecar,
    )
    return sidecar


def read_dataset_binary(path) -> QuadratureDataset:
    path = Path(path)
    meta = read_json(path.with_name(path.name + ".json"), SCHEMA_DATASET_BINARY)
    shape = (int(meta["n_records"]), int(meta["samples_per_record"]))
    raw = np.fromfile(path, dtype="<f8")
    if raw.size != shape[0] * shape[1] * 4:
        raise DatasetFormatError(f"binary size {raw.size} does not match sidecar shape {shape}")
    grid = raw.reshape(shape + (4,)).astype(float)
    theta1, theta2 = grid[..., 0], grid[..., 2]
    if np.array_equal(theta1, np.broadcast_to(theta1[:1], shape)):
        theta1 = theta1[0]
    if np.array_equal(theta2, np.broadcast_to(theta2[:1], shape)):
        theta2 = theta2[0]
    config = AcquisitionConfig.from_dict(meta["config"]) if meta.get("config") else None
    return QuadratureDataset(theta1=theta1, w1=grid[..., 1], theta2=theta2, w2=grid[..., 3], config=config)


def is_binary_path(path) -> bool:
    return Path(path).suffix in (".bin", ".f64")


def read_dataset(path) -> QuadratureDataset:
    return read_dataset_binary(path) if is_binary_path(path) else read_dataset_csv(path)


def write_dataset(dataset: QuadratureDataset, path, fmt: str = "csv") -> None:
    if fmt == "binary":
        write_dataset_binary(dataset, path)
    elif fmt == "csv":
        write_dataset_csv(dataset, path)
    else:
        raise DomainError(f"unknown dataset format {fmt!r}")


def format_variances_csv(binned) -> str:
    buf = io.StringIO()
    buf.write(",".join(VARIANCES_HEADER) + "\n")
    for k in range(len(binned)):
        buf.write(
            f"{int(binned.sample[k])},{binned.theta1[k]:.12g},{binned.theta2[k]:.12g},"
            f"{binned.var_w1[k]:.9g},{binned.var_w2[k]:.9g},{binned.var_joint[k]:.9g},{binned.count}\n"
        )
    return buf.getvalue()


def read_sweep_csv(path):
    from .calibration import ThermalSweepPoint

    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(c.strip() for c in header) != SWEEP_HEADER:
            raise DatasetFormatError(f"header must be {','.join(SWEEP_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SWEEP_HEADER):
                raise DatasetFormatError(f"expected {len(SWEEP_HEADER)} fields, got {len(row)}", lineno)
            try:
                points.append(
                    ThermalSweepPoint(int(row[0]), float(row[1]), float(row[2]), int(row[3]))
                )
            except ValueError as exc:
                raise DatasetFormatError(str(exc), lineno) from None
    if not points:
        raise DatasetFormatError("sweep has no rows", 2)
    return points


def format_sweep_csv(points) -> str:
    lines = [",".join(SWEEP_HEADER)]
    lines += [f"{p.channel},{p.t_fridge:.12g},{p.var_raw:.12g},{p.repeat_index}" for p in points]
    return "\n".join(lines) + "\n"
