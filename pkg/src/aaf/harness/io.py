"""On-disk artifacts: parameter files, metrics CSV and final reports.

Parameter file layout (version 1)::

    AAFPARAMS 1\\n
    <n>\\n
    <name> <dim0>x<dim1>x...\\n      (n lines; scalars use the shape "scalar")
    then for each tensor, in header order:
    8-byte little-endian element count, followed by that many float64 values (LE)
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

MAGIC = "AAFPARAMS"
FORMAT_VERSION = 1
CSV_COLUMNS = ("episode", "phase", "loss", "base_map", "novel_map", "k", "seed")


class FormatError(ValueError):
    pass


def _shape_token(shape: tuple) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(token: str) -> tuple:
    if token == "scalar":
        return ()
    try:
        dims = tuple(int(t) for t in token.split("x"))
    except ValueError:
        raise FormatError(f"bad shape token {token!r}") from None
    if any(d < 1 for d in dims):
        raise FormatError(f"bad shape token {token!r}")
    return dims


def encode_params(params: Mapping[str, np.ndarray]) -> bytes:
    names = sorted(params)
    for n in names:
        if not n or any(ch.isspace() for ch in n):
            raise FormatError(f"parameter name {n!r} must be non-empty without whitespace")
    arrays = [np.asarray(getattr(params[n], "data", params[n]), dtype=np.float64) for n in names]
    header = [f"{MAGIC} {FORMAT_VERSION}", str(len(names))]
    header += [f"{n} {_shape_token(a.shape)}" for n, a in zip(names, arrays)]
    out = io.BytesIO()
    out.write(("\n".join(header) + "\n").encode("ascii"))
    for a in arrays:
        out.write(struct.pack("<Q", a.size))
        out.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return out.getvalue()


def decode_params(blob: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(blob)

    def line() -> str:
        raw = buf.readline()
        if not raw.endswith(b"\n"):
            raise FormatError("truncated header")
        return raw[:-1].decode("ascii")

    first = line().split()
    if len(first) != 2 or first[0] != MAGIC:
        raise FormatError("not a parameter file")
    if first[1] != str(FORMAT_VERSION):
        raise FormatError(f"unsupported format version {first[1]}")
    try:
        count = int(line())
    except ValueError:
        raise FormatError("bad tensor count") from None
    entries = []
    for _ in range(count):
        parts = line().split(" ")
        if len(parts) != 2:
            raise FormatError(f"bad header line {' '.join(parts)!r}")
        entries.append((parts[0], _parse_shape(parts[1])))
    result = {}
    for name, shape in entries:
        raw = buf.read(8)
        if len(raw) != 8:
            raise FormatError(f"truncated data for {name}")
        (size,) = struct.unpack("<Q", raw)
        if size != int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{name}: length {size} does not match shape {shape}")
        data = buf.read(8 * size)
        if len(data) != 8 * size:
            raise FormatError(f"truncated data for {name}")
        result[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
    if buf.read(1):
        raise FormatError("trailing bytes after last tensor")
    return result


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_params(path, params: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_params(params))


def load_params(path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())


def assign_params(targets: Mapping, values: Mapping[str, np.ndarray]) -> None:
    """Copy loaded arrays into live tensors, checking names and shapes."""
    missing = set(targets) - set(values)
    extra = set(values) - set(targets)
    if missing or extra:
        raise FormatError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, t in targets.items():
        if t.data.shape != values[name].shape:
            raise FormatError(f"{name}: shape {values[name].shape}, expected {t.data.shape}")
        t.data = values[name].copy()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(rows: Iterable) -> str:
    """CSV text for log rows; floats use ``repr`` so output is byte-stable."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return out.getvalue()


def append_metrics(path, rows: Iterable) -> None:
    """Append rows to a metrics CSV, writing the header if the file is new."""
    path = Path(path)
    text = metrics_csv(rows)
    if path.exists() and path.stat().st_size:
        text = text.split("\n", 1)[1]
    with open(path, "a", encoding="utf-8", newline="") as fh:
        fh.write(text)


def report_text(report: Mapping) -> str:
    lines = []
    for key, value in report.items():
        if isinstance(value, Mapping):
            for sub, v in value.items():
                lines.append(f"{key}.{sub}: {_fmt(v)}")
        elif isinstance(value, (list, tuple)):
            lines.append(f"{key}: {','.join(_fmt(v) for v in value)}")
        else:
            lines.append(f"{key}: {_fmt(value)}")
    return "\n".join(lines) + "\n"


def write_report(out_dir, report: Mapping, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    txt, js = out_dir / f"{stem}.txt", out_dir / f"{stem}.json"
    atomic_write(txt, report_text(report))
    atomic_write(js, json.dumps(report, indent=2, sort_keys=False) + "\n")
    return txt, js


def read_report(path) -> Optional[dict]:
    return json.loads(Path(path).read_text())
