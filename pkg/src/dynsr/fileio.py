"""Persistence: atomic writes, binary snapshots, versioned CSV tables."""
from __future__ import annotations

import csv
import hashlib
import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import SnapshotError
from .grid import SphericalGrid, build_grid
from .solver import SweState

SNAPSHOT_MAGIC = b"DYNSRSNP"
SNAPSHOT_VERSION = 1
_HEAD = struct.Struct("<8sIIIdd")   # magic, version, nlat, nlon, radius, time
_DIGEST = 32


def atomic_write_bytes(path, data: bytes):
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


# -- snapshots -------------------------------------------------------------------
def snapshot_bytes(state: SweState, grid: SphericalGrid) -> bytes:
    for name in ("h", "u", "v"):
        grid.check_field(getattr(state, name), name)
    body = _HEAD.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, grid.nlat, grid.nlon,
                      grid.radius, float(state.t))
    body += b"".join(np.ascontiguousarray(getattr(state, n), dtype="<f8").tobytes()
                     for n in ("h", "u", "v"))
    return body + hashlib.sha256(body).digest()


def save_snapshot(path, state: SweState, grid: SphericalGrid):
    atomic_write_bytes(path, snapshot_bytes(state, grid))


def parse_snapshot(data: bytes):
    """Return ``(state, grid)``; raises :class:`SnapshotError` on any corruption."""
    if len(data) < _HEAD.size + _DIGEST:
        raise SnapshotError("snapshot too short")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    magic, version, nlat, nlon, radius, t = _HEAD.unpack_from(body)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotError("not a snapshot file (bad magic)")
    if version != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise SnapshotError("snapshot checksum mismatch")
    n = nlat * nlon
    if len(body) != _HEAD.size + 3 * 8 * n:
        raise SnapshotError("snapshot payload size does not match its grid descriptor")
    arrs = [np.frombuffer(body, dtype="<f8", count=n, offset=_HEAD.size + 8 * n * k)
            .reshape(nlat, nlon).astype(np.float64) for k in range(3)]
    return SweState(arrs[0], arrs[1], arrs[2], t), build_grid(nlat, nlon, radius)


def load_snapshot(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise SnapshotError(f"cannot read snapshot {path}: {exc}") from exc
    try:
        return parse_snapshot(data)
    except SnapshotError as exc:
        raise SnapshotError(f"{path}: {exc}") from exc


# -- CSV tables --------------------------------------------------------------------
def csv_text(schema: str, version: int, columns, rows) -> str:
    """CSV with a leading ``# schema: <name> v<version>`` comment line."""
    buf = io.StringIO()
    buf.write(f"# schema: {schema} v{version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def write_csv(path, schema, version, columns, rows):
    atomic_write_text(path, csv_text(schema, version, columns, rows))


def read_csv(path):
    """Return ``(schema, version, rows as dicts)``; numeric cells become floats."""
    lines = Path(path).read_text().splitlines()
    schema, version = None, None
    if lines and lines[0].startswith("# schema:"):
        name, _, ver = lines[0][len("# schema:"):].strip().rpartition(" v")
        schema, version = name, int(ver)
        lines = lines[1:]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append({k: _parse(v) for k, v in rec.items()})
    return schema, version, rows


def _parse(s):
    try:
        return float(s)
    except (TypeError, ValueError):
        return s
