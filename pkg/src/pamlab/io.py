"""Serialization: binary field containers, CSV views and JSON summaries.

Binary layout (all little-endian):

    magic  4s     b"PAMN" (noise coefficients) or b"PAMG" (grid values)
    ver    u4     format version
    d      u4     dimension
    L, h, eps     f8
    seed   i8
    k_max  i8     largest mode index (noise) or points per axis (grid)
    center d*f8
    count  u8     number of payload records
    payload       noise: count*d i8 modes then count f8 coefficients
                  grid:  count f8 values in C order
"""
from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .noise_field import GridField, LatticeBox, NoiseField, make_box

VERSION = 1
_HEAD = struct.Struct("<4sII3dqq")


class FormatError(ValueError):
    pass


def _header(magic, box: LatticeBox, eps: float, seed: int, k: int, count: int) -> bytes:
    return (_HEAD.pack(magic, VERSION, box.dim, box.side, box.spacing, eps, seed, k)
            + np.asarray(box.center, dtype="<f8").tobytes()
            + struct.pack("<Q", count))


def _read_header(buf: bytes, magic: bytes):
    if len(buf) < _HEAD.size:
        raise FormatError("truncated header")
    got, ver, d, L, h, eps, seed, k = _HEAD.unpack_from(buf, 0)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if ver != VERSION:
        raise FormatError(f"unsupported version {ver}")
    off = _HEAD.size
    center = tuple(np.frombuffer(buf, dtype="<f8", count=d, offset=off).tolist())
    off += 8 * d
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    return make_box(center, L, h, d), eps, seed, k, count, off


def noise_to_bytes(nf: NoiseField) -> bytes:
    n = len(nf.coeffs)
    return (_header(b"PAMN", nf.box, nf.epsilon, nf.seed, nf.k_max, n)
            + np.asarray(nf.modes, dtype="<i8").tobytes()
            + np.asarray(nf.coeffs, dtype="<f8").tobytes())


def noise_from_bytes(buf: bytes) -> NoiseField:
    box, eps, seed, _, n, off = _read_header(buf, b"PAMN")
    d = box.dim
    need = off + 8 * n * d + 8 * n
    if len(buf) != need:
        raise FormatError(f"payload size {len(buf)} != {need}")
    modes = np.frombuffer(buf, dtype="<i8", count=n * d, offset=off).reshape(n, d).astype(np.int64)
    coeffs = np.frombuffer(buf, dtype="<f8", count=n, offset=off + 8 * n * d).astype(float)
    return NoiseField(box, eps, seed, modes, coeffs)


def grid_to_bytes(f: GridField, eps: float = 0.0, seed: int = 0) -> bytes:
    v = np.ascontiguousarray(f.values, dtype="<f8")
    return _header(b"PAMG", f.box, eps, seed, f.box.m, v.size) + v.tobytes()


def grid_from_bytes(buf: bytes) -> GridField:
    box, _, _, _, n, off = _read_header(buf, b"PAMG")
    if n != box.n_points or len(buf) != off + 8 * n:
        raise FormatError("grid payload does not match header")
    vals = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(float).reshape(box.shape)
    return GridField(box, vals)


def save_noise(nf: NoiseField, path) -> None:
    Path(path).write_bytes(noise_to_bytes(nf))


def load_noise(path) -> NoiseField:
    return noise_from_bytes(Path(path).read_bytes())


def save_grid(f: GridField, path, eps: float = 0.0, seed: int = 0) -> None:
    Path(path).write_bytes(grid_to_bytes(f, eps, seed))


def load_grid(path) -> GridField:
    return grid_from_bytes(Path(path).read_bytes())


def noise_to_csv(nf: NoiseField) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = nf.box.dim
    w.writerow([f"k{i}" for i in range(d)] + ["coefficient"])
    for k, c in zip(nf.modes, nf.coeffs):
        w.writerow([int(v) for v in k] + [repr(float(c))])
    return buf.getvalue()


def table_csv(columns: Sequence[str], rows: Iterable[Sequence], meta: Optional[dict] = None) -> str:
    """CSV with optional ``# key=value`` metadata lines on top."""
    buf = io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(columns))
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def read_table_csv(text: str):
    meta, lines = {}, []
    for line in text.splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = v
        else:
            lines.append(line)
    rows = list(csv.reader(lines))
    return rows[0], rows[1:], meta


def peak_set_csv(points: np.ndarray, chart_time: bool = False) -> str:
    points = np.atleast_2d(points)
    d = points.shape[1] - (1 if chart_time else 0)
    cols = (["chart_time"] if chart_time else []) + [f"x{i}" for i in range(d)]
    return table_csv(cols, points.tolist())


def ensemble_summary(mean: float, stderr: float, exit_fraction: float, eta: float,
                     residual: float, **extra) -> str:
    rec = {"mean": mean, "stderr": stderr, "exit_fraction": exit_fraction,
           "eta": eta, "residual": residual}
    rec.update(extra)
    return json.dumps(rec, indent=2, sort_keys=True, default=float)
