"""Binary instance files.

Layout: the 8-byte magic ``SSMAMP01``, ``u32 rows``, ``u32 cols`` (little-endian),
then ``rows*cols`` little-endian float64 values in row-major order. Vectors use
the same layout with one column.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .. import rmt
from ..prior import Prior
from ..solver import ProblemInstance

MAGIC = b"SSMAMP01"
_HEADER = struct.Struct("<8sII")
MATRIX_FILE = "A.ssm"
VECTOR_FILES = {"y": "y.ssm", "x": "x.ssm", "noise": "noise.ssm"}
META_FILE = "instance.json"
ORTHOGONALITY_TOL = 1e-8


class InstanceIOError(OSError):
    """Read/write failure; the message always names the file."""


def write_matrix(path, arr) -> None:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("only matrices and vectors can be written")
    rows, cols = arr.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, rows, cols))
            fh.write(np.ascontiguousarray(arr).tobytes())
    except OSError as exc:
        raise InstanceIOError(f"{path}: {exc.strerror or exc}") from exc


def read_matrix(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InstanceIOError(f"{path}: {exc.strerror or exc}") from exc
    if len(raw) < _HEADER.size:
        raise InstanceIOError(f"{path}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InstanceIOError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(raw) != expected:
        raise InstanceIOError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(float)


def write_vector(path, vec) -> None:
    write_matrix(path, np.asarray(vec, dtype=float).reshape(-1))


def read_vector(path) -> np.ndarray:
    arr = read_matrix(path)
    if arr.shape[1] != 1:
        raise InstanceIOError(f"{path}: expected one column, found {arr.shape[1]}")
    return arr[:, 0].copy()


def write_instance(directory, instance: ProblemInstance, prior: Prior, noise=None,
                   extra: dict | None = None) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InstanceIOError(f"{directory}: {exc.strerror or exc}") from exc
    write_matrix(directory / MATRIX_FILE, instance.a.a)
    write_vector(directory / VECTOR_FILES["y"], instance.y)
    if instance.x_true is not None:
        write_vector(directory / VECTOR_FILES["x"], instance.x_true)
    if noise is not None:
        write_vector(directory / VECTOR_FILES["noise"], noise)
    meta = {"ensemble": instance.ensemble.to_dict(), "prior": prior.to_dict(),
            "xi": instance.xi, "n_rows": instance.a.n_rows, "n_cols": instance.n_cols}
    meta.update(extra or {})
    try:
        (directory / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    except OSError as exc:
        raise InstanceIOError(f"{directory / META_FILE}: {exc.strerror or exc}") from exc
    return directory


def read_instance(directory, check: bool = True) -> tuple[ProblemInstance, Prior, dict]:
    """Load an instance directory. With ``check`` the row-orthogonal ``A A^T = I/alpha`` is verified."""
    directory = Path(directory)
    try:
        meta = json.loads((directory / META_FILE).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InstanceIOError(f"{directory / META_FILE}: {exc}") from exc
    ens = rmt.EnsembleSpec.from_dict(meta["ensemble"])
    prior = Prior.from_dict(meta["prior"])
    a = read_matrix(directory / MATRIX_FILE)
    y = read_vector(directory / VECTOR_FILES["y"])
    x_path = directory / VECTOR_FILES["x"]
    x = read_vector(x_path) if x_path.exists() else None
    if check and ens.kind is rmt.EnsembleKind.ROW_ORTHOGONAL:
        gap = np.abs(a @ a.T - np.eye(a.shape[0]) / ens.alpha).max()
        if gap > ORTHOGONALITY_TOL:
            raise InstanceIOError(f"{directory / MATRIX_FILE}: A A^T deviates from I/alpha by {gap:.3g}")
    mat = rmt.SensingMatrix(a=a, ensemble=ens, seed=meta.get("seed"))
    return ProblemInstance(a=mat, y=y, xi=float(meta["xi"]), x_true=x), prior, meta
