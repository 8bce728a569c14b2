"""Field dump format and CSV export.

Binary layout: a 16-byte header -- magic ``SGF1``, u32 N, u32 component
count, 4 reserved zero bytes, all little-endian -- followed by the samples
as row-major float64. Component count is 1 for scalars, 2 for vectors,
4 for matrices (row-major within the 2x2 block).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import Grid, MatrixField2D, ScalarField2D, VectorField2D

MAGIC = b"SGF1"
_HEADER = struct.Struct("<4sII4x")  # 16 bytes


def _as_components(field) -> np.ndarray:
    v = field.values
    if isinstance(field, ScalarField2D):
        return v[:, :, None]
    if isinstance(field, VectorField2D):
        return v
    if isinstance(field, MatrixField2D):
        return v.reshape(v.shape[0], v.shape[1], 4)
    raise ConfigError(f"cannot dump object of type {type(field).__name__}")


def save_field(field, path) -> None:
    comps = _as_components(field)
    N = comps.shape[0]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, N, comps.shape[2]))
        fh.write(np.ascontiguousarray(comps, dtype="<f8").tobytes())


def load_field_values(path) -> np.ndarray:
    """Read a dump; returns the raw (N, N, components) array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ConfigError(f"{path}: truncated field dump")
    magic, N, ncomp = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    expect = _HEADER.size + 8 * N * N * ncomp
    if len(raw) != expect:
        raise ConfigError(
            f"{path}: payload size {len(raw)} does not match header "
            f"(N={N}, components={ncomp}, expected {expect})")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return data.reshape(N, N, ncomp).astype(float)


def load_field(path, grid: Grid):
    """Attach a dump to a grid, restoring the original field rank."""
    vals = load_field_values(path)
    if vals.shape[0] != grid.N:
        raise ConfigError(
            f"{path}: dump resolution {vals.shape[0]} != grid N {grid.N}")
    ncomp = vals.shape[2]
    if ncomp == 1:
        return ScalarField2D(grid, vals[:, :, 0])
    if ncomp == 2:
        return VectorField2D(grid, vals)
    if ncomp == 4:
        return MatrixField2D(grid, vals.reshape(grid.N, grid.N, 2, 2))
    raise ConfigError(f"{path}: unsupported component count {ncomp}")


def field_to_csv(field, path) -> None:
    """Plain-text export (x, y, c0[, c1...]) for ad-hoc plotting."""
    comps = _as_components(field)
    g = field.grid
    ncomp = comps.shape[2]
    header = "x,y," + ",".join(f"c{i}" for i in range(ncomp))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i in range(g.N):
            for j in range(g.N):
                row = [g.X[i, j], g.Y[i, j]] + list(comps[i, j])
                fh.write(",".join("%.17g" % v for v in row) + "\n")
