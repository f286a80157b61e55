"""Rectangular grids, scalar fields on them, and the FGF1 field-file format.

Everything downstream (stencils, sources, the network, the quadrature
solver) works on nodes

    x_ij = (x0 + i*h1, y0 + j*h2),   0 <= i < n, 0 <= j < m,

with h1 = L1/(n-1), h2 = L2/(m-1), so node (0,0) and node (n-1,m-1) are
opposite corners of the domain. Field values are float64 arrays of shape
(n, m) indexed values[i, j]. Discrete errors use the mesh-weighted norm
e2 = sqrt(h1*h2 * sum((a-b)**2)).
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

FGF1_MAGIC = "FGF1"


@dataclass(frozen=True)
class RectDomain:
    """Axis-aligned rectangle [x0, x0+L1] x [y0, y0+L2]."""

    x0: float
    y0: float
    L1: float
    L2: float

    def __post_init__(self):
        if not (np.isfinite(self.x0) and np.isfinite(self.y0)):
            raise ValueError("domain origin must be finite")
        if not (self.L1 > 0 and self.L2 > 0):
            raise ValueError(f"domain side lengths must be positive, got {self.L1}, {self.L2}")


@dataclass(frozen=True)
class Grid:
    """Uniform tensor-product grid over a RectDomain.

    n, m are node counts (not cell counts) along x1 and x2; both >= 3 so
    there is at least one interior node.
    """

    domain: RectDomain
    n: int
    m: int

    def __post_init__(self):
        if self.n < 3 or self.m < 3:
            raise ValueError(f"need n, m >= 3, got n={self.n}, m={self.m}")

    @property
    def h1(self) -> float:
        return self.domain.L1 / (self.n - 1)

    @property
    def h2(self) -> float:
        return self.domain.L2 / (self.m - 1)

    def x1(self) -> np.ndarray:
        """Node coordinates along the first axis, shape (n,)."""
        return self.domain.x0 + self.h1 * np.arange(self.n)

    def x2(self) -> np.ndarray:
        """Node coordinates along the second axis, shape (m,)."""
        return self.domain.y0 + self.h2 * np.arange(self.m)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate fields X1, X2 of shape (n, m), X1[i, j] = x1 of node (i, j)."""
        return np.meshgrid(self.x1(), self.x2(), indexing="ij")

    def node(self, i: int, j: int) -> tuple[float, float]:
        if not (0 <= i < self.n and 0 <= j < self.m):
            raise IndexError(f"node ({i}, {j}) outside {self.n}x{self.m} grid")
        return (self.domain.x0 + i * self.h1, self.domain.y0 + j * self.h2)


def build_grid(domain: RectDomain, n: int, m: int) -> Grid:
    return Grid(domain, n, m)


@dataclass
class Field:
    """A float64 scalar field sampled on every node of a grid."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n, self.grid.m):
            raise ValueError(f"field shape {v.shape} does not match grid ({self.grid.n}, {self.grid.m})")
        if not np.all(np.isfinite(v)):
            raise ValueError("field contains non-finite values")
        self.values = v

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())


def zeros_field(grid: Grid) -> Field:
    return Field(grid, np.zeros((grid.n, grid.m)))


def field_from_function(grid: Grid, f) -> Field:
    """Sample f(x1, x2) (vectorized over coordinate arrays) on every node."""
    X1, X2 = grid.mesh()
    vals = np.broadcast_to(np.asarray(f(X1, X2), dtype=np.float64), (grid.n, grid.m))
    return Field(grid, vals.copy())


def l2_error(a: Field, b: Field) -> float:
    """Mesh-weighted l2 distance sqrt(h1*h2*sum((a-b)^2)) between two fields."""
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")
    d = a.values - b.values
    return float(np.sqrt(a.grid.h1 * a.grid.h2 * np.sum(d * d)))


def l2_norm(a: Field) -> float:
    g = a.grid
    return float(np.sqrt(g.h1 * g.h2 * np.sum(a.values * a.values)))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write data to path via a same-directory temp file and rename.

    Readers never observe a partially written file.
    """
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_field(path: str | os.PathLike, f: Field) -> None:
    """Write a field in the FGF1 format.

    One ASCII header line "FGF1 <n> <m> <x0> <y0> <L1> <L2>\\n" (floats in
    repr form so they round-trip exactly), then n*m little-endian float64
    with the i index fastest. The write is atomic.
    """
    g = f.grid
    header = (
        f"{FGF1_MAGIC} {g.n} {g.m} {g.domain.x0!r} {g.domain.y0!r} "
        f"{g.domain.L1!r} {g.domain.L2!r}\n"
    )
    payload = f.values.ravel(order="F").astype("<f8").tobytes()
    atomic_write_bytes(path, header.encode("ascii") + payload)


def read_field(path: str | os.PathLike) -> Field:
    """Read an FGF1 file back into a Field. Refuses malformed or truncated files."""
    with open(path, "rb") as fh:
        header = fh.readline(4096)
        if not header.endswith(b"\n"):
            raise ValueError(f"{path}: missing FGF1 header line")
        parts = header.decode("ascii", errors="replace").split()
        if len(parts) != 7 or parts[0] != FGF1_MAGIC:
            raise ValueError(f"{path}: not an FGF1 file")
        try:
            n, m = int(parts[1]), int(parts[2])
            x0, y0, L1, L2 = (float(p) for p in parts[3:7])
        except ValueError as exc:
            raise ValueError(f"{path}: bad FGF1 header: {exc}") from None
        raw = fh.read(8 * n * m + 1)
    if len(raw) != 8 * n * m:
        raise ValueError(f"{path}: expected {8*n*m} payload bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8").reshape((n, m), order="F")
    grid = Grid(RectDomain(x0, y0, L1, L2), n, m)
    return Field(grid, vals.astype(np.float64))
