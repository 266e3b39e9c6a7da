"""Uniform tensor grids and the discrete calculus every other module lives on.

Conventions, fixed here once:

* Dimension d is 2 or 3 and the spacing h is the same on every axis.
* Scalars are vertex-sampled, vectors and matrices are cell-sampled.  Axis 0
  of a value array is the x1 (interface-normal) direction.
* The per-cell gradient is the cell average of the Q1 element gradient; it is
  exact for affine functions.
* discrete_divergence is minus the transpose of discrete_gradient, so
  summation by parts holds to machine precision regardless of boundary kind.
* Ball averages collect cells whose center lies strictly inside the ball;
  the O(h) error of that membership rule is accepted throughout.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfDomainError, StructuralError

PERIODIC = "periodic"
DIRICHLET = "dirichlet-box"


@dataclass(frozen=True)
class Grid:
    """Uniform structured grid on a box, periodic or Dirichlet per axis.

    cells     -- number of cells per axis (>= 4 each)
    h         -- spacing, identical on all axes
    origin    -- coordinates of vertex (0, ..., 0)
    periodic  -- boundary kind per axis (True = periodic wrap)
    """

    cells: tuple
    h: float
    origin: tuple
    periodic: tuple

    def __post_init__(self):
        cells = tuple(int(n) for n in self.cells)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "periodic", tuple(bool(p) for p in self.periodic))
        object.__setattr__(self, "h", float(self.h))
        d = len(cells)
        if d not in (2, 3):
            raise StructuralError(f"dimension must be 2 or 3, got {d}")
        if len(self.origin) != d or len(self.periodic) != d:
            raise StructuralError("origin/periodic length must match dimension")
        if any(n < 4 for n in cells):
            raise StructuralError(f"need at least 4 cells per axis, got {cells}")
        if not self.h > 0:
            raise StructuralError(f"spacing must be positive, got {self.h}")

    @property
    def dim(self):
        return len(self.cells)

    @property
    def extent(self):
        return tuple(n * self.h for n in self.cells)

    @property
    def node_shape(self):
        return tuple(n if p else n + 1 for n, p in zip(self.cells, self.periodic))

    @property
    def cell_volume(self):
        return self.h ** self.dim

    def node_coords(self, axis):
        """Vertex coordinates along one axis (wrapped axes omit the far end)."""
        n = self.node_shape[axis]
        return self.origin[axis] + self.h * np.arange(n)

    def cell_coords(self, axis):
        """Cell-center coordinates along one axis."""
        return self.origin[axis] + self.h * (np.arange(self.cells[axis]) + 0.5)

    def axis_view(self, values_1d, axis):
        """Reshape a per-axis 1d array for broadcasting over the grid."""
        shape = [1] * self.dim
        shape[axis] = len(values_1d)
        return values_1d.reshape(shape)

    def face_aligned(self, coordinate, axis=0):
        """True when a hyperplane {x_axis = coordinate} lies on a cell face."""
        ratio = (coordinate - self.origin[axis]) / self.h
        return abs(ratio - round(ratio)) < 1e-9

    def contains_ball(self, center, radius):
        for k in range(self.dim):
            if self.periodic[k]:
                if 2.0 * radius > self.extent[k]:
                    return False
            else:
                lo = self.origin[k]
                hi = self.origin[k] + self.extent[k]
                if center[k] - radius < lo - 1e-12 or center[k] + radius > hi + 1e-12:
                    return False
        return True


def _as_values(grid, values, tail):
    arr = np.asarray(values, dtype=np.float64)
    want = tuple(tail)
    if arr.shape != want:
        raise StructuralError(f"field shape {arr.shape} does not match {want}")
    if not np.all(np.isfinite(arr)):
        raise StructuralError("field contains non-finite values")
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ScalarField:
    """Vertex-sampled scalar (solutions, correctors, potentials)."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(
            self, "values", _as_values(self.grid, self.values, self.grid.node_shape)
        )


@dataclass(frozen=True)
class VectorField:
    """Cell-sampled d-vector (gradients, divergence-form data)."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = self.grid.cells + (self.grid.dim,)
        object.__setattr__(self, "values", _as_values(self.grid, self.values, shape))


@dataclass(frozen=True)
class MatrixField:
    """Cell-sampled d x d matrix (coefficient fields)."""

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = self.grid.dim
        shape = self.grid.cells + (d, d)
        object.__setattr__(self, "values", _as_values(self.grid, self.values, shape))


def same_grid(*fields):
    grids = {f.grid for f in fields}
    if len(grids) != 1:
        raise StructuralError("fields live on different grids")
    return fields[0].grid


def _corners(d):
    return list(itertools.product((0, 1), repeat=d))


def gather_corner_values(node_values, cells, periodic):
    """Stack the 2^d corner values of every cell: shape cells + (2^d,).

    Works on raw arrays so solver internals can reuse it on coarse levels.
    """
    d = len(cells)
    cols = []
    for corner in _corners(d):
        out = node_values
        for axis, c in enumerate(corner):
            if periodic[axis]:
                if c:
                    out = np.roll(out, -1, axis=axis)
            else:
                sl = [slice(None)] * out.ndim
                sl[axis] = slice(c, c + cells[axis])
                out = out[tuple(sl)]
        cols.append(out)
    return np.stack(cols, axis=-1)


def scatter_corner_values(contributions, cells, periodic):
    """Adjoint of gather_corner_values: accumulate corner values at nodes.

    contributions has shape cells + (2^d,).
    """
    d = len(cells)
    node_shape = tuple(n if p else n + 1 for n, p in zip(cells, periodic))
    out = np.zeros(node_shape)
    for idx, corner in enumerate(_corners(d)):
        part = contributions[..., idx]
        for axis, c in enumerate(corner):
            if periodic[axis] and c:
                part = np.roll(part, 1, axis=axis)
        sl = []
        for axis, c in enumerate(corner):
            if periodic[axis]:
                sl.append(slice(None))
            else:
                sl.append(slice(c, c + cells[axis]))
        out[tuple(sl)] += part
    return out


def gather_corners(u):
    """Stack the 2^d corner values of every cell of a scalar field."""
    return gather_corner_values(u.values, u.grid.cells, u.grid.periodic)


def scatter_corners(grid, contributions):
    """Adjoint of gather_corners on a grid's node set."""
    return scatter_corner_values(contributions, grid.cells, grid.periodic)


def values_at_cells(u):
    """Scalar field interpolated to cell centers (mean of the 2^d corners)."""
    return gather_corners(u).mean(axis=-1)


def discrete_gradient(u):
    """Cell-averaged Q1 gradient of a vertex-sampled scalar."""
    if not isinstance(u, ScalarField):
        raise StructuralError("discrete_gradient expects a ScalarField")
    grid = u.grid
    d = grid.dim
    corners = _corners(d)
    stacked = gather_corners(u)
    out = np.empty(grid.cells + (d,))
    for k in range(d):
        pos = [i for i, c in enumerate(corners) if c[k] == 1]
        neg = [i for i, c in enumerate(corners) if c[k] == 0]
        out[..., k] = (stacked[..., pos].sum(axis=-1) - stacked[..., neg].sum(axis=-1))
        out[..., k] /= (2 ** (d - 1)) * grid.h
    return VectorField(grid, out)


def discrete_divergence(v):
    """Minus the transpose of discrete_gradient, node-sampled.

    With uniform h^d weights on both sides, <grad u, v> = -<u, div v> holds to
    machine precision by construction; on Dirichlet axes the boundary rows are
    the half-stencil transpose values.
    """
    if not isinstance(v, VectorField):
        raise StructuralError("discrete_divergence expects a VectorField")
    grid = v.grid
    d = grid.dim
    corners = _corners(d)
    w = 1.0 / ((2 ** (d - 1)) * grid.h)
    contrib = np.zeros(grid.cells + (2 ** d,))
    for idx, corner in enumerate(corners):
        acc = np.zeros(grid.cells)
        for k in range(d):
            sign = 1.0 if corner[k] == 1 else -1.0
            acc += sign * v.values[..., k]
        contrib[..., idx] = acc * w
    return ScalarField(grid, -scatter_corners(grid, contrib))


def _minimum_image(delta, extent, periodic):
    if periodic:
        return delta - extent * np.round(delta / extent)
    return delta


def ball_cell_mask(grid, center, radius):
    """Boolean mask of cells whose center lies strictly inside B(center, radius)."""
    if len(center) != grid.dim:
        raise StructuralError("center dimension mismatch")
    if not grid.contains_ball(center, radius):
        raise OutOfDomainError(
            f"ball B({tuple(center)}, {radius}) escapes the grid extent"
        )
    dist2 = np.zeros(grid.cells)
    for k in range(grid.dim):
        delta = grid.cell_coords(k) - center[k]
        delta = _minimum_image(delta, grid.extent[k], grid.periodic[k])
        dist2 = dist2 + grid.axis_view(delta, k) ** 2
    return dist2 < radius * radius


def ball_node_mask(grid, center, radius):
    """Boolean mask of vertices strictly inside B(center, radius)."""
    if not grid.contains_ball(center, radius):
        raise OutOfDomainError(
            f"ball B({tuple(center)}, {radius}) escapes the grid extent"
        )
    shape = grid.node_shape
    dist2 = np.zeros(shape)
    for k in range(grid.dim):
        delta = grid.node_coords(k) - center[k]
        delta = _minimum_image(delta, grid.extent[k], grid.periodic[k])
        view = [1] * grid.dim
        view[k] = shape[k]
        dist2 = dist2 + delta.reshape(view) ** 2
    return dist2 < radius * radius


def ball_average(f, center, radius):
    """Mean over cells with center inside the ball.

    Scalar fields are first interpolated to cell centers; vector and matrix
    fields are averaged componentwise.  Returns a float, a (d,) vector or a
    (d, d) matrix accordingly.
    """
    grid = f.grid
    mask = ball_cell_mask(grid, center, radius)
    count = int(mask.sum())
    if count == 0:
        raise OutOfDomainError("ball contains no cell centers; radius below grid scale")
    if isinstance(f, ScalarField):
        return float(values_at_cells(f)[mask].mean())
    if isinstance(f, (VectorField, MatrixField)):
        return f.values[mask].mean(axis=0)
    raise StructuralError(f"unsupported field type {type(f)!r}")


def node_meshgrid(grid):
    """Vertex coordinate arrays, one per axis, broadcastable to node_shape."""
    out = []
    for k in range(grid.dim):
        coords = grid.node_coords(k)
        view = [1] * grid.dim
        view[k] = len(coords)
        out.append(coords.reshape(view))
    return out


def cell_meshgrid(grid):
    """Cell-center coordinate arrays, one per axis, broadcastable to cells."""
    return [grid.axis_view(grid.cell_coords(k), k) for k in range(grid.dim)]


def nearest_node(grid, point):
    """Index of the vertex closest to a point (ties round half up)."""
    idx = []
    for k in range(grid.dim):
        i = int(np.floor((point[k] - grid.origin[k]) / grid.h + 0.5))
        n = grid.node_shape[k]
        if grid.periodic[k]:
            i %= grid.cells[k]
        elif i < 0 or i >= n:
            raise OutOfDomainError(f"point {tuple(point)} outside the grid")
        idx.append(i)
    return tuple(idx)


_SAMPLE_KIND = {ScalarField: "vertex", VectorField: "cell-vector", MatrixField: "cell-matrix"}


def write_field(f, path):
    """Dump a field: one JSON header line, then row-major little-endian f64."""
    kind = _SAMPLE_KIND.get(type(f))
    if kind is None:
        raise StructuralError(f"cannot dump field of type {type(f)!r}")
    grid = f.grid
    header = {
        "dimension": grid.dim,
        "cells": list(grid.cells),
        "extent": list(grid.extent),
        "origin": list(grid.origin),
        "periodic": list(grid.periodic),
        "sample": kind,
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_field(path):
    """Inverse of write_field."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        raw = fh.read()
    grid = Grid(
        cells=tuple(header["cells"]),
        h=header["extent"][0] / header["cells"][0],
        origin=tuple(header["origin"]),
        periodic=tuple(header["periodic"]),
    )
    kind = header["sample"]
    d = grid.dim
    if kind == "vertex":
        shape, cls = grid.node_shape, ScalarField
    elif kind == "cell-vector":
        shape, cls = grid.cells + (d,), VectorField
    elif kind == "cell-matrix":
        shape, cls = grid.cells + (d, d), MatrixField
    else:
        raise StructuralError(f"unknown sample kind {kind!r}")
    data = np.frombuffer(raw, dtype="<f8")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise StructuralError(
            f"payload holds {data.size} values, header implies {expected}"
        )
    return cls(grid, data.reshape(shape).astype(np.float64))
