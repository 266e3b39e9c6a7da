"""Assemble and solve -div(a grad u) = f + div(g) on periodic or Dirichlet boxes.

Discretization: Q1 elements with the coefficient frozen at the cell center.
Element integrals of basis gradients are exact, so the operator has no
spurious (hourglass) null modes; the divergence-form load is paired with the
cell-averaged test gradient, which keeps the discrete energy estimate exact
for the cell-averaged gradient norm.

Krylov solvers come from scipy (CG for symmetric coefficients, BiCGStab
otherwise).  Preconditioners: diagonal, SSOR (assembled, small grids), and a
matrix-free geometric multigrid V-cycle with rediscretized coarse operators,
which is what makes the large acceptance runs fit their wall-clock budgets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    CertificationError,
    CompatibilityError,
    ConfigError,
    SolverError,
    StructuralError,
)
from .grid import (
    MatrixField,
    ScalarField,
    VectorField,
    _corners,
    ball_average,
    discrete_divergence,
    discrete_gradient,
    gather_corner_values,
    node_meshgrid,
    scatter_corner_values,
)

PRECONDITIONERS = ("diagonal", "ssor", "geometric-multigrid", "auto")

# SSOR needs an assembled matrix; past this node count demand multigrid.
_SSOR_NODE_LIMIT = 400_000
_COARSE_NODE_LIMIT = 1200


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-10
    max_iterations: int = 10_000
    preconditioner: str = "auto"
    mean_zero: bool = True

    def __post_init__(self):
        if not (0.0 < self.tolerance < 1.0):
            raise ConfigError(f"tolerance must be in (0,1), got {self.tolerance}")
        if self.max_iterations < 1:
            raise ConfigError("max iterations must be >= 1")
        if self.preconditioner not in PRECONDITIONERS:
            raise ConfigError(
                f"preconditioner must be one of {PRECONDITIONERS},"
                f" got {self.preconditioner!r}"
            )


@dataclass(frozen=True)
class BoundaryData:
    """Boundary kind plus, for Dirichlet boxes, the trace at boundary nodes.

    trace is a full node array whose interior entries are ignored; None means
    a zero trace.
    """

    kind: str
    trace: np.ndarray | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("periodic", "dirichlet"):
            raise StructuralError(f"unknown boundary kind {self.kind!r}")
        if self.trace is not None:
            arr = np.asarray(self.trace, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise StructuralError("boundary trace contains non-finite values")
            object.__setattr__(self, "trace", arr)

    @staticmethod
    def periodic():
        return BoundaryData("periodic")

    @staticmethod
    def dirichlet(trace=None):
        return BoundaryData("dirichlet", trace)


@lru_cache(maxsize=32)
def element_matrices(d, h):
    """Exact Q1 integrals E[k,l][i,j] = int_cell d_k phi_i d_l phi_j over [0,h]^d.

    Corner order matches grid._corners.  Closed forms from the 1d factors
    mass, stiffness and first-derivative coupling.
    """
    mass = h * np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    stiff = (1 / h) * np.array([[1.0, -1.0], [-1.0, 1.0]])
    deriv = np.array([[-0.5, -0.5], [0.5, 0.5]])  # int psi'_i psi_j, h-free
    corners = _corners(d)
    m = len(corners)
    E = np.zeros((d, d, m, m))
    for k in range(d):
        for l in range(d):
            for i, ci in enumerate(corners):
                for j, cj in enumerate(corners):
                    val = 1.0
                    for axis in range(d):
                        if axis == k == l:
                            val *= stiff[ci[axis], cj[axis]]
                        elif axis == k:
                            val *= deriv[ci[axis], cj[axis]]
                        elif axis == l:
                            val *= deriv[cj[axis], ci[axis]]
                        else:
                            val *= mass[ci[axis], cj[axis]]
                    E[k, l, i, j] = val
    E.flags.writeable = False
    return E


class Stiffness:
    """Matrix-free action of the free (no-boundary-condition) Q1 stiffness.

    acoef is None for the identity coefficient (plain Laplacian), which uses a
    single constant element matrix instead of the d*d coefficient loop.
    """

    def __init__(self, cells, periodic, h, acoef=None):
        self.cells = tuple(cells)
        self.periodic = tuple(periodic)
        self.h = float(h)
        self.d = len(self.cells)
        self.acoef = acoef
        self.elem = element_matrices(self.d, self.h)
        self.node_shape = tuple(
            n if p else n + 1 for n, p in zip(self.cells, self.periodic)
        )
        if acoef is None:
            self._laplace_elem = self.elem.trace(axis1=0, axis2=1)  # sum_k E[k,k]
        else:
            want = self.cells + (self.d, self.d)
            if acoef.shape != want:
                raise StructuralError(
                    f"coefficient shape {acoef.shape} != {want}"
                )

    def apply(self, u):
        """Free stiffness action on a full node array."""
        u = np.asarray(u, dtype=np.float64)
        corners = gather_corner_values(u, self.cells, self.periodic)
        flat = corners.reshape(-1, corners.shape[-1])
        if self.acoef is None:
            out = flat @ self._laplace_elem.T
        else:
            out = np.zeros_like(flat)
            aflat = self.acoef.reshape(-1, self.d, self.d)
            for k in range(self.d):
                for l in range(self.d):
                    akl = aflat[:, k, l]
                    if not akl.any():
                        continue
                    out += akl[:, None] * (flat @ self.elem[k, l].T)
        return scatter_corner_values(
            out.reshape(corners.shape), self.cells, self.periodic
        )

    def diagonal(self):
        """Diagonal of the free stiffness, as a node array."""
        m = 2 ** self.d
        if self.acoef is None:
            per_corner = np.broadcast_to(
                np.diagonal(self._laplace_elem), self.cells + (m,)
            )
        else:
            diag_elems = np.stack(
                [np.diagonal(self.elem[k, l]) for k in range(self.d) for l in range(self.d)]
            ).reshape(self.d, self.d, m)
            per_corner = np.einsum(
                "...kl,klm->...m", self.acoef, diag_elems, optimize=True
            )
        return scatter_corner_values(per_corner, self.cells, self.periodic)

    def coarsen(self):
        """One level down: cells halved, coefficient cell-block averaged."""
        if any(c % 2 for c in self.cells) or any(c < 4 for c in self.cells):
            return None
        new_cells = tuple(c // 2 for c in self.cells)
        if self.acoef is None:
            acoarse = None
        else:
            shape = []
            for c in new_cells:
                shape.extend((c, 2))
            shape.extend((self.d, self.d))
            blocks = self.acoef.reshape(shape)
            acoarse = blocks.mean(axis=tuple(range(1, 2 * self.d, 2)))
        return Stiffness(new_cells, self.periodic, 2.0 * self.h, acoarse)


def boundary_mask(cells, periodic):
    """True at nodes pinned by a Dirichlet box boundary."""
    node_shape = tuple(n if p else n + 1 for n, p in zip(cells, periodic))
    mask = np.zeros(node_shape, dtype=bool)
    for axis, p in enumerate(periodic):
        if p:
            continue
        sl = [slice(None)] * len(cells)
        sl[axis] = 0
        mask[tuple(sl)] = True
        sl[axis] = node_shape[axis] - 1
        mask[tuple(sl)] = True
    return mask


def _prolong(coarse, fine_shape, periodic):
    """d-linear interpolation from the coarse vertex grid to the fine one."""
    out = coarse
    for axis, p in enumerate(periodic):
        n_f = fine_shape[axis]
        shape = list(out.shape)
        shape[axis] = n_f
        nxt = np.empty(shape)
        even = [slice(None)] * out.ndim
        odd = [slice(None)] * out.ndim
        even[axis] = slice(0, n_f, 2)
        odd[axis] = slice(1, n_f, 2)
        nxt[tuple(even)] = out
        if p:
            nxt[tuple(odd)] = 0.5 * (out + np.roll(out, -1, axis=axis))
        else:
            lo = [slice(None)] * out.ndim
            hi = [slice(None)] * out.ndim
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            nxt[tuple(odd)] = 0.5 * (out[tuple(lo)] + out[tuple(hi)])
        out = nxt
    return out


def _restrict(fine, coarse_shape, periodic):
    """Transpose of _prolong (functional restriction, no extra scaling)."""
    out = fine
    for axis in reversed(range(len(periodic))):
        p = periodic[axis]
        n_c = coarse_shape[axis]
        shape = list(out.shape)
        shape[axis] = n_c
        nxt = np.zeros(shape)
        even = [slice(None)] * out.ndim
        odd = [slice(None)] * out.ndim
        even[axis] = slice(0, out.shape[axis], 2)
        odd[axis] = slice(1, out.shape[axis], 2)
        evens = out[tuple(even)]
        odds = out[tuple(odd)]
        nxt += evens
        if p:
            half = 0.5 * odds
            nxt += half
            nxt += np.roll(half, 1, axis=axis)
        else:
            lo = [slice(None)] * out.ndim
            hi = [slice(None)] * out.ndim
            lo[axis] = slice(0, n_c - 1)
            hi[axis] = slice(1, n_c)
            nxt[tuple(lo)] += 0.5 * odds
            nxt[tuple(hi)] += 0.5 * odds
        out = nxt
    return out


class Multigrid:
    """Symmetric V-cycle: damped Jacobi smoothing, dense coarse solve."""

    def __init__(self, stiffness, mean_zero, omega=0.7, sweeps=2):
        self.levels = [stiffness]
        while int(np.prod(self.levels[-1].node_shape)) > _COARSE_NODE_LIMIT:
            nxt = self.levels[-1].coarsen()
            if nxt is None:
                break
            self.levels.append(nxt)
        self.mean_zero = mean_zero
        self.omega = omega
        self.sweeps = sweeps
        self.masks = [
            None if all(lvl.periodic) else boundary_mask(lvl.cells, lvl.periodic)
            for lvl in self.levels
        ]
        self.diags = []
        for lvl, mask in zip(self.levels, self.masks):
            diag = lvl.diagonal()
            if mask is not None:
                diag[mask] = 1.0
            self.diags.append(diag)
        self._coarse = None

    @property
    def usable(self):
        if len(self.levels) > 1:
            return True
        # single-level fallback: the dense coarse solve still works on small grids
        return int(np.prod(self.levels[0].node_shape)) <= _COARSE_NODE_LIMIT

    def _apply_level(self, i, u):
        mask = self.masks[i]
        if mask is not None:
            u = np.where(mask, 0.0, u)
        out = self.levels[i].apply(u)
        if mask is not None:
            out[mask] = 0.0
        if self.mean_zero:
            out -= out.mean()
        return out

    def _coarse_solve(self, b):
        i = len(self.levels) - 1
        if self._coarse is None:
            n = int(np.prod(self.levels[i].node_shape))
            cols = np.empty((n, n))
            basis = np.zeros(n)
            for j in range(n):
                basis[j] = 1.0
                cols[:, j] = self._apply_level(
                    i, basis.reshape(self.levels[i].node_shape)
                ).ravel()
                basis[j] = 0.0
            self._coarse = np.linalg.pinv(cols, rcond=1e-12)
        return (self._coarse @ b.ravel()).reshape(b.shape)

    def _cycle(self, i, b):
        if i == len(self.levels) - 1:
            return self._coarse_solve(b)
        lvl = self.levels[i]
        diag = self.diags[i]
        x = (self.omega / diag) * b
        for _ in range(self.sweeps - 1):
            x += (self.omega / diag) * (b - self._apply_level(i, x))
        r = b - self._apply_level(i, x)
        rc = _restrict(r, self.levels[i + 1].node_shape, lvl.periodic)
        if self.masks[i + 1] is not None:
            rc[self.masks[i + 1]] = 0.0
        if self.mean_zero:
            rc -= rc.mean()
        x += _prolong(self._cycle(i + 1, rc), lvl.node_shape, lvl.periodic)
        if self.masks[i] is not None:
            x[self.masks[i]] = 0.0
        for _ in range(self.sweeps):
            x += (self.omega / diag) * (b - self._apply_level(i, x))
        return x

    def precondition(self, b):
        z = self._cycle(0, b)
        if self.mean_zero:
            z -= z.mean()
        return z


def assemble_sparse(a, periodic=None):
    """Assembled free stiffness as CSR; small and medium grids only.

    a is a MatrixField; node ordering is C order of the node array.
    """
    grid = a.grid
    periodic = grid.periodic if periodic is None else periodic
    d = grid.dim
    node_shape = tuple(n if p else n + 1 for n, p in zip(grid.cells, periodic))
    n_nodes = int(np.prod(node_shape))
    if n_nodes > _SSOR_NODE_LIMIT:
        raise ConfigError(
            f"refusing to assemble {n_nodes} nodes; use the multigrid preconditioner"
        )
    elem = element_matrices(d, grid.h)
    corners = _corners(d)
    cell_idx = np.indices(grid.cells).reshape(d, -1)
    aflat = a.values.reshape(-1, d, d)
    m = len(corners)
    kc = np.einsum("ckl,klij->cij", aflat, elem, optimize=True)

    def node_of(corner):
        idx = np.empty_like(cell_idx)
        for axis in range(d):
            idx[axis] = cell_idx[axis] + corner[axis]
            if periodic[axis]:
                idx[axis] %= grid.cells[axis]
        return np.ravel_multi_index(idx, node_shape)

    node_ids = [node_of(c) for c in corners]
    rows = np.concatenate([np.tile(node_ids[i], m) for i in range(m)])
    cols = np.concatenate([node_ids[j] for i in range(m) for j in range(m)])
    vals = np.concatenate([kc[:, i, j] for i in range(m) for j in range(m)])
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes))
    return mat.tocsr()


def _ssor_apply(mat, diag):
    lower = sp.tril(mat, k=0, format="csr")
    upper = sp.triu(mat, k=0, format="csr")

    def apply(r):
        y = spla.spsolve_triangular(lower, r, lower=True)
        return spla.spsolve_triangular(upper, diag * y, lower=False)

    return apply


def poincare_constant(grid, periodic):
    lmax = max(grid.extent)
    return lmax / (2.0 * math.pi) if periodic else lmax / math.pi


def _ellipticity_lower_bound(acoef):
    """Cheap Gershgorin lower bound on the symmetric-part eigenvalues."""
    sym = 0.5 * (acoef + np.swapaxes(acoef, -1, -2))
    diag = np.diagonal(sym, axis1=-2, axis2=-1)
    off = np.abs(sym).sum(axis=-1) - np.abs(diag)
    return float((diag - off).min())


def _is_symmetric(acoef):
    return bool(np.allclose(acoef, np.swapaxes(acoef, -1, -2), atol=1e-13))


def _krylov(matvec, b, n, M, cfg, symmetric, x0=None):
    op = spla.LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    mop = None if M is None else spla.LinearOperator((n, n), matvec=M, dtype=np.float64)
    iters = [0]

    def count(_):
        iters[0] += 1

    method = spla.cg if symmetric else spla.bicgstab
    try:
        x, info = method(
            op, b, x0=x0, rtol=cfg.tolerance, atol=0.0,
            maxiter=cfg.max_iterations, M=mop, callback=count,
        )
    except TypeError:  # older scipy spells the tolerance 'tol'
        x, info = method(
            op, b, x0=x0, tol=cfg.tolerance, atol=0.0,
            maxiter=cfg.max_iterations, M=mop, callback=count,
        )
    achieved = float(np.linalg.norm(b - matvec(x)) / max(np.linalg.norm(b), 1e-300))
    if info != 0 or achieved > 10 * cfg.tolerance:
        raise SolverError(
            f"linear solve failed (info={info}) after {iters[0]} iterations;"
            f" relative residual {achieved:.3e}",
            residual=achieved,
        )
    return x, iters[0], achieved


def _build_rhs(grid, f, g, f_cells):
    b = np.zeros(grid.node_shape)
    vol = grid.cell_volume
    if f is not None:
        b += vol * f.values
    if f_cells is not None:
        contrib = np.broadcast_to(
            f_cells[..., None] * (vol / 2 ** grid.dim),
            grid.cells + (2 ** grid.dim,),
        )
        b += scatter_corner_values(contrib, grid.cells, grid.periodic)
    if g is not None:
        b += vol * discrete_divergence(g).values
    return b


def _certify_energy(grid, acoef, u_nodes, f, g, periodic, stats):
    lam = _ellipticity_lower_bound(acoef) if acoef is not None else 1.0
    if lam <= 0:
        stats["energy_margin"] = None
        return
    vol = grid.cell_volume
    grad = discrete_gradient(ScalarField(grid, u_nodes)).values
    grad_norm = math.sqrt(float(np.sum(grad * grad)) * vol)
    g_norm = 0.0 if g is None else math.sqrt(float(np.sum(g.values**2)) * vol)
    f_norm = 0.0 if f is None else math.sqrt(float(np.sum(f.values**2)) * vol)
    # continuum Poincare constant with a documented safety factor of 4 to
    # cover lumped-norm slack; this can only fire on a gross solver failure
    bound = (g_norm + 4.0 * poincare_constant(grid, periodic) * f_norm) / lam
    stats["energy_margin"] = grad_norm / bound if bound > 0 else 0.0
    if bound > 0 and grad_norm > bound * (1 + 1e-8):
        raise CertificationError(
            f"energy estimate violated: |grad u| = {grad_norm:.6e} exceeds"
            f" the Lax-Milgram bound {bound:.6e}"
        )


def solve_divergence_form(a, f, g, bc, cfg=None, f_cells=None, stats=None):
    """Q1-Galerkin solution of -div(a grad u) = f + div(g).

    a     -- MatrixField, or None for the identity coefficient
    f     -- ScalarField source (vertex-sampled) or None
    g     -- VectorField divergence-form source (cell-sampled) or None
    bc    -- BoundaryData; periodic solves return the mean-zero representative,
             Dirichlet solves honour bc.trace at boundary nodes
    f_cells -- optional raw cell-sampled source array (used by potential solves)
    stats -- optional dict, filled with iterations/residual/energy margin
    """
    cfg = cfg or SolverConfig()
    stats = stats if stats is not None else {}
    grid = None
    for fld in (a, f, g):
        if fld is not None:
            if grid is None:
                grid = fld.grid
            elif fld.grid != grid:
                raise StructuralError("fields live on different grids")
    if grid is None:
        raise StructuralError("need at least one field to infer the grid")

    periodic = bc.kind == "periodic"
    if periodic and not all(grid.periodic):
        raise StructuralError("periodic boundary data on a non-periodic grid")
    if not periodic and all(grid.periodic):
        raise StructuralError("dirichlet boundary data on a periodic grid")

    if periodic and f is not None:
        mean_f = float(f.values.mean())
        scale = max(float(np.abs(f.values).max()), 1.0)
        if abs(mean_f) > 1e-8 * scale:
            raise CompatibilityError(
                f"periodic problem needs a mean-zero source, got mean {mean_f:.3e}"
            )
    if periodic and f_cells is not None:
        mean_q = float(np.mean(f_cells))
        scale = max(float(np.abs(f_cells).max()), 1.0)
        if abs(mean_q) > 1e-8 * scale:
            raise CompatibilityError(
                f"periodic problem needs a mean-zero cell source, got {mean_q:.3e}"
            )

    acoef = None if a is None else a.values
    stiff = Stiffness(grid.cells, grid.periodic, grid.h, acoef)
    b = _build_rhs(grid, f, g, f_cells)

    mean_zero = periodic and cfg.mean_zero
    mask = None if periodic else boundary_mask(grid.cells, grid.periodic)

    lift = None
    if not periodic:
        lift = np.zeros(grid.node_shape)
        if bc.trace is not None:
            if bc.trace.shape != grid.node_shape:
                raise StructuralError("boundary trace shape mismatch")
            lift[mask] = bc.trace[mask]
        if bc.trace is not None:
            b = b - stiff.apply(lift)
        b[mask] = 0.0
    if mean_zero:
        b -= b.mean()

    def matvec_full(u):
        if mask is not None:
            u = np.where(mask, 0.0, u)
        out = stiff.apply(u)
        if mask is not None:
            out[mask] = 0.0
        if mean_zero:
            out -= out.mean()
        return out

    shape = grid.node_shape
    n = int(np.prod(shape))

    def matvec(x):
        return matvec_full(x.reshape(shape)).ravel()

    kind = cfg.preconditioner
    mg = None
    if kind in ("auto", "geometric-multigrid"):
        mg = Multigrid(stiff, mean_zero)
        if not mg.usable:
            if kind == "geometric-multigrid":
                raise ConfigError(
                    "grid not coarsenable; pick diagonal or ssor preconditioning"
                )
            mg = None
            kind = "diagonal"
        else:
            kind = "geometric-multigrid"

    if kind == "geometric-multigrid":
        def precon(x):
            return mg.precondition(x.reshape(shape)).ravel()
    elif kind == "diagonal":
        diag = stiff.diagonal()
        if mask is not None:
            diag[mask] = 1.0

        def precon(x):
            z = x.reshape(shape) / diag
            if mean_zero:
                z = z - z.mean()
            return z.ravel()
    elif kind == "ssor":
        acoef_eff = acoef
        if acoef_eff is None:
            eye = np.zeros(grid.cells + (grid.dim, grid.dim))
            for k in range(grid.dim):
                eye[..., k, k] = 1.0
            acoef_eff = eye
        mat = assemble_sparse(MatrixField(grid, acoef_eff))
        if mask is not None:
            flat_mask = mask.ravel()
            keep = sp.diags((~flat_mask).astype(float))
            mat = keep @ mat @ keep + sp.diags(flat_mask.astype(float))
        diag = mat.diagonal()
        ssor = _ssor_apply(mat, diag)

        def precon(x):
            z = ssor(x)
            if mean_zero:
                z = z - z.mean()
            return z
    else:  # pragma: no cover - guarded by SolverConfig validation
        raise ConfigError(f"unhandled preconditioner {kind!r}")

    if not np.any(b):
        u = np.zeros(shape)
        iters, achieved = 0, 0.0
    else:
        x, iters, achieved = _krylov(
            matvec, b.ravel(), n, precon, cfg,
            symmetric=(acoef is None or _is_symmetric(acoef)),
        )
        u = x.reshape(shape)
    if lift is not None and bc.trace is not None:
        u = u + lift
    if mean_zero:
        u = u - u.mean()
    stats.update(
        iterations=iters,
        residual=achieved,
        preconditioner=kind,
        nodes=n,
    )
    if (lift is None or bc.trace is None) and f_cells is None:
        _certify_energy(grid, acoef, u, f, g, periodic, stats)
    return ScalarField(grid, u)


def solve_poisson_div_rhs(f, bc, cfg=None, anchor=None, stats=None):
    """Solve -Laplace(u) = div(f) with the anchored-gradient normalization.

    On Dirichlet boxes (whole-space surrogates) and when anchor is given, the
    affine part is fixed by subtracting the average of grad u over
    B(anchor, 1), so the anchored gradient averages to zero there exactly.
    """
    if not isinstance(f, VectorField):
        raise StructuralError("solve_poisson_div_rhs expects a VectorField")
    u = solve_divergence_form(None, None, f, bc, cfg, stats=stats)
    if anchor is not None:
        u = anchor_gradient(u, anchor)
    return u


def anchor_gradient(u, anchor, radius=1.0):
    """Subtract the affine function whose gradient is the B(anchor, radius)
    average of grad u; afterwards that ball average vanishes exactly."""
    grid = u.grid
    gbar = ball_average(discrete_gradient(u), anchor, radius)
    coords = node_meshgrid(grid)
    plane = np.zeros(grid.node_shape)
    for k in range(grid.dim):
        plane = plane + gbar[k] * (coords[k] - anchor[k])
    values = u.values - plane
    shifted = ScalarField(grid, values)
    offset = ball_average(shifted, anchor, radius)
    return ScalarField(grid, values - offset)


def residual(a, u, f, g, f_cells=None):
    """Relative algebraic residual of the assembled system at u.

    Boundary kind is read off the grid; on Dirichlet boxes u's own trace is
    taken as the boundary data, so this measures the interior equations.
    """
    grid = u.grid
    acoef = None if a is None else a.values
    stiff = Stiffness(grid.cells, grid.periodic, grid.h, acoef)
    b = _build_rhs(grid, f, g, f_cells)
    r = b - stiff.apply(u.values)
    if not all(grid.periodic):
        mask = boundary_mask(grid.cells, grid.periodic)
        r[mask] = 0.0
        b = np.where(mask, 0.0, b)
    else:
        r -= r.mean()
        b = b - b.mean()
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(r) / (denom if denom > 0 else 1.0))
