"""Quantitative diagnostics on corrector fields and a-harmonic functions.

Ball-normalized oscillation and growth-rate scans, the minimal sublinearity
radius, excess decay with large-scale Lipschitz ratios, Green's-function
decay probes built from dipole solves, and the strip log-growth probe.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import (
    CertificationError,
    DegenerateBasisError,
    FitError,
    OutOfDomainError,
    StructuralError,
)
from .grid import (
    ScalarField,
    VectorField,
    ball_cell_mask,
    discrete_gradient,
    same_grid,
    nearest_node,
    values_at_cells,
)
from .media import smoothstep
from .solver import BoundaryData, Stiffness, solve_divergence_form

__all__ = [
    "oscillation",
    "minimal_radius",
    "corrector_components",
    "excess",
    "corrected_basis_bounds",
    "excess_decay_scan",
    "ExcessReport",
    "growth_scan",
    "GrowthReport",
    "GrowthFit",
    "fit_growth_model",
    "log_preference_margin",
    "green_decay_probe",
    "green_decay_scan",
    "GreenSample",
    "GreenProbe",
    "strip_growth_probe",
    "StripGrowthTable",
]


def _component_list(fields):
    if isinstance(fields, ScalarField):
        fields = (fields,)
    fields = tuple(fields)
    if not fields:
        raise StructuralError("need at least one field component")
    for f in fields:
        if not isinstance(f, ScalarField):
            raise StructuralError("oscillation expects vertex scalar fields")
    same_grid(*fields)
    return fields


def oscillation(fields, center, radius):
    """Normalized deviation (1/r)(avg_B |F - avg_B F|^2)^(1/2) on B(center, r).

    fields may be a single vertex scalar or a sequence treated as one joint
    vector-valued quantity (squared deviations summed over components).
    """
    fields = _component_list(fields)
    grid = fields[0].grid
    mask = ball_cell_mask(grid, center, radius)
    if not mask.any():
        raise OutOfDomainError("ball contains no cell centers")
    dev2 = 0.0
    for f in fields:
        vals = values_at_cells(f)[mask]
        vals = vals - vals.mean()
        dev2 = dev2 + np.mean(vals * vals)
    return float(np.sqrt(dev2) / radius)


def minimal_radius(fields, center, delta0, r_min=1.0):
    """Smallest dyadic radius above which the joint oscillation stays <= delta0.

    Radii r_min, 2 r_min, 4 r_min, ... are scanned up to the largest ball the
    grid holds around center.  Returns the first scanned radius when the bound
    holds from the start and inf when it fails even at the largest scale.
    """
    fields = _component_list(fields)
    grid = fields[0].grid
    if delta0 < 0.0:
        raise StructuralError("threshold must be nonnegative")
    if r_min <= 0.0:
        raise StructuralError("r_min must be positive")
    radii = []
    r = float(r_min)
    while grid.contains_ball(center, r):
        radii.append(r)
        r *= 2.0
    if not radii:
        raise OutOfDomainError("no admissible radius around the probe point")
    osc = [oscillation(fields, center, r) for r in radii]
    star = float("inf")
    for r, value in zip(reversed(radii), reversed(osc)):
        if value <= delta0:
            star = r
        else:
            break
    return star


def corrector_components(cset):
    """Joint (phi, sigma) tuple of vertex scalars for oscillation scans.

    Accepts any corrector container exposing grid, phi and sigma_pairs; flux
    components stored at cells are lifted to vertices.
    """
    from .cell import cell_to_vertex

    grid = cset.grid
    phi = cset.phi
    if isinstance(phi, dict):
        phi = tuple(phi[k] for k in sorted(phi))
    out = list(phi)
    for key in sorted(cset.sigma_pairs):
        out.append(ScalarField(grid, cell_to_vertex(grid, cset.sigma_pairs[key])))
    return tuple(out)


def _phi_gradients(coords, phi, grid):
    """Cell array (..., l, k) of d_l (P_k + phi_k)."""
    d = grid.dim
    basis = coords.gradient_cells(grid).copy()
    if phi is None:
        return basis
    if isinstance(phi, dict):
        items = phi.items()
    else:
        phi = tuple(phi)
        if len(phi) != d:
            raise StructuralError(f"expected {d} corrector components")
        items = enumerate(phi)
    for k, p in items:
        if p is None:
            continue
        same_grid_check = p.grid
        if same_grid_check is not grid and (
            same_grid_check.cells != grid.cells
            or same_grid_check.h != grid.h
            or same_grid_check.origin != grid.origin
        ):
            raise StructuralError("corrector grid differs from the sample grid")
        basis[..., :, k] += discrete_gradient(p).values
    return basis


def _ball_gram(u, coords, phi, center, radius):
    grid = u.grid
    mask = ball_cell_mask(grid, center, radius)
    if not mask.any():
        raise OutOfDomainError("ball contains no cell centers")
    gu = discrete_gradient(u).values[mask]
    basis = _phi_gradients(coords, phi, grid)[mask]
    n = gu.shape[0]
    gram = np.einsum("nlj,nlk->jk", basis, basis) / n
    rhs = np.einsum("nl,nlk->k", gu, basis) / n
    energy = float(np.mean(np.sum(gu * gu, axis=-1)))
    return gram, rhs, energy, gu, basis


def corrected_basis_bounds(coords, phi, grid_or_field, center, radius):
    """Extreme eigenvalues of avg_B (grad(P+phi))^T (grad(P+phi)).

    The pair bounds the non-degeneracy interval of the corrected gradient
    basis; a vanishing lower bound signals a degenerate basis.
    """
    grid = grid_or_field.grid if hasattr(grid_or_field, "grid") else grid_or_field
    mask = ball_cell_mask(grid, center, radius)
    basis = _phi_gradients(coords, phi, grid)[mask]
    gram = np.einsum("nlj,nlk->jk", basis, basis) / basis.shape[0]
    eigs = np.linalg.eigvalsh(gram)
    return float(eigs[0]), float(eigs[-1])


def excess(u, coords, phi, center, radius):
    """Distance of grad u to the corrected gradient span on B(center, r).

    Minimizes avg_B |grad u - grad(P + phi) xi|^2 over xi via the d x d
    normal equations; returns (minimum, minimizer).
    """
    gram, rhs, _, gu, basis = _ball_gram(u, coords, phi, center, radius)
    eigs = np.linalg.eigvalsh(gram)
    if eigs[0] <= 1e-12 * max(eigs[-1], 1.0):
        raise DegenerateBasisError(
            f"corrected basis is degenerate on B({tuple(center)}, {radius}):"
            f" gram eigenvalues in [{eigs[0]:.3e}, {eigs[-1]:.3e}]"
        )
    xi = np.linalg.solve(gram, rhs)
    opt = np.linalg.norm(gram @ xi - rhs)
    scale = max(np.linalg.norm(rhs), eigs[-1] * np.linalg.norm(xi), 1.0)
    if opt > 1e-10 * scale:
        raise DegenerateBasisError("normal equations not solved to tolerance")
    mismatch = gu - basis @ xi
    value = float(np.mean(np.sum(mismatch * mismatch, axis=-1)))
    return max(value, 0.0), xi


@dataclass(frozen=True)
class ExcessReport:
    """Excess decay of one a-harmonic sample around a center point.

    exponent is the log-log slope of excess against radius (the decay rate
    2 alpha); None when the excess vanishes at every radius.  lipschitz holds
    avg_{B_r}|grad u|^2 / avg_{B_R}|grad u|^2 against the largest radius.
    """

    center: tuple
    radii: tuple
    excess: tuple
    minimizers: tuple = dc_field(repr=False)
    exponent: float | None
    fit_residual: float | None
    lipschitz: tuple
    gradient_energy: tuple
    basis_bounds: tuple

    def __post_init__(self):
        if any(e < 0 for e in self.excess):
            raise StructuralError("excess values must be nonnegative")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise StructuralError("radii must be strictly increasing")


def _loglog_fit(x, y):
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    design = np.stack([np.ones_like(lx), lx], axis=1)
    sol, *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - design @ sol
    rms = float(np.sqrt(np.mean(resid * resid)))
    return float(sol[1]), float(sol[0]), rms


def harmonicity_defect(a, u, mask=None):
    """Scaled interior residual of -div(a grad u) = 0 restricted to a mask.

    The stiffness residual over the masked interior vertices is compared
    with the natural scale a_max h^(d-2) |grad u|_rms sqrt(count); the ratio
    is solver-tolerance small for discretely a-harmonic fields.
    """
    grid = u.grid
    op = Stiffness(grid.cells, grid.periodic, grid.h, acoef=a.values)
    res = op.apply(u.values)
    interior = np.ones(grid.node_shape, dtype=bool)
    for k in range(grid.dim):
        if grid.periodic[k]:
            continue
        sl = [slice(None)] * grid.dim
        sl[k] = 0
        interior[tuple(sl)] = False
        sl[k] = -1
        interior[tuple(sl)] = False
    if mask is not None:
        interior &= mask
    count = int(interior.sum())
    if count == 0:
        raise OutOfDomainError("harmonicity mask contains no interior vertices")
    grad = discrete_gradient(u).values
    grms = float(np.sqrt(np.mean(np.sum(grad * grad, axis=-1))))
    amax = float(np.abs(a.values).max())
    scale = amax * grid.h ** (grid.dim - 2) * max(grms, 1e-300) * np.sqrt(count)
    return float(np.linalg.norm(res[interior]) / scale)


def excess_decay_scan(u, coords, phi, center, radii, a=None, harmonic_tol=1e-6):
    """Per-radius excess, decay-exponent fit and Lipschitz ratios.

    When the coefficient field is supplied the sample is certified
    a-harmonic inside the largest ball first; a defect above harmonic_tol
    is a precondition failure.
    """
    radii = tuple(float(r) for r in radii)
    if len(radii) < 2:
        raise StructuralError("need at least two radii")
    if any(b <= a_ for a_, b in zip(radii, radii[1:])):
        raise StructuralError("radii must be strictly increasing")
    grid = u.grid
    if a is not None:
        from .grid import ball_node_mask

        defect = harmonicity_defect(a, u, ball_node_mask(grid, center, radii[-1]))
        if defect > harmonic_tol:
            raise CertificationError(
                f"sample is not a-harmonic on B({tuple(center)}, {radii[-1]}):"
                f" defect {defect:.3e} exceeds {harmonic_tol:.1e}"
            )
    values = []
    minimizers = []
    energies = []
    bounds_lo, bounds_hi = np.inf, 0.0
    for r in radii:
        gram, rhs, energy, gu, basis = _ball_gram(u, coords, phi, center, r)
        eigs = np.linalg.eigvalsh(gram)
        if eigs[0] <= 1e-12 * max(eigs[-1], 1.0):
            raise DegenerateBasisError(f"degenerate corrected basis at radius {r}")
        bounds_lo = min(bounds_lo, float(eigs[0]))
        bounds_hi = max(bounds_hi, float(eigs[-1]))
        xi = np.linalg.solve(gram, rhs)
        mismatch = gu - basis @ xi
        values.append(max(float(np.mean(np.sum(mismatch**2, axis=-1))), 0.0))
        minimizers.append(xi)
        energies.append(energy)
    floor = 1e-13 * (1.0 + max(values))
    live = [(r, e) for r, e in zip(radii, values) if e > floor]
    if len(live) >= 2:
        slope, _, rms = _loglog_fit([r for r, _ in live], [e for _, e in live])
        exponent, fit_residual = slope, rms
    else:
        exponent, fit_residual = None, None
    ref = energies[-1]
    lipschitz = tuple(e / ref if ref > 0 else 1.0 for e in energies)
    return ExcessReport(
        center=tuple(float(c) for c in center),
        radii=radii,
        excess=tuple(values),
        minimizers=tuple(minimizers),
        exponent=exponent,
        fit_residual=fit_residual,
        lipschitz=lipschitz,
        gradient_energy=tuple(energies),
        basis_bounds=(bounds_lo, bounds_hi),
    )


@dataclass(frozen=True)
class GrowthReport:
    """Oscillation scan of a corrector tuple around an anchor point."""

    anchor: tuple
    radii: tuple
    oscillations: tuple

    def __post_init__(self):
        if len(self.radii) != len(self.oscillations):
            raise StructuralError("radii and oscillations must pair up")
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise StructuralError("radii must be strictly increasing")
        if any(v < 0 for v in self.oscillations):
            raise StructuralError("oscillations must be nonnegative")

    @property
    def growth(self):
        """Increment growth r * delta(x, r) per radius."""
        return tuple(r * v for r, v in zip(self.radii, self.oscillations))


def growth_scan(fields, anchor, radii):
    """GrowthReport of the joint oscillation of fields over the given radii."""
    radii = tuple(float(r) for r in radii)
    osc = tuple(oscillation(fields, anchor, r) for r in radii)
    return GrowthReport(anchor=tuple(float(c) for c in anchor), radii=radii,
                        oscillations=osc)


@dataclass(frozen=True)
class GrowthFit:
    """Best sublinear-growth model for an oscillation scan.

    model is one of 'power' (A r^(1-nu)), 'log' (A ln(2+r)), 'power-log'
    (A r^(1-nu) ln(2+r)^beta) or 'zero'; residuals holds the log-space rms
    of every candidate.
    """

    model: str
    amplitude: float
    nu: float | None
    beta: float | None
    residual: float
    residuals: dict


def _growth_design(radii):
    r = np.asarray(radii, dtype=float)
    return np.log(r), np.log(np.log(2.0 + r))


def _lstsq_rms(design, y):
    sol, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ sol
    return sol, float(np.sqrt(np.mean(resid * resid)))


def fit_growth_model(report, min_radii=4):
    """Least-squares model selection for the growth of an oscillation scan.

    Fits the three candidates in log space and keeps the smallest residual,
    preferring fewer parameters on ties.  All-zero data short-circuits to a
    zero-amplitude fit.
    """
    radii = np.asarray(report.radii, dtype=float)
    values = np.asarray(report.growth, dtype=float)
    if radii.size < min_radii:
        raise FitError(f"growth fit needs at least {min_radii} radii")
    if np.all(values <= 1e-14 * max(1.0, values.max(initial=0.0))):
        zero = {"power": 0.0, "log": 0.0, "power-log": 0.0}
        return GrowthFit("zero", 0.0, None, None, 0.0, zero)
    keep = values > 0.0
    if keep.sum() < min_radii:
        raise FitError("growth fit needs at least"
                       f" {min_radii} positive values, got {int(keep.sum())}")
    lr, ll = _growth_design(radii[keep])
    y = np.log(values[keep])
    ones = np.ones_like(lr)

    sol_p, rms_p = _lstsq_rms(np.stack([ones, lr], axis=1), y)
    c0 = float(np.mean(y - ll))
    rms_l = float(np.sqrt(np.mean((y - ll - c0) ** 2)))
    sol_m, rms_m = _lstsq_rms(np.stack([ones, lr, ll], axis=1), y)

    candidates = [
        ("log", 1, rms_l, {"amplitude": np.exp(c0), "nu": 1.0, "beta": 1.0}),
        ("power", 2, rms_p,
         {"amplitude": np.exp(sol_p[0]), "nu": 1.0 - sol_p[1], "beta": 0.0}),
        ("power-log", 3, rms_m,
         {"amplitude": np.exp(sol_m[0]), "nu": 1.0 - sol_m[1], "beta": sol_m[2]}),
    ]
    best = min(rms for _, _, rms, _ in candidates)
    tol = best + 1e-9 + 0.01 * best
    name, _, rms, params = min(
        (c for c in candidates if c[2] <= tol), key=lambda c: c[1]
    )
    residuals = {c[0]: c[2] for c in candidates}
    return GrowthFit(name, float(params["amplitude"]), float(params["nu"]),
                     float(params["beta"]), rms, residuals)


def log_preference_margin(report, min_growth_exponent=0.3):
    """Ratio of the best constrained power residual to the log residual.

    The power model's growth exponent is floored at min_growth_exponent; a
    ratio above 1 means the logarithm explains the data better than any
    admissible power law, by that factor.
    """
    radii = np.asarray(report.radii, dtype=float)
    values = np.asarray(report.growth, dtype=float)
    if np.any(values <= 0.0):
        raise FitError("margin needs strictly positive growth values")
    lr, ll = _growth_design(radii)
    y = np.log(values)
    ones = np.ones_like(lr)
    sol_p, rms_p = _lstsq_rms(np.stack([ones, lr], axis=1), y)
    if sol_p[1] < min_growth_exponent:
        shifted = y - min_growth_exponent * lr
        rms_p = float(np.sqrt(np.mean((shifted - shifted.mean()) ** 2)))
    c0 = float(np.mean(y - ll))
    rms_l = float(np.sqrt(np.mean((y - ll - c0) ** 2)))
    if rms_l == 0.0:
        return float("inf") if rms_p > 0.0 else 1.0
    return rms_p / rms_l


@dataclass(frozen=True)
class GreenSample:
    """One dipole probe of the mixed second derivatives of a Green function."""

    receiver: tuple
    source: tuple
    distance: float
    value: float
    boundary_limited: bool


@dataclass(frozen=True)
class GreenProbe:
    """Decay scan of dipole probes against separation."""

    entries: tuple
    exponent: float | None
    fit_residual: float | None

    @property
    def distances(self):
        return tuple(e.distance for e in self.entries)

    @property
    def values(self):
        return tuple(e.value for e in self.entries)


def _dipole_bump(grid, center):
    """Unit-mass radial bump supported in B(center, 1), at cell centers."""
    dist2 = np.zeros(grid.cells)
    for k in range(grid.dim):
        delta = grid.cell_coords(k) - center[k]
        dist2 = dist2 + grid.axis_view(delta, k) ** 2
    w = smoothstep(1.0 - np.sqrt(dist2))
    total = w.sum() * grid.cell_volume
    if total <= 0.0:
        raise OutOfDomainError("dipole bump has no support on the grid")
    return w / total


def green_decay_probe(a, x, y, cfg=None):
    """Local average of |grad_x grad_y G| between unit balls at x and y.

    Solves one dipole problem per direction (unit-moment source bump in
    B(y,1)) and reports the root of the summed gradient energies averaged
    over B(x,1).
    """
    grid = a.grid
    if any(grid.periodic):
        raise StructuralError("Green probes need a Dirichlet box")
    x = tuple(float(c) for c in x)
    y = tuple(float(c) for c in y)
    dist = float(np.linalg.norm(np.subtract(x, y)))
    if dist < 3.0:
        raise StructuralError(f"probe separation {dist:.2f} is below 3")
    for p in (x, y):
        if not grid.contains_ball(p, 1.0):
            raise OutOfDomainError(f"unit ball around {p} escapes the grid")
    bump = _dipole_bump(grid, y)
    bc = BoundaryData.dirichlet()
    mask = ball_cell_mask(grid, x, 1.0)
    total = 0.0
    for j in range(grid.dim):
        g = np.zeros(grid.cells + (grid.dim,))
        g[..., j] = bump
        u = solve_divergence_form(a, None, VectorField(grid, g), bc, cfg)
        grad = discrete_gradient(u).values[mask]
        total += float(np.mean(np.sum(grad * grad, axis=-1)))
    clearance = np.inf
    for p in (x, y):
        for k in range(grid.dim):
            lo = grid.origin[k]
            hi = lo + grid.extent[k]
            clearance = min(clearance, p[k] - lo, hi - p[k])
    return GreenSample(receiver=x, source=y, distance=dist,
                       value=float(np.sqrt(total)),
                       boundary_limited=bool(clearance < dist))


def green_decay_scan(a, pairs, cfg=None):
    """GreenProbe over (receiver, source) pairs with a log-log decay fit."""
    entries = tuple(green_decay_probe(a, x, y, cfg) for x, y in pairs)
    dists = np.array([e.distance for e in entries])
    vals = np.array([e.value for e in entries])
    if len(set(np.round(dists, 12))) >= 2 and np.all(vals > 0):
        slope, _, rms = _loglog_fit(dists, vals)
        return GreenProbe(entries, slope, rms)
    return GreenProbe(entries, None, None)


@dataclass(frozen=True)
class StripGrowthTable:
    """Corrector increments along the negative first axis with a log fit.

    differences[i] holds |phi1(-e1) - phi1(-(r+1) e1)| for radii[i]; the fit
    is differences = log_amplitude * ln(2 + r) + offset.
    """

    radii: tuple
    differences: tuple
    log_amplitude: float
    offset: float
    r_squared: float


def strip_growth_probe(phi1, radii):
    """Increment table of a strip corrector between -e1 and -(r+1) e1."""
    if not isinstance(phi1, ScalarField):
        raise StructuralError("strip probe expects a vertex scalar field")
    grid = phi1.grid
    if grid.dim != 3:
        raise StructuralError("strip probe is defined for d = 3 fields")
    radii = tuple(float(r) for r in radii)
    if not radii:
        raise StructuralError("need at least one radius")
    base_point = (-1.0,) + (0.0,) * (grid.dim - 1)
    base = phi1.values[nearest_node(grid, base_point)]
    diffs = []
    for r in radii:
        far_point = (-(r + 1.0),) + (0.0,) * (grid.dim - 1)
        far = phi1.values[nearest_node(grid, far_point)]
        diffs.append(abs(float(base - far)))
    lr = np.log(2.0 + np.asarray(radii))
    y = np.asarray(diffs)
    design = np.stack([lr, np.ones_like(lr)], axis=1)
    sol, *_ = np.linalg.lstsq(design, y, rcond=None)
    pred = design @ sol
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-300:
        r2 = 1.0 if ss_res <= 1e-300 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return StripGrowthTable(radii=radii, differences=tuple(diffs),
                            log_amplitude=float(sol[0]), offset=float(sol[1]),
                            r_squared=float(r2))
