"""Ensemble Monte Carlo over Gaussian interface media: annealed moments of
adapted-corrector increments, with jackknife errors and growth fits."""

import dataclasses
from dataclasses import dataclass, field as dc_field

import numpy as np

from .cell import build_corrector_set
from .errors import (CompatibilityError, ConfigError, OutOfDomainError,
                     SolverError, StructuralError, ToolkitError)
from .grid import Grid, MatrixField, ball_cell_mask, values_at_cells
from .interface import (build_harmonic_coordinates, direct_box_corrector,
                        tile_cell_array)
from .media import GaussianSpec, ReflectSpec, build_field

__all__ = [
    "EnsembleConfig",
    "GrowthFit",
    "MomentReport",
    "MonotonicityResult",
    "fit_increment_growth",
    "moment_monotonicity_check",
    "moment_table",
    "run_ensemble",
    "tangential_pairs",
]

COUPLINGS = ("independent", "reflected")
_MODELS = ("constant", "log_sqrt", "power")
PROBE_RADIUS = 1.0


def tangential_pairs(separations, dim=2, axis=1):
    """Probe pairs on the interface plane, split symmetrically along one
    tangential axis: for each r the pair is (-r/2, +r/2) on that axis."""
    if axis == 0:
        raise ConfigError("tangential pairs must vary along an axis other "
                          "than the interface normal")
    if not 0 < axis < dim:
        raise ConfigError(f"axis {axis} outside dimension {dim}")
    pairs = []
    for r in separations:
        if not r > 0:
            raise ConfigError(f"pair separation must be positive, got {r}")
        x = [0.0] * dim
        y = [0.0] * dim
        x[axis] = -0.5 * float(r)
        y[axis] = +0.5 * float(r)
        pairs.append((tuple(x), tuple(y)))
    return tuple(pairs)


@dataclass(frozen=True)
class EnsembleConfig:
    """One ensemble study: the per-side Gaussian law, how the sides are
    coupled, the sampling plan, and the probe geometry.

    template      -- GaussianSpec giving the law of one side; per-sample
                     seeds replace its seed field
    coupling      -- 'independent' (fresh draws per side) or 'reflected'
                     (right side is the left draw mirrored through 0)
    samples       -- ensemble size N
    base_seed     -- root of the per-sample seed tree
    orders        -- moment orders p, each >= 1
    pairs         -- ((x, y), ...) probe point pairs
    h             -- grid spacing shared by the torus and the glue box
    rve_extent    -- side length of the periodized sampling torus
    pad           -- box clearance beyond the probe balls (>= 2)
    gauge         -- include the gauged flux potentials in the probed
                     corrector tuple (off: displacement correctors only)
    solver        -- optional SolverConfig threaded to every solve
    """

    template: object
    pairs: tuple
    coupling: str = "independent"
    samples: int = 8
    base_seed: int = 0
    orders: tuple = (1.0, 2.0)
    h: float = 0.25
    rve_extent: float = 16.0
    pad: float = 8.0
    gauge: bool = True
    solver: object = None

    def __post_init__(self):
        if not isinstance(self.template, GaussianSpec):
            raise ConfigError("ensemble template must be a GaussianSpec")
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"coupling must be one of {COUPLINGS}")
        if int(self.samples) < 1 or int(self.samples) != self.samples:
            raise ConfigError("sample count must be a positive integer")
        object.__setattr__(self, "samples", int(self.samples))
        orders = tuple(float(p) for p in self.orders)
        if not orders:
            raise ConfigError("at least one moment order is required")
        if any(p < 1.0 for p in orders):
            raise ConfigError("moment orders must satisfy p >= 1")
        object.__setattr__(self, "orders", orders)
        pairs = tuple((tuple(map(float, x)), tuple(map(float, y)))
                      for x, y in self.pairs)
        if not pairs:
            raise ConfigError("at least one probe pair is required")
        d = len(pairs[0][0])
        if d not in (2, 3):
            raise ConfigError("probe points must live in dimension 2 or 3")
        for x, y in pairs:
            if len(x) != d or len(y) != d:
                raise ConfigError("probe points have inconsistent dimensions")
        object.__setattr__(self, "pairs", pairs)
        if not self.h > 0:
            raise ConfigError("grid spacing must be positive")
        m = self.rve_extent / self.h
        if abs(m - round(m)) > 1e-9 or round(m) < 4:
            raise ConfigError("rve extent must be a whole number (>= 4) of "
                              "cells")
        if self.pad < 2.0:
            raise ConfigError("pad must be at least 2 so that probe and "
                              "anchor balls clear the box walls")

    @property
    def dim(self):
        return len(self.pairs[0][0])

    def separations(self):
        return tuple(
            float(np.sqrt(sum((b - a) ** 2 for a, b in zip(x, y))))
            for x, y in self.pairs)


@dataclass(frozen=True)
class GrowthFit:
    """Best of {constant, ln^(1/2)(2+r), r^s with s floored at 0.3} for one
    moment order, plus the per-model amplitudes and rms log-residuals."""

    order: float
    model: str
    amplitudes: dict
    exponent: float
    residuals: dict


@dataclass(frozen=True)
class MomentReport:
    config: EnsembleConfig
    separations: tuple
    estimates: np.ndarray          # (npairs, norders)
    std_errors: np.ndarray         # (npairs, norders)
    increment_samples: np.ndarray  # (nsuccess, npairs), sorted per column
    n_success: int
    failures: tuple
    fits: tuple

    def __post_init__(self):
        for name in ("estimates", "std_errors", "increment_samples"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def orders(self):
        return self.config.orders

    @property
    def pairs(self):
        return self.config.pairs

    def rows(self):
        """Flat (separation, order, estimate, std_error) records, one per
        (pair, order), in config order; convenient for CSV writers."""
        out = []
        for j, r in enumerate(self.separations):
            for i, p in enumerate(self.orders):
                out.append((r, p, float(self.estimates[j, i]),
                            float(self.std_errors[j, i])))
        return tuple(out)


@dataclass(frozen=True)
class MonotonicityResult:
    passed: bool
    flags: tuple


def moment_table(values, orders):
    """Annealed increment norms (mean of I^(p/2))^(1/p) with jackknife
    standard errors.

    values is (N, npairs) of nonnegative per-sample ball integrals I.  The
    samples are sorted per column before any reduction so that the result
    is bit-identical under sample reordering.  N = 1 yields zero errors.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.ndim != 2 or vals.shape[0] < 1:
        raise StructuralError("moment_table needs an (N, npairs) array")
    if np.any(vals < 0):
        raise StructuralError("increment integrals must be nonnegative")
    orders = tuple(float(p) for p in orders)
    vals = np.sort(vals, axis=0)
    n, npairs = vals.shape
    est = np.empty((npairs, len(orders)))
    se = np.zeros((npairs, len(orders)))
    for i, p in enumerate(orders):
        powered = vals ** (0.5 * p)
        est[:, i] = np.mean(powered, axis=0) ** (1.0 / p)
        if n > 1:
            totals = powered.sum(axis=0)
            loo = ((totals[None, :] - powered) / (n - 1)) ** (1.0 / p)
            centered = loo - loo.mean(axis=0)
            se[:, i] = np.sqrt((n - 1) / n * np.sum(centered ** 2, axis=0))
    return est, se


def fit_increment_growth(separations, values, order):
    """Fit one moment-vs-distance curve against the three growth models.

    All models are fit in log space; the power exponent is floored at 0.3
    (an unconstrained power fit can mimic the flat models as s -> 0, so the
    competitor is the best power that is genuinely growing).  An all-zero
    curve reports the degenerate 'zero' model.
    """
    r = np.asarray(separations, dtype=np.float64)
    m = np.asarray(values, dtype=np.float64)
    if r.shape != m.shape or r.ndim != 1 or r.size < 2:
        raise StructuralError("growth fit needs >= 2 (separation, value) "
                              "points")
    if np.unique(r).size < 2:
        raise StructuralError("growth fit needs >= 2 distinct separations")
    if np.any(r <= 0):
        raise StructuralError("separations must be positive")
    if not np.all(m > 0):
        if np.allclose(m, 0.0):
            return GrowthFit(order=float(order), model="zero",
                             amplitudes={}, exponent=0.0, residuals={})
        raise StructuralError("moment curve mixes zero and nonzero values")

    logm = np.log(m)
    logr = np.log(r)
    amplitudes = {}
    residuals = {}

    amplitudes["constant"] = float(np.exp(logm.mean()))
    residuals["constant"] = float(np.sqrt(np.mean((logm - logm.mean()) ** 2)))

    basis = 0.5 * np.log(np.log(2.0 + r))
    shift = logm - basis
    amplitudes["log_sqrt"] = float(np.exp(shift.mean()))
    residuals["log_sqrt"] = float(np.sqrt(np.mean((shift - shift.mean()) ** 2)))

    s_free = float(np.dot(logr - logr.mean(), logm - logm.mean())
                   / np.dot(logr - logr.mean(), logr - logr.mean()))
    s = min(max(s_free, 0.3), 2.0)
    shift = logm - s * logr
    amplitudes["power"] = float(np.exp(shift.mean()))
    residuals["power"] = float(np.sqrt(np.mean((shift - shift.mean()) ** 2)))

    best = _MODELS[0]
    for name in _MODELS[1:]:
        if residuals[name] < residuals[best] * (1.0 - 1e-9) - 1e-12:
            best = name
    return GrowthFit(order=float(order), model=best, amplitudes=amplitudes,
                     exponent=s, residuals=residuals)


def _snap(value, h, up):
    scaled = value / h
    return h * (np.ceil(scaled - 1e-9) if up else np.floor(scaled + 1e-9))


def _build_geometry(cfg):
    """Torus, glue box and per-pair ball index correspondences."""
    d = cfg.dim
    m = int(round(cfg.rve_extent / cfg.h))
    rve = Grid(cells=(m,) * d, h=cfg.h, origin=(0.0,) * d,
               periodic=(True,) * d)

    points = [p for pair in cfg.pairs for p in pair] + [(0.0,) * d]
    lo = [min(p[k] for p in points) - cfg.pad for k in range(d)]
    hi = [max(p[k] for p in points) + cfg.pad for k in range(d)]
    origin = tuple(float(_snap(v, cfg.h, up=False)) for v in lo)
    cells = tuple(int(round((_snap(b, cfg.h, up=True) - a) / cfg.h))
                  for a, b in zip(origin, hi))
    box = Grid(cells=cells, h=cfg.h, origin=origin,
               periodic=(False,) * d)

    indices = []
    for x, y in cfg.pairs:
        for point in (x, y):
            if not box.contains_ball(point, PROBE_RADIUS):
                raise OutOfDomainError(
                    f"probe ball at {point} escapes the glue box")
        shift = np.asarray(y) - np.asarray(x)
        steps = np.round(shift / cfg.h).astype(int)
        if np.max(np.abs(steps * cfg.h - shift)) > 1e-9:
            raise CompatibilityError(
                "probe pairs must be separated by a whole number of cells")
        base = np.nonzero(ball_cell_mask(box, x, PROBE_RADIUS))
        if base[0].size == 0:
            raise StructuralError("probe ball contains no cell centers")
        shifted = tuple(idx + s for idx, s in zip(base, steps))
        for axis, idx in enumerate(shifted):
            if idx.min() < 0 or idx.max() >= box.cells[axis]:
                raise OutOfDomainError(
                    f"shifted probe ball at {y} escapes the glue box")
        indices.append((base, shifted))
    return rve, box, tuple(indices)


def _side_specs(cfg, seed_minus, seed_plus):
    left = dataclasses.replace(cfg.template, seed=seed_minus)
    if cfg.coupling == "independent":
        return left, dataclasses.replace(cfg.template, seed=seed_plus)
    return left, ReflectSpec(inner=left)


def _run_sample(cfg, rve, box, pair_indices, seed_minus, seed_plus):
    """One end-to-end draw: sample both sides on the torus, glue the tiled
    periodizations at x1 = 0, build the adapted correctors on the box, and
    return the per-pair ball integrals of the squared increments."""
    left, right = _side_specs(cfg, seed_minus, seed_plus)
    a_minus = build_field(left, rve)
    a_plus = build_field(right, rve)
    set_minus = build_corrector_set(a_minus, side="minus", cfg=cfg.solver)
    set_plus = build_corrector_set(a_plus, side="plus", cfg=cfg.solver)
    coords = build_harmonic_coordinates(set_minus.abar, set_plus.abar)

    tiled_minus = tile_cell_array(a_minus.values, rve, box)
    tiled_plus = tile_cell_array(a_plus.values, rve, box)
    on_right = box.axis_view(box.cell_coords(0) > 0.0, 0)
    a_box = MatrixField(box, np.where(on_right[..., None, None],
                                      tiled_plus, tiled_minus))
    iset = direct_box_corrector(a_box, coords, set_minus, set_plus,
                                cfg=cfg.solver, gauge=cfg.gauge)

    comps = [values_at_cells(iset.phi[k]) for k in sorted(iset.phi)]
    comps.extend(iset.sigma_pairs[key] for key in sorted(iset.sigma_pairs))
    stack = np.stack(comps, axis=-1)
    out = np.empty(len(pair_indices))
    for j, (base, shifted) in enumerate(pair_indices):
        diff = stack[shifted] - stack[base]
        out[j] = float(np.mean(np.sum(diff * diff, axis=-1)))
    return out


def run_ensemble(cfg):
    """N independent pipeline runs, aggregated into a MomentReport.

    Per-sample seeds are spawned from the base seed, so a report is a pure
    function of its config; samples are independent and could be dispatched
    to workers, with the single-threaded aggregation unchanged.  Individual
    sample failures are recorded and excluded; fewer than N/2 survivors
    abort the ensemble.
    """
    rve, box, pair_indices = _build_geometry(cfg)
    children = np.random.SeedSequence(cfg.base_seed).spawn(cfg.samples)
    seeds = [tuple(int(v) for v in child.generate_state(2, dtype=np.uint64))
             for child in children]
    if len({s for pair in seeds for s in pair}) < 2 * cfg.samples:
        raise StructuralError("seed stream collision across samples")

    rows = []
    failures = []
    for index, (seed_minus, seed_plus) in enumerate(seeds):
        try:
            rows.append(_run_sample(cfg, rve, box, pair_indices,
                                    seed_minus, seed_plus))
        except ToolkitError as exc:
            failures.append((index, str(exc)))
    if 2 * len(rows) < cfg.samples:
        raise SolverError(
            f"only {len(rows)} of {cfg.samples} ensemble samples succeeded")

    table = np.sort(np.asarray(rows), axis=0)
    estimates, std_errors = moment_table(table, cfg.orders)
    separations = cfg.separations()
    fits = ()
    if len(set(separations)) >= 2:
        fits = tuple(
            fit_increment_growth(separations, estimates[:, i], order=p)
            for i, p in enumerate(cfg.orders))
    return MomentReport(
        config=cfg,
        separations=separations,
        estimates=estimates,
        std_errors=std_errors,
        increment_samples=table,
        n_success=len(rows),
        failures=tuple(failures),
        fits=fits,
    )


def moment_monotonicity_check(report):
    """Hölder sanity: lower-order estimates must not exceed higher-order
    ones by more than twice the combined jackknife error."""
    orders = report.orders
    if len(orders) < 2:
        raise StructuralError("monotonicity check needs >= 2 moment orders")
    ranked = sorted(range(len(orders)), key=lambda i: orders[i])
    flags = []
    for j in range(len(report.separations)):
        for a in range(len(ranked)):
            for b in range(a + 1, len(ranked)):
                lo, hi = ranked[a], ranked[b]
                gap = (report.estimates[j, lo] - report.estimates[j, hi])
                allowance = 2.0 * float(np.hypot(report.std_errors[j, lo],
                                                 report.std_errors[j, hi]))
                if gap > allowance:
                    flags.append((j, orders[lo], orders[hi], float(gap)))
    return MonotonicityResult(passed=not flags, flags=tuple(flags))
