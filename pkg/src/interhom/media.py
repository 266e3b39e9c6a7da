"""Coefficient-field generators and interface gluing.

Families: constant, laminate, checkerboard, smooth periodic, periodic with a
localized defect, stationary Gaussian (spectral synthesis), reflected copies,
and the strip counterexample field.  glue_interface assembles a two-sided
medium with a transition layer of half-width L around the hyperplane x1 = 0.

All generators evaluate at cell centers, so a is single-valued per cell and
the interface face never needs a two-sided value.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import EllipticityError, MediaError, StructuralError
from .grid import Grid, MatrixField, cell_meshgrid

_EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class EllipticityCert:
    """Measured quadratic-form bounds: eigenvalues of the symmetric part
    over all cells.  The single constant serving both inequalities of the
    ellipticity condition is min(lam, 1/Lam)."""

    lam: float
    Lam: float

    def __post_init__(self):
        if not (0 < self.lam <= self.Lam):
            raise EllipticityError(
                f"invalid certificate bounds ({self.lam}, {self.Lam})"
            )

    @property
    def ellipticity_constant(self):
        return min(self.lam, 1.0 / self.Lam)


def check_ellipticity(a):
    """Tight measured eigenvalue bounds of the symmetric part over all cells."""
    if not isinstance(a, MatrixField):
        raise StructuralError("check_ellipticity expects a MatrixField")
    sym = 0.5 * (a.values + np.swapaxes(a.values, -1, -2))
    eigs = np.linalg.eigvalsh(sym)
    lam = float(eigs[..., 0].min())
    Lam = float(eigs[..., -1].max())
    if lam <= 0:
        cell = np.unravel_index(int(np.argmin(eigs[..., 0])), a.grid.cells)
        raise EllipticityError(
            f"coefficient loses ellipticity at cell {cell}: min eigenvalue {lam:.3e}"
        )
    return EllipticityCert(lam, Lam)


def smoothstep(t):
    """C^2 quintic ramp: 0 below 0, 1 above 1."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def _isotropic(grid, scalar_cells):
    d = grid.dim
    vals = np.zeros(grid.cells + (d, d))
    for k in range(d):
        vals[..., k, k] = scalar_cells
    return vals


# ---------------------------------------------------------------------------
# media specs


@dataclass(frozen=True)
class ConstantSpec:
    variant = "constant"
    matrix: tuple = ((1.0, 0.0), (0.0, 1.0))

    def scalar_profile(self, grid):
        raise NotImplementedError

    def evaluate(self, grid):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (grid.dim, grid.dim):
            raise MediaError(
                f"constant matrix shape {m.shape} does not match dimension {grid.dim}"
            )
        return np.broadcast_to(m, grid.cells + m.shape).copy()


@dataclass(frozen=True)
class LaminateSpec:
    """Two-phase scalar laminate along one axis, half-period slabs."""

    variant = "laminate"
    low: float = 1.0
    high: float = 4.0
    axis: int = 0
    period: float = 1.0

    def evaluate(self, grid):
        if self.axis >= grid.dim:
            raise MediaError(f"laminate axis {self.axis} outside dimension {grid.dim}")
        if self.period <= 0:
            raise MediaError("laminate period must be positive")
        x = grid.cell_coords(self.axis)
        frac = np.mod(x / self.period, 1.0)
        # ties at the half-period face take the high phase (right-side rule)
        scalar = np.where(frac < 0.5 - 1e-12, self.low, self.high)
        return _isotropic(grid, grid.axis_view(scalar, self.axis))


@dataclass(frozen=True)
class CheckerboardSpec:
    """Scalar checkerboard with cubic tiles of side period/2."""

    variant = "checkerboard"
    low: float = 1.0
    high: float = 4.0
    period: float = 2.0

    def evaluate(self, grid):
        if self.period <= 0:
            raise MediaError("checkerboard period must be positive")
        parity = np.zeros(grid.cells)
        half = self.period / 2.0
        for k in range(grid.dim):
            idx = np.floor(grid.cell_coords(k) / half + 1e-12).astype(int)
            parity = parity + grid.axis_view(idx, k)
        scalar = np.where(np.mod(parity, 2) == 0, self.low, self.high)
        return _isotropic(grid, scalar)


@dataclass(frozen=True)
class SmoothPeriodicSpec:
    """Smooth isotropic periodic medium (fixed trigonometric profile)."""

    variant = "smooth-periodic"
    mean: float = 2.0
    amplitude: float = 0.5
    period: float = 1.0

    def evaluate(self, grid):
        if abs(self.amplitude) >= self.mean:
            raise MediaError("smooth periodic amplitude must stay below the mean")
        coords = cell_meshgrid(grid)
        w = 2.0 * np.pi / self.period
        scalar = np.sin(w * coords[0]) * np.cos(w * coords[1])
        if grid.dim == 3:
            scalar = scalar * np.cos(w * coords[2])
        return _isotropic(grid, self.mean + self.amplitude * scalar)


@dataclass(frozen=True)
class DefectSpec:
    """Periodic background plus a localized isotropic Gaussian bump.

    The bump has sup-norm |amplitude| at its center and is numerically
    compactly supported (below 1e-6 of the amplitude past ~5.3 widths).
    norm_exponent is the integrability exponent r the perturbation is
    reported in.
    """

    variant = "periodic-with-defect"
    base: object = dc_field(default_factory=LaminateSpec)
    amplitude: float = 0.5
    width: float = 1.0
    center: tuple = (0.0, 0.0)
    norm_exponent: float = 2.0

    def evaluate(self, grid):
        if self.width <= 0:
            raise MediaError("defect width must be positive")
        vals = self.base.evaluate(grid)
        coords = cell_meshgrid(grid)
        dist2 = np.zeros(grid.cells)
        if len(self.center) != grid.dim:
            raise MediaError("defect center dimension mismatch")
        for k in range(grid.dim):
            dist2 = dist2 + (coords[k] - self.center[k]) ** 2
        bump = self.amplitude * np.exp(-dist2 / (2.0 * self.width**2))
        for k in range(grid.dim):
            vals[..., k, k] += bump
        return vals

    def perturbation_norm(self, grid):
        """Discrete L^r norm of a - a_base (Frobenius per cell)."""
        coords = cell_meshgrid(grid)
        dist2 = np.zeros(grid.cells)
        for k in range(grid.dim):
            dist2 = dist2 + (coords[k] - self.center[k]) ** 2
        bump = np.abs(self.amplitude) * np.exp(-dist2 / (2.0 * self.width**2))
        frob = bump * np.sqrt(grid.dim)
        r = self.norm_exponent
        return float((np.sum(frob**r) * grid.cell_volume) ** (1.0 / r))


@dataclass(frozen=True)
class GaussianSpec:
    """Stationary Gaussian field mapped through a pointwise matrix map.

    Covariance catalog: c(x) = variance * exp(-|x|^2 / (2 length^2)), whose
    spectrum decays faster than any polynomial.  Maps: 'tanh' sends g to
    (3/2 + tanh(g)/2) I with eigenvalues in (1,2) and Lipschitz constant 1/2;
    'constant' ignores g (degenerate test map).
    """

    variant = "gaussian"
    variance: float = 1.0
    length: float = 1.0
    seed: int = 0
    amap: str = "tanh"
    constant_matrix: tuple = ()

    def evaluate(self, grid):
        return sample_gaussian_field(self, grid).values.copy()


@dataclass(frozen=True)
class ReflectSpec:
    """Coefficient a(x) := inner(-x); reuses the inner draw (Example of
    reflection-correlated sides)."""

    variant = "reflect"
    inner: object = dc_field(default_factory=GaussianSpec)

    def evaluate(self, grid):
        vals = self.inner.evaluate(grid)
        sl = tuple(slice(None, None, -1) for _ in range(grid.dim))
        return np.ascontiguousarray(vals[sl])


@dataclass(frozen=True)
class StripSpec:
    """Rank-one strip perturbation of the identity, d = 3 only."""

    variant = "strip"

    def evaluate(self, grid):
        return build_strip_field(grid).values.copy()


@dataclass(frozen=True)
class InterfaceSpec:
    """Two-sided medium: left for x1 < -L, right for x1 > L, layer between.

    layer is another media spec, or 'interpolate' (default: pointwise linear
    matrix interpolation in x1 between the side fields' values -- a modeling
    choice, the layer is otherwise unconstrained) or 'sharp' (side of the
    sign of x1, the no-layer arrangement).
    """

    left: object = dc_field(default_factory=LaminateSpec)
    right: object = dc_field(default_factory=lambda: LaminateSpec(axis=1))
    layer: object = "interpolate"
    half_width: float = 1.0

    def __post_init__(self):
        if self.half_width < 1.0:
            raise MediaError("layer half-width must be at least 1")


def sample_latent_gaussian(spec, grid):
    """Draw the latent stationary Gaussian g via spectral synthesis.

    White noise is synthesized on the cell lattice, Fourier-weighted by the
    square root of the covariance spectrum (real input keeps the Hermitian
    symmetry exact), and inverse-transformed.  Non-periodic grids sample the
    periodized twin with the same lattice, the usual box surrogate.
    """
    if not isinstance(spec, GaussianSpec):
        raise MediaError("sample_latent_gaussian needs a GaussianSpec")
    if spec.variance <= 0 or spec.length <= 0:
        raise MediaError("gaussian variance and length must be positive")
    d = grid.dim
    freqs = [2.0 * np.pi * np.fft.fftfreq(n, d=grid.h) for n in grid.cells]
    k2 = np.zeros(grid.cells)
    for axis, f in enumerate(freqs):
        k2 = k2 + grid.axis_view(f, axis) ** 2
    ell = spec.length
    spectrum = (
        spec.variance * (2.0 * np.pi * ell**2) ** (d / 2.0) * np.exp(-(ell**2) * k2 / 2.0)
    )
    if np.any(spectrum < 0):
        raise MediaError("covariance spectrum is negative")
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(grid.cells)
    weights = np.sqrt(spectrum / grid.cell_volume)
    return np.fft.ifftn(np.fft.fftn(noise) * weights).real


def sample_gaussian_field(spec, grid):
    """Draw a(x) = A(g(x)) with g from sample_latent_gaussian."""
    if not isinstance(spec, GaussianSpec):
        raise MediaError("sample_gaussian_field needs a GaussianSpec")
    d = grid.dim
    if spec.amap == "constant":
        m = np.asarray(spec.constant_matrix, dtype=np.float64)
        if m.shape != (d, d):
            raise MediaError("constant map needs a d x d matrix")
        return MatrixField(grid, np.broadcast_to(m, grid.cells + (d, d)).copy())
    if spec.amap != "tanh":
        raise MediaError(f"unknown matrix map {spec.amap!r}")
    g = sample_latent_gaussian(spec, grid)
    return MatrixField(grid, _isotropic(grid, 1.5 + 0.5 * np.tanh(g)))


def build_field(spec, grid):
    """Evaluate a media spec on a grid and certify ellipticity."""
    if isinstance(spec, InterfaceSpec):
        return glue_interface(spec, grid)
    if not hasattr(spec, "evaluate"):
        raise MediaError(f"not a media spec: {spec!r}")
    field = MatrixField(grid, spec.evaluate(grid))
    check_ellipticity(field)
    return field


def glue_interface(spec, grid):
    """Assemble the two-sided coefficient per the interface arrangement."""
    if not isinstance(spec, InterfaceSpec):
        raise MediaError("glue_interface needs an InterfaceSpec")
    if not grid.face_aligned(0.0, axis=0):
        raise StructuralError("interface plane x1 = 0 must lie on a cell face")
    L = spec.half_width
    left = build_field(spec.left, grid).values
    right = build_field(spec.right, grid).values
    x1 = grid.cell_coords(0)
    out = np.empty(grid.cells + (grid.dim, grid.dim))

    left_mask = grid.axis_view(x1 < -L, 0)
    right_mask = grid.axis_view(x1 > L, 0)
    layer_mask = ~(left_mask | right_mask)
    out[...] = np.where(left_mask[..., None, None], left, right)

    if np.any(layer_mask):
        if spec.layer == "interpolate":
            t = np.clip((x1 + L) / (2.0 * L), 0.0, 1.0)
            t = grid.axis_view(t, 0)[..., None, None]
            blend = (1.0 - t) * left + t * right
            out = np.where(layer_mask[..., None, None], blend, out)
        elif spec.layer == "sharp":
            sharp = np.where(grid.axis_view(x1 < 0, 0)[..., None, None], left, right)
            out = np.where(layer_mask[..., None, None], sharp, out)
        else:
            layer = build_field(spec.layer, grid).values
            out = np.where(layer_mask[..., None, None], layer, out)

    field = MatrixField(grid, out)
    check_ellipticity(field)
    return field


class StripProfile:
    """Profile pair for the strip field with validated support windows."""

    @staticmethod
    def eta1(t):
        """0 below 0, 1 above 1, C^2 ramp between."""
        return smoothstep(t)

    @staticmethod
    def eta2(y):
        """1 on [-1/2, 1/2], 0 outside [-1, 1], C^2 shoulders."""
        y = np.abs(y)
        return smoothstep((1.0 - y) / 0.5)


def _validate_strip_profiles(eta1, eta2):
    t = np.array([-2.0, -0.5, 0.0])
    if np.any(np.abs(eta1(t)) > 1e-12):
        raise MediaError("eta1 must vanish on (-inf, 0]")
    t = np.array([1.0, 2.0, 10.0])
    if np.any(np.abs(eta1(t) - 1.0) > 1e-12):
        raise MediaError("eta1 must be 1 on [1, inf)")
    y = np.array([-0.5, 0.0, 0.5])
    if np.any(np.abs(eta2(y) - 1.0) > 1e-12):
        raise MediaError("eta2 must be 1 on [-1/2, 1/2]")
    y = np.array([-2.0, -1.0, 1.0, 2.0])
    if np.any(np.abs(eta2(y)) > 1e-12):
        raise MediaError("eta2 must vanish outside (-1, 1)")
    samples = np.linspace(-3, 3, 601)
    for prof in (eta1, eta2):
        vals = prof(samples)
        if np.any(vals < -1e-12) or np.any(vals > 1 + 1e-12):
            raise MediaError("strip profiles must take values in [0, 1]")


def build_strip_field(grid, eta1=StripProfile.eta1, eta2=StripProfile.eta2):
    """a(x) = I + eta1(x1) eta2(x2) e1 (x) e1 on a d = 3 grid."""
    if grid.dim != 3:
        raise StructuralError("the strip construction needs d = 3")
    _validate_strip_profiles(eta1, eta2)
    x1 = grid.cell_coords(0)
    x2 = grid.cell_coords(1)
    eta = grid.axis_view(eta1(x1), 0) * grid.axis_view(eta2(x2), 1)
    vals = _isotropic(grid, np.ones(grid.cells))
    vals[..., 0, 0] += np.broadcast_to(eta, grid.cells)
    return MatrixField(grid, vals)


# ---------------------------------------------------------------------------
# keyed text-config serialization

_SCALAR_FIELDS = {
    "constant": ("matrix",),
    "laminate": ("low", "high", "axis", "period"),
    "checkerboard": ("low", "high", "period"),
    "smooth-periodic": ("mean", "amplitude", "period"),
    "periodic-with-defect": ("amplitude", "width", "center", "norm_exponent"),
    "gaussian": ("variance", "length", "seed", "amap", "constant_matrix"),
    "strip": (),
    "reflect": (),
}

_VARIANTS = {
    "constant": ConstantSpec,
    "laminate": LaminateSpec,
    "checkerboard": CheckerboardSpec,
    "smooth-periodic": SmoothPeriodicSpec,
    "periodic-with-defect": DefectSpec,
    "gaussian": GaussianSpec,
    "strip": StripSpec,
    "reflect": ReflectSpec,
    "interface": InterfaceSpec,
}


def _format_value(value):
    if isinstance(value, (tuple, list, np.ndarray)):
        arr = np.asarray(value, dtype=np.float64).ravel()
        return ", ".join(repr(float(v)) for v in arr)
    return str(value)


def spec_to_sections(spec, prefix="media"):
    """Flatten a spec into {section_name: {key: string}} for configparser."""
    sections = {}
    if isinstance(spec, InterfaceSpec):
        own = {"variant": "interface", "half_width": str(spec.half_width)}
        if isinstance(spec.layer, str):
            own["layer"] = spec.layer
        sections[prefix] = own
        sections.update(spec_to_sections(spec.left, f"{prefix}.left"))
        sections.update(spec_to_sections(spec.right, f"{prefix}.right"))
        if not isinstance(spec.layer, str):
            sections.update(spec_to_sections(spec.layer, f"{prefix}.layer"))
        return sections
    variant = spec.variant
    own = {"variant": variant}
    for name in _SCALAR_FIELDS[variant]:
        text = _format_value(getattr(spec, name))
        if text:
            own[name] = text
    sections[prefix] = own
    if variant == "periodic-with-defect":
        sections.update(spec_to_sections(spec.base, f"{prefix}.base"))
    elif variant == "reflect":
        sections.update(spec_to_sections(spec.inner, f"{prefix}.inner"))
    return sections


def _parse_value(name, text, dimension_hint=2):
    if name in ("axis", "seed"):
        return int(text)
    if name in ("matrix", "center", "constant_matrix"):
        parts = [float(p) for p in text.replace(",", " ").split()]
        if name == "center":
            return tuple(parts)
        n = int(round(len(parts) ** 0.5))
        if n * n != len(parts):
            raise MediaError(f"matrix needs a square number of entries, got {len(parts)}")
        return tuple(tuple(parts[i * n : (i + 1) * n]) for i in range(n))
    if name == "amap":
        return text.strip()
    return float(text)


def spec_from_sections(sections, prefix="media"):
    """Inverse of spec_to_sections."""
    if prefix not in sections:
        raise MediaError(f"missing config section [{prefix}]")
    own = dict(sections[prefix])
    variant = own.pop("variant", None)
    if variant == "interface":
        left = spec_from_sections(sections, f"{prefix}.left")
        right = spec_from_sections(sections, f"{prefix}.right")
        layer = own.get("layer", "interpolate")
        if f"{prefix}.layer" in sections:
            layer = spec_from_sections(sections, f"{prefix}.layer")
        return InterfaceSpec(
            left=left,
            right=right,
            layer=layer,
            half_width=float(own.get("half_width", 1.0)),
        )
    if variant not in _VARIANTS or variant == "interface":
        raise MediaError(f"unknown media variant {variant!r} in [{prefix}]")
    cls = _VARIANTS[variant]
    kwargs = {}
    for name in _SCALAR_FIELDS[variant]:
        if name in own:
            kwargs[name] = _parse_value(name, own[name])
    if variant == "periodic-with-defect" and f"{prefix}.base" in sections:
        kwargs["base"] = spec_from_sections(sections, f"{prefix}.base")
    if variant == "reflect" and f"{prefix}.inner" in sections:
        kwargs["inner"] = spec_from_sections(sections, f"{prefix}.inner")
    return cls(**kwargs)
