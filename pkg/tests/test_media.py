"""Media generator tests: certificates, gluing, sampling statistics."""

import configparser
import io

import numpy as np
import pytest

from interhom.errors import EllipticityError, MediaError, StructuralError
from interhom.grid import Grid, MatrixField
from interhom.media import (
    CheckerboardSpec,
    ConstantSpec,
    DefectSpec,
    GaussianSpec,
    InterfaceSpec,
    LaminateSpec,
    ReflectSpec,
    SmoothPeriodicSpec,
    StripSpec,
    build_field,
    build_strip_field,
    check_ellipticity,
    glue_interface,
    sample_gaussian_field,
    sample_latent_gaussian,
    spec_from_sections,
    spec_to_sections,
)


def per_grid(cells, h, origin=None):
    d = len(cells)
    if origin is None:
        origin = tuple(-0.5 * n * h for n in cells)
    return Grid(cells=cells, h=h, origin=origin, periodic=(True,) * d)


def test_constant_identity_certificate():
    g = per_grid((8, 8), 0.25)
    a = build_field(ConstantSpec(), g)
    cert = check_ellipticity(a)
    assert cert.lam == 1.0 and cert.Lam == 1.0
    assert cert.ellipticity_constant == 1.0


def test_laminate_certificate_and_tiling():
    g = per_grid((16, 8), 0.25, origin=(0.0, 0.0))
    a = build_field(LaminateSpec(low=1.0, high=4.0, axis=0, period=1.0), g)
    cert = check_ellipticity(a)
    assert cert.lam == 1.0 and cert.Lam == 4.0
    assert cert.ellipticity_constant == 0.25
    # period is 4 cells here; the pattern must tile exactly
    assert np.array_equal(a.values[:4], a.values[4:8])
    assert np.array_equal(a.values[:4], a.values[12:])
    # first half-period low, second high
    assert np.all(a.values[0, :, 0, 0] == 1.0)
    assert np.all(a.values[2, :, 0, 0] == 4.0)
    assert np.all(a.values[..., 0, 1] == 0.0)


def test_checkerboard_pattern():
    g = per_grid((8, 8), 0.5, origin=(0.0, 0.0))
    a = build_field(CheckerboardSpec(low=1.0, high=4.0, period=2.0), g)
    cert = check_ellipticity(a)
    assert (cert.lam, cert.Lam) == (1.0, 4.0)
    v = a.values[..., 0, 0]
    # tiles of 2x2 cells with alternating parity
    assert np.all(v[0:2, 0:2] == 1.0)
    assert np.all(v[2:4, 0:2] == 4.0)
    assert np.all(v[2:4, 2:4] == 1.0)


def test_smooth_periodic_bounds():
    g = per_grid((32, 32), 0.125, origin=(0.0, 0.0))
    a = build_field(SmoothPeriodicSpec(mean=2.0, amplitude=0.5, period=1.0), g)
    cert = check_ellipticity(a)
    assert 1.5 <= cert.lam <= cert.Lam <= 2.5
    assert cert.Lam > 2.2  # the profile actually moves
    with pytest.raises(MediaError):
        build_field(SmoothPeriodicSpec(mean=1.0, amplitude=1.0), g)


def test_defect_bump_decay():
    g = per_grid((64, 64), 0.25)
    spec = DefectSpec(
        base=ConstantSpec(matrix=((2.0, 0.0), (0.0, 2.0))),
        amplitude=0.5,
        width=1.0,
        center=(0.0, 0.0),
    )
    a = build_field(spec, g)
    base = build_field(spec.base, g)
    diff = a.values[..., 0, 0] - base.values[..., 0, 0]
    xc = g.cell_coords(0)
    r2 = g.axis_view(xc, 0) ** 2 + g.axis_view(g.cell_coords(1), 1) ** 2
    far = np.broadcast_to(r2, g.cells) > 36.0
    assert np.abs(diff[far]).max() < 1e-6
    assert 0.45 < diff.max() <= 0.5
    assert spec.perturbation_norm(g) > 0.5  # L^2 norm of the matrix bump


def test_defect_can_break_ellipticity():
    g = per_grid((32, 32), 0.25)
    bad = DefectSpec(base=ConstantSpec(), amplitude=-2.0, width=1.0, center=(0.0, 0.0))
    with pytest.raises(EllipticityError):
        build_field(bad, g)


def test_gaussian_determinism_and_bounds():
    g = per_grid((64, 64), 0.25)
    spec = GaussianSpec(variance=1.0, length=1.0, seed=11)
    a1 = sample_gaussian_field(spec, g)
    a2 = sample_gaussian_field(spec, g)
    assert np.array_equal(a1.values, a2.values)
    a3 = sample_gaussian_field(GaussianSpec(variance=1.0, length=1.0, seed=12), g)
    assert not np.array_equal(a1.values, a3.values)
    cert = check_ellipticity(a1)
    assert 1.0 < cert.lam and cert.Lam < 2.0
    assert np.all(a1.values[..., 0, 1] == 0.0)


def test_gaussian_autocovariance_matches_spec():
    # 16 seeds on a 512^2 grid; compare lag-0 and one nonzero lag against
    # c(tau) = v exp(-|tau|^2 / (2 l^2)) within 3 Monte Carlo standard errors.
    v, ell = 1.5, 1.0
    g = per_grid((512, 512), 0.125)
    lag_cells = 8  # tau = 1.0 along the first axis
    cov0, covt = [], []
    for seed in range(16):
        z = sample_latent_gaussian(GaussianSpec(variance=v, length=ell, seed=seed), g)
        z = z - z.mean()
        cov0.append(np.mean(z * z))
        covt.append(np.mean(z * np.roll(z, -lag_cells, axis=0)))
    cov0, covt = np.array(cov0), np.array(covt)
    tau = lag_cells * g.h
    for est, target in ((cov0, v), (covt, v * np.exp(-(tau**2) / (2 * ell**2)))):
        err = est.std(ddof=1) / np.sqrt(len(est))
        assert abs(est.mean() - target) < 3.0 * err + 1e-3, (est.mean(), target, err)


def test_reflection_is_pointwise_negation():
    g = per_grid((32, 32), 0.25)
    inner = GaussianSpec(variance=1.0, length=0.5, seed=5)
    refl = build_field(ReflectSpec(inner=inner), g)
    orig = build_field(inner, g)
    n0, n1 = g.cells
    for idx in ((3, 17), (0, 0), (20, 9)):
        mirror = (n0 - 1 - idx[0], n1 - 1 - idx[1])
        assert np.array_equal(refl.values[idx], orig.values[mirror])
    twice = build_field(ReflectSpec(inner=ReflectSpec(inner=inner)), g)
    assert np.array_equal(twice.values, orig.values)


def test_strip_field_examples():
    cells = (8, 8, 4)
    g = Grid(cells=cells, h=1.0, origin=(-4.0, -4.0, -2.0),
             periodic=(False, False, False))
    a = build_strip_field(g)
    cert = check_ellipticity(a)
    assert cert.lam == 1.0 and cert.Lam == 2.0
    vals = a.values
    # symmetric cellwise
    assert np.array_equal(vals, np.swapaxes(vals, -1, -2))

    def cell_of(x):
        return tuple(int(np.floor((x[k] - g.origin[k]) / g.h)) for k in range(3))

    eye = np.eye(3)
    on_plateau = vals[cell_of((2.5, 0.5, 0.0))]
    assert on_plateau[0, 0] == 2.0
    assert np.array_equal(on_plateau - np.diag([1.0, 0, 0]), eye)
    assert np.array_equal(vals[cell_of((-1.5, 0.5, 0.0))], eye)   # x1 < 0
    assert np.array_equal(vals[cell_of((2.5, 2.5, 0.0))], eye)    # |x2| > 1
    # identity outside D exactly
    x1 = g.cell_coords(0)
    x2 = g.cell_coords(1)
    outside = (g.axis_view(x1 < 0, 0) | g.axis_view(np.abs(x2) > 1, 1))
    outside = np.broadcast_to(outside, g.cells)
    assert np.array_equal(vals[outside], np.broadcast_to(eye, vals[outside].shape))


def test_strip_profile_validation():
    g = Grid(cells=(4, 4, 4), h=1.0, origin=(-2.0,) * 3, periodic=(False,) * 3)
    with pytest.raises(MediaError):
        build_strip_field(g, eta1=lambda t: np.clip(t + 0.5, 0, 1))
    with pytest.raises(MediaError):
        build_strip_field(g, eta2=lambda y: np.ones_like(np.asarray(y, dtype=float)))
    g2 = per_grid((8, 8), 0.5)
    with pytest.raises(StructuralError):
        build_strip_field(g2)


def test_glue_classification_and_layers():
    g = Grid(cells=(16, 8), h=0.5, origin=(-4.0, -2.0), periodic=(False, True))
    two = ConstantSpec(matrix=((2.0, 0.0), (0.0, 2.0)))
    one = ConstantSpec()
    spec = InterfaceSpec(left=two, right=one, layer="interpolate", half_width=1.0)
    a = glue_interface(spec, g)

    def col(x1):
        return a.values[int(np.floor((x1 + 4.0) / 0.5)), 0]

    assert np.array_equal(col(-2.0), 2.0 * np.eye(2))
    assert np.array_equal(col(2.0), np.eye(2))
    # layer cell at x1 = 0.25: t = 0.625, value (1-t)*2 + t = 1.375
    assert np.allclose(col(0.25), 1.375 * np.eye(2))

    sharp = glue_interface(
        InterfaceSpec(left=two, right=one, layer="sharp"), g)
    assert np.array_equal(sharp.values[7, 0], 2.0 * np.eye(2))   # x1 = -0.25
    assert np.array_equal(sharp.values[8, 0], np.eye(2))         # x1 = +0.25

    half = ConstantSpec(matrix=((1.5, 0.0), (0.0, 1.5)))
    explicit = glue_interface(
        InterfaceSpec(left=two, right=one, layer=half), g)
    assert np.array_equal(explicit.values[8, 0], 1.5 * np.eye(2))


def test_glue_left_region_bit_identical():
    g = Grid(cells=(32, 16), h=0.5, origin=(-8.0, -4.0), periodic=(False, True))
    left = GaussianSpec(variance=1.0, length=1.0, seed=3)
    spec = InterfaceSpec(left=left, right=LaminateSpec(axis=1), half_width=1.0)
    glued = glue_interface(spec, g)
    alone = build_field(left, g)
    x1 = g.cell_coords(0)
    rows = x1 < -1.0
    assert np.array_equal(glued.values[rows], alone.values[rows])


def test_glue_degenerate_single_medium():
    g = Grid(cells=(16, 16), h=0.25, origin=(-2.0, -2.0), periodic=(False, False))
    lam = LaminateSpec(low=1.0, high=3.0, axis=1, period=1.0)
    glued = glue_interface(InterfaceSpec(left=lam, right=lam, layer=lam), g)
    assert np.array_equal(glued.values, build_field(lam, g).values)


def test_glue_structural_errors():
    bad = Grid(cells=(15, 8), h=0.5, origin=(-4.1, -2.0), periodic=(False, True))
    with pytest.raises(StructuralError):
        glue_interface(InterfaceSpec(), bad)
    with pytest.raises(MediaError):
        InterfaceSpec(half_width=0.5)


def test_build_field_dispatches_interface():
    g = Grid(cells=(16, 8), h=0.5, origin=(-4.0, -2.0), periodic=(False, True))
    spec = InterfaceSpec(left=ConstantSpec(matrix=((3.0, 0.0), (0.0, 3.0))),
                         right=ConstantSpec())
    assert np.array_equal(build_field(spec, g).values,
                          glue_interface(spec, g).values)


def test_config_roundtrip_through_text():
    spec = InterfaceSpec(
        left=DefectSpec(
            base=LaminateSpec(low=1.0, high=4.0, axis=0, period=1.0),
            amplitude=0.5, width=1.0, center=(-3.0, 0.0), norm_exponent=2.0),
        right=ReflectSpec(inner=GaussianSpec(variance=1.5, length=2.0, seed=9)),
        layer=ConstantSpec(matrix=((2.0, 0.5), (0.5, 2.0))),
        half_width=2.0,
    )
    sections = spec_to_sections(spec)
    cp = configparser.ConfigParser()
    for name, kv in sections.items():
        cp[name] = kv
    buf = io.StringIO()
    cp.write(buf)
    cp2 = configparser.ConfigParser()
    cp2.read_string(buf.getvalue())
    parsed = spec_from_sections({s: dict(cp2[s]) for s in cp2.sections()})
    assert parsed == spec


def test_config_roundtrip_simple_variants():
    for spec in (
        ConstantSpec(matrix=((2.0, 0.25), (0.25, 1.0))),
        LaminateSpec(low=0.5, high=2.0, axis=1, period=2.0),
        CheckerboardSpec(low=1.0, high=9.0, period=4.0),
        SmoothPeriodicSpec(mean=3.0, amplitude=1.0, period=0.5),
        GaussianSpec(variance=2.0, length=0.5, seed=123),
        StripSpec(),
    ):
        assert spec_from_sections(spec_to_sections(spec)) == spec


def test_nonsymmetric_field_certificate_uses_symmetric_part():
    g = per_grid((4, 4), 0.5)
    vals = np.zeros(g.cells + (2, 2))
    vals[..., 0, 0] = 2.0
    vals[..., 1, 1] = 2.0
    vals[..., 0, 1] = 1.0
    vals[..., 1, 0] = -1.0  # skew part must not affect the certificate
    cert = check_ellipticity(MatrixField(g, vals))
    assert cert.lam == pytest.approx(2.0)
    assert cert.Lam == pytest.approx(2.0)
