"""Config-driven experiment runner: one keyed-section text config per run,
every pipeline as a subcommand, and a checksummed manifest per output dir.

Config layout (configparser syntax):

    [experiment]        kind = cell | interface | growth-scan | strip-demo
                               | twoscale | green-probe | ensemble
                        out = results           (--out overrides)
    [grid]              cells = 64 64 / h = 0.25 / periodic = yes yes
                        origin = 0 0            (optional, default zeros)
    [solver]            tolerance / max_iterations / preconditioner (optional)
    [media]             media spec sections (spec_from_sections layout)
    [<kind>]            per-experiment parameters, see the _run_* helpers

Exit codes: 0 success, 2 unusable config, 3 solver failure, 4 failed
certification.
"""

import argparse
import configparser
import dataclasses
import hashlib
import io
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .analysis import (corrector_components, fit_growth_model,
                       green_decay_scan, growth_scan, log_preference_margin,
                       strip_growth_probe)
from .cell import build_corrector_set, flux_identity_residual
from .errors import (CertificationError, ConfigError, EllipticityError,
                     SolverError, ToolkitError)
from .grid import Grid, write_field
from .interface import build_harmonic_coordinates, direct_box_corrector
from .media import (ConstantSpec, GaussianSpec, InterfaceSpec, build_field,
                    spec_from_sections, spec_to_sections)
from .solver import SolverConfig
from .stochastic import (EnsembleConfig, moment_monotonicity_check,
                         run_ensemble, tangential_pairs)
from .twoscale import convergence_study, radial_bump

KINDS = ("cell", "interface", "growth-scan", "strip-demo", "twoscale",
         "green-probe", "ensemble")

_REQUIRED = {
    "cell": ("media", "grid"),
    "interface": ("media", "grid", "interface"),
    "growth-scan": ("media", "grid", "growth-scan"),
    "strip-demo": ("media", "grid", "strip-demo"),
    "twoscale": ("media", "twoscale"),
    "green-probe": ("media", "grid", "green-probe"),
    "ensemble": ("media", "ensemble"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    out: str
    grid: Grid
    solver: SolverConfig
    media: object
    params: dict


@dataclass(frozen=True)
class RunManifest:
    kind: str
    config_hash: str
    version: str
    seed: object
    threads: int
    stages: dict
    wall_seconds: float
    outputs: tuple

    def to_dict(self):
        return {
            "kind": self.kind,
            "config_hash": self.config_hash,
            "version": self.version,
            "seed": self.seed,
            "threads": self.threads,
            "stages": dict(self.stages),
            "wall_seconds": self.wall_seconds,
            "outputs": [dict(entry) for entry in self.outputs],
        }


# ---------------------------------------------------------------------------
# config parsing


def _floats(text):
    return tuple(float(p) for p in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(p) for p in text.replace(",", " ").split())


_TRUE = {"yes", "true", "on", "1"}
_FALSE = {"no", "false", "off", "0"}


def _bools(text):
    out = []
    for p in text.replace(",", " ").split():
        low = p.lower()
        if low in _TRUE:
            out.append(True)
        elif low in _FALSE:
            out.append(False)
        else:
            raise ValueError(f"not a yes/no value: {p!r}")
    return tuple(out)


def load_sections(path):
    """Raw {section: {key: value}} from a config file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"config parse failure: {exc}") from exc
    return {name: dict(parser[name]) for name in parser.sections()}


def _schema_diagnostics(sections):
    """Structural problems only; value parsing is reported separately."""
    diags = []
    exp = sections.get("experiment")
    if exp is None:
        return ["missing [experiment] section"]
    kind = exp.get("kind")
    if kind not in KINDS:
        diags.append(f"[experiment] kind must be one of {KINDS}, "
                     f"got {kind!r}")
        return diags
    for name in _REQUIRED[kind]:
        if name not in sections:
            diags.append(f"missing [{name}] section (required for {kind})")
    if "grid" in _REQUIRED[kind] and "grid" in sections:
        for key in ("cells", "h", "periodic"):
            if key not in sections["grid"]:
                diags.append(f"[grid] is missing the {key} key")
    return diags


def _parse_grid(section):
    cells = _ints(section["cells"])
    periodic = _bools(section["periodic"])
    origin = (_floats(section["origin"]) if "origin" in section
              else (0.0,) * len(cells))
    return Grid(cells=cells, h=float(section["h"]), origin=origin,
                periodic=periodic)


def _parse_solver(section):
    kwargs = {}
    if "tolerance" in section:
        kwargs["tolerance"] = float(section["tolerance"])
    if "max_iterations" in section:
        kwargs["max_iterations"] = int(section["max_iterations"])
    if "preconditioner" in section:
        kwargs["preconditioner"] = section["preconditioner"].strip()
    return SolverConfig(**kwargs)


def parse_config(path):
    """ExperimentConfig from a config file; raises ConfigError on problems."""
    sections = load_sections(path)
    diags = _schema_diagnostics(sections)
    if diags:
        raise ConfigError("; ".join(diags))
    kind = sections["experiment"]["kind"]
    try:
        media = spec_from_sections(sections)
        grid = (_parse_grid(sections["grid"]) if "grid" in sections
                else None)
        solver = (_parse_solver(sections["solver"])
                  if "solver" in sections else SolverConfig())
    except (ToolkitError, ValueError, KeyError) as exc:
        raise ConfigError(f"unusable config {path}: {exc}") from exc
    return ExperimentConfig(
        kind=kind,
        out=sections["experiment"].get("out", ""),
        grid=grid,
        solver=solver,
        media=media,
        params=dict(sections.get(kind, {})),
    )


def serialize_config(cfg):
    """Config text that parses back to an equal ExperimentConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {"kind": cfg.kind}
    if cfg.out:
        parser["experiment"]["out"] = cfg.out
    if cfg.grid is not None:
        parser["grid"] = {
            "cells": " ".join(str(n) for n in cfg.grid.cells),
            "h": repr(cfg.grid.h),
            "origin": " ".join(repr(x) for x in cfg.grid.origin),
            "periodic": " ".join("yes" if p else "no"
                                 for p in cfg.grid.periodic),
        }
    parser["solver"] = {
        "tolerance": repr(cfg.solver.tolerance),
        "max_iterations": str(cfg.solver.max_iterations),
        "preconditioner": cfg.solver.preconditioner,
    }
    for name, body in spec_to_sections(cfg.media).items():
        parser[name] = body
    if cfg.params:
        parser[cfg.kind] = dict(cfg.params)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def validate_config(path):
    """Schema check plus an ellipticity precheck; returns diagnostics."""
    try:
        sections = load_sections(path)
    except ConfigError as exc:
        return [str(exc)]
    diags = _schema_diagnostics(sections)
    if diags:
        return diags
    kind = sections["experiment"]["kind"]
    grid = None
    if "grid" in _REQUIRED[kind]:
        try:
            grid = _parse_grid(sections["grid"])
        except (ToolkitError, ValueError, KeyError) as exc:
            diags.append(f"[grid]: {exc}")
    if "solver" in sections:
        try:
            _parse_solver(sections["solver"])
        except (ToolkitError, ValueError) as exc:
            diags.append(f"[solver]: {exc}")
    try:
        media = spec_from_sections(sections)
    except ToolkitError as exc:
        diags.append(f"[media]: {exc}")
        return diags
    diags.extend(_ellipticity_precheck(media, grid, sections))
    return diags


def _probe_grid(media, grid, sections):
    if grid is not None:
        cells = tuple(min(n, 16) for n in grid.cells)
        return Grid(cells=cells, h=grid.h, origin=grid.origin,
                    periodic=grid.periodic)
    body = sections.get("ensemble", {})
    h = float(body.get("h", 0.25))
    dim = int(body.get("dim", 2))
    return Grid(cells=(8,) * dim, h=h, origin=(0.0,) * dim,
                periodic=(True,) * dim)


def _ellipticity_precheck(media, grid, sections):
    """Evaluate the media spec on a small probe grid, without solving.

    The strip medium is skipped: it is elliptic by construction and needs a
    wide d=3 box that a capped probe grid cannot honor.
    """
    variant = getattr(media, "variant", "interface")
    if variant == "strip":
        return []
    try:
        probe = _probe_grid(media, grid, sections)
        build_field(media, probe)
    except ToolkitError as exc:
        return [f"media variant {variant!r}: {exc}"]
    return []


def resolve_threads(flag_value, env=None):
    """--threads wins; HOMOG_THREADS is the fallback; 1 otherwise."""
    if flag_value is not None:
        if flag_value < 1:
            raise ConfigError("--threads must be a positive integer")
        return int(flag_value)
    env = os.environ if env is None else env
    raw = env.get("HOMOG_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(
            f"HOMOG_THREADS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError("HOMOG_THREADS must be a positive integer")
    return value


def _apply_seed(cfg, seed):
    """Route a --seed override to the experiment's seed knob."""
    if seed is None:
        if cfg.kind == "ensemble":
            return cfg, int(cfg.params.get("base_seed", 0))
        media_seed = getattr(cfg.media, "seed", None)
        return cfg, media_seed
    if cfg.kind == "ensemble":
        params = dict(cfg.params)
        params["base_seed"] = str(int(seed))
        return dataclasses.replace(cfg, params=params), int(seed)
    media = cfg.media
    if hasattr(media, "seed"):
        media = dataclasses.replace(media, seed=int(seed))
        return dataclasses.replace(cfg, media=media), int(seed)
    raise ConfigError(
        f"--seed given, but a {cfg.kind} run with this media has no seed")


# ---------------------------------------------------------------------------
# artifact writing


class Artifacts:
    """Writes CSV/JSON/field files into the output dir and remembers them."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.names = []

    def _register(self, name):
        self.names.append(name)
        return os.path.join(self.out_dir, name)

    @staticmethod
    def _cell(value):
        if isinstance(value, bool):
            return "yes" if value else "no"
        if isinstance(value, float):
            return f"{value:.17g}"
        return str(value)

    def csv(self, name, header, rows):
        path = self._register(name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(self._cell(v) for v in row) + "\n")

    def json(self, name, payload):
        path = self._register(name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def field(self, name, f):
        write_field(f, self._register(name))


def _require_param(cfg, key):
    if key not in cfg.params:
        raise ConfigError(f"[{cfg.kind}] is missing the {key} key")
    return cfg.params[key]


def _param(cfg, key, default):
    return cfg.params.get(key, default)


# ---------------------------------------------------------------------------
# experiment runners: each returns a stages dict of residuals/certifications


def _run_cell(cfg, art):
    grid = cfg.grid
    if not all(grid.periodic):
        raise ConfigError("cell experiments need a fully periodic grid")
    a = build_field(cfg.media, grid)
    cset = build_corrector_set(a, cfg=cfg.solver)
    d = grid.dim
    art.csv("abar.csv", [f"col{j}" for j in range(d)],
            [tuple(float(v) for v in row) for row in cset.abar])
    sup = 0.0
    for k in range(d):
        art.field(f"phi_{k}.field", cset.phi[k])
        sup = max(sup, float(np.abs(cset.phi[k].values).max()))
    flux = max(flux_identity_residual(cset, j, k)
               for j in range(d) for k in range(d))
    art.json("summary.json", {"abar": cset.abar.tolist(),
                              "corrector_sup": sup})
    return {"flux_identity": float(flux), "corrector_sup": sup}


def _side_sets(cfg, h):
    if not isinstance(cfg.media, InterfaceSpec):
        raise ConfigError(f"{cfg.kind} experiments need interface media")
    n = int(_require_param(cfg, "rve_cells"))
    d = cfg.grid.dim if cfg.grid is not None else len(
        _floats(_require_param(cfg, "box_origin")))
    rve = Grid(cells=(n,) * d, h=h, origin=(0.0,) * d, periodic=(True,) * d)
    set_minus = build_corrector_set(build_field(cfg.media.left, rve),
                                    side="minus", cfg=cfg.solver)
    set_plus = build_corrector_set(build_field(cfg.media.right, rve),
                                   side="plus", cfg=cfg.solver)
    coords = build_harmonic_coordinates(set_minus.abar, set_plus.abar)
    return set_minus, set_plus, coords


def _run_interface(cfg, art):
    grid = cfg.grid
    if any(grid.periodic[:1]):
        raise ConfigError("interface experiments need a Dirichlet box")
    set_minus, set_plus, coords = _side_sets(cfg, grid.h)
    a = build_field(cfg.media, grid)
    iset = direct_box_corrector(a, coords, set_minus, set_plus,
                                cfg=cfg.solver)
    d = grid.dim
    art.csv("abar_minus.csv", [f"col{j}" for j in range(d)],
            coords.abar_minus.tolist())
    art.csv("abar_plus.csv", [f"col{j}" for j in range(d)],
            coords.abar_plus.tolist())
    art.csv("slopes.csv", ["direction", "slope"],
            [(k, float(s)) for k, s in enumerate(coords.slopes)])
    for k in sorted(iset.phi):
        art.field(f"phi_{k}.field", iset.phi[k])
    return {name: float(v) for name, v in sorted(iset.residuals.items())}


def _run_growth_scan(cfg, art):
    grid = cfg.grid
    if not all(grid.periodic):
        raise ConfigError("growth scans run on a periodic cell")
    radii = _floats(_require_param(cfg, "radii"))
    anchor = _floats(_param(cfg, "anchor", "0 " * grid.dim))
    a = build_field(cfg.media, grid)
    cset = build_corrector_set(a, cfg=cfg.solver)
    report = growth_scan(corrector_components(cset), anchor, radii)
    art.csv("growth.csv", ["radius", "oscillation"],
            list(zip(report.radii, report.oscillations)))
    fit = fit_growth_model(report)
    margin = log_preference_margin(report)
    art.json("fit.json", {
        "model": fit.model,
        "amplitude": fit.amplitude,
        "nu": fit.nu,
        "beta": fit.beta,
        "residuals": fit.residuals,
        "log_preference_margin": (margin if np.isfinite(margin) else None),
        "anchor": list(anchor),
    })
    return {"fit_residual": float(fit.residual)}


def _run_strip_demo(cfg, art):
    grid = cfg.grid
    if grid.dim != 3:
        raise ConfigError("the strip demonstration lives in d = 3")
    radii = _floats(_require_param(cfg, "radii"))
    a = build_field(cfg.media, grid)
    rve = Grid(cells=(4,) * 3, h=grid.h, origin=(0.0,) * 3,
               periodic=(True,) * 3)
    eye = build_field(ConstantSpec(tuple(map(tuple, np.eye(3)))), rve)
    set_minus = build_corrector_set(eye, side="minus", cfg=cfg.solver)
    set_plus = build_corrector_set(eye, side="plus", cfg=cfg.solver)
    coords = build_harmonic_coordinates(np.eye(3), np.eye(3))
    iset = direct_box_corrector(a, coords, set_minus, set_plus,
                                cfg=cfg.solver, directions=(0,), gauge=False)
    table = strip_growth_probe(iset.phi[0], radii)
    art.csv("growth.csv", ["radius", "difference"],
            list(zip(table.radii, table.differences)))
    art.json("fit.json", {
        "log_amplitude": table.log_amplitude,
        "offset": table.offset,
        "r_squared": table.r_squared,
    })
    stages = {name: float(v) for name, v in sorted(iset.residuals.items())}
    stages["log_fit_r_squared"] = float(table.r_squared)
    return stages


def _run_twoscale(cfg, art):
    h_micro = float(_require_param(cfg, "h_micro"))
    eps_list = _floats(_require_param(cfg, "eps"))
    box_origin = _floats(_require_param(cfg, "box_origin"))
    box_extent = _floats(_require_param(cfg, "box_extent"))
    center = _floats(_require_param(cfg, "forcing_center"))
    radius = float(_param(cfg, "forcing_radius", "0.25"))
    mass = float(_param(cfg, "forcing_mass", "1.0"))
    near = float(_param(cfg, "near_width", "8.0"))
    set_minus, set_plus, coords = _side_sets(cfg, h_micro)

    def forcing(grid):
        return radial_bump(grid, center=center, radius=radius, mass=mass)

    study = convergence_study(
        cfg.media, set_minus, set_plus, coords, eps_list=eps_list,
        forcing=forcing, box_origin=box_origin, box_extent=box_extent,
        h_micro=h_micro, cfg=cfg.solver, near_width=near)
    art.csv("eps_table.csv",
            ["eps", "cells", "sup_error", "expansion_error",
             "e1", "e2", "e1_near", "e2_near"],
            [(r.eps, r.cells[0], r.sup_error, r.expansion_error,
              r.e1_norm, r.e2_norm, r.e1_near, r.e2_near)
             for r in study.runs])
    art.json("summary.json", {
        "slope": study.slope,
        "slope_log_corrected": study.slope_log_corrected,
        "exact": study.exact,
        "ubar_sensitivity": study.ubar_sensitivity,
        "note": study.note,
        "failures": [list(f) for f in study.failures],
    })
    return {"epsilon_failures": float(len(study.failures)),
            "slope": float("nan") if study.slope is None else study.slope}


def _run_green_probe(cfg, art):
    grid = cfg.grid
    distances = _floats(_require_param(cfg, "distances"))
    axis = int(_param(cfg, "axis", "0"))
    center = _floats(_param(cfg, "center", "0 " * grid.dim))
    if not 0 <= axis < grid.dim:
        raise ConfigError(f"[green-probe] axis {axis} outside dimension")
    pairs = []
    for r in distances:
        x = list(center)
        y = list(center)
        x[axis] -= 0.5 * r
        y[axis] += 0.5 * r
        pairs.append((tuple(x), tuple(y)))
    a = build_field(cfg.media, grid)
    probe = green_decay_scan(a, pairs, cfg=cfg.solver)
    art.csv("green.csv", ["distance", "value", "boundary_limited"],
            [(e.distance, e.value, e.boundary_limited)
             for e in probe.entries])
    art.json("fit.json", {"exponent": probe.exponent,
                          "fit_residual": probe.fit_residual})
    stages = {}
    if probe.fit_residual is not None:
        stages["decay_fit_residual"] = float(probe.fit_residual)
    return stages


def _run_ensemble(cfg, art):
    if not isinstance(cfg.media, GaussianSpec):
        raise ConfigError("ensemble experiments need gaussian media as the "
                          "per-side template")
    dim = int(_param(cfg, "dim", "2"))
    separations = _floats(_require_param(cfg, "separations"))
    axis = int(_param(cfg, "axis", "1"))
    ens = EnsembleConfig(
        template=cfg.media,
        pairs=tangential_pairs(separations, dim=dim, axis=axis),
        coupling=_param(cfg, "coupling", "independent"),
        samples=int(_param(cfg, "samples", "8")),
        base_seed=int(_param(cfg, "base_seed", "0")),
        orders=_floats(_param(cfg, "orders", "1 2")),
        h=float(_param(cfg, "h", "0.25")),
        rve_extent=float(_require_param(cfg, "rve_extent")),
        pad=float(_param(cfg, "pad", "8.0")),
        gauge=_bools(_param(cfg, "gauge", "yes"))[0],
        solver=cfg.solver,
    )
    report = run_ensemble(ens)
    art.csv("moments.csv", ["separation", "order", "estimate", "std_error"],
            report.rows())
    mono = moment_monotonicity_check(report)
    art.json("fits.json", {
        "fits": [{
            "order": f.order,
            "model": f.model,
            "exponent": f.exponent,
            "amplitudes": f.amplitudes,
            "residuals": f.residuals,
        } for f in report.fits],
        "monotone": mono.passed,
        "flags": [list(f) for f in mono.flags],
        "n_success": report.n_success,
        "failures": [list(f) for f in report.failures],
    })
    return {"sample_failures": float(len(report.failures)),
            "monotonicity_flags": float(len(mono.flags))}


_RUNNERS = {
    "cell": _run_cell,
    "interface": _run_interface,
    "growth-scan": _run_growth_scan,
    "strip-demo": _run_strip_demo,
    "twoscale": _run_twoscale,
    "green-probe": _run_green_probe,
    "ensemble": _run_ensemble,
}


# ---------------------------------------------------------------------------
# manifest plumbing


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _scan_outputs(out_dir):
    entries = []
    for name in sorted(os.listdir(out_dir)):
        if name == "manifest.json":
            continue
        path = os.path.join(out_dir, name)
        if os.path.isfile(path):
            entries.append({"name": name,
                            "bytes": os.path.getsize(path),
                            "sha256": _sha256(path)})
    return tuple(entries)


def run_experiment(config_path, out_dir=None, seed=None, threads=None):
    """Execute one experiment config end to end; returns the RunManifest."""
    threads = resolve_threads(threads)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))
    cfg = parse_config(config_path)
    cfg, effective_seed = _apply_seed(cfg, seed)
    out = out_dir or cfg.out
    if not out:
        raise ConfigError("no output directory: set [experiment] out or "
                          "pass --out")
    os.makedirs(out, exist_ok=True)
    with open(config_path, "rb") as fh:
        config_hash = hashlib.sha256(fh.read()).hexdigest()
    art = Artifacts(out)
    start = time.perf_counter()
    stages = _RUNNERS[cfg.kind](cfg, art)
    wall = time.perf_counter() - start
    manifest = RunManifest(
        kind=cfg.kind,
        config_hash=config_hash,
        version=__version__,
        seed=effective_seed,
        threads=threads,
        stages={k: float(v) for k, v in stages.items()},
        wall_seconds=wall,
        outputs=_scan_outputs(out),
    )
    with open(os.path.join(out, "manifest.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# entry point


def _exit_code(exc):
    if isinstance(exc, (CertificationError, EllipticityError)):
        return 4
    if isinstance(exc, SolverError):
        return 3
    return 2


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="interhom",
        description="run, validate, or inspect toolkit experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a config end to end")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--threads", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=None)

    p_val = sub.add_parser("validate", help="schema + ellipticity precheck")
    p_val.add_argument("--config", required=True)

    p_ins = sub.add_parser("inspect", help="dump a run manifest")
    p_ins.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            manifest = run_experiment(args.config, out_dir=args.out,
                                      seed=args.seed, threads=args.threads)
            for name, value in sorted(manifest.stages.items()):
                print(f"{name}: {value:.6g}")
            print(f"manifest: {len(manifest.outputs)} outputs, "
                  f"{manifest.wall_seconds:.2f}s")
            return 0
        if args.command == "validate":
            diags = validate_config(args.config)
            if diags:
                for line in diags:
                    print(line, file=sys.stderr)
                return 2
            print("ok")
            return 0
        path = os.path.join(args.out, "manifest.json")
        if not os.path.isfile(path):
            print(f"no manifest at {path}", file=sys.stderr)
            return 2
        with open(path, encoding="utf-8") as fh:
            sys.stdout.write(fh.read())
        return 0
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    raise SystemExit(main())
