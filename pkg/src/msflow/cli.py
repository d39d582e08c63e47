"""Experiment orchestration: config parsing, pipeline wiring, artifact output.

Configuration files are flat key-value text with sections (INI style); every
command-line flag overrides its config entry. Each run writes a manifest
recording the effective configuration hash, dof counts, residuals, and wall
time, so reruns with the same config are reproducible modulo wall time.
"""

import argparse
import hashlib
import os
import sys
import time
from configparser import ConfigParser

import numpy as np

from . import conserve, fem, gmsfem, msbasis, transport, vtkout
from .field import (
    CoefficientField,
    MobilityModel,
    deterministic_features,
    gen_channelized,
    gen_inclusions,
    load_field,
    save_field,
)
from .mesh import build_nested_grids, classify_vertices, grid_summary

DEFAULTS = {
    "grid": {"nx": "10", "ny": "10", "refine": "10"},
    "field": {
        "source": "inclusions",
        "value": "1.0",
        "path": "",
        "background": "1.0",
        "features": "deterministic",
        "seed": "20240901",
        "corr_x": "0.20",
        "corr_y": "0.025",
        "threshold": "0.75",
        "contrast": "1.8e6",
    },
    "bcs": {
        "left": "dirichlet:1",
        "right": "dirichlet:0",
        "bottom": "neumann:0",
        "top": "neumann:0",
    },
    "mobility": {"mu_w": "1.0", "mu_o": "5.0", "model": "quadratic"},
    "solver": {"method": "gmsfem", "level": "4", "levels": "1,2,4,6",
               "enrich_neumann": "false"},
    "transport": {
        "substeps": "5",
        "cfl": "0.5",
        "final_time": "auto",
        "pore_volumes": "0.15",
        "snapshots": "",
        "inflow": "1.0",
        "dt_max": "1.0",
        "transport_level": "fine",
    },
    "output": {"dir": "out"},
}


class ExperimentConfig:
    """Validated experiment configuration with file-backed defaults."""

    def __init__(self, path=None, overrides=None):
        cp = ConfigParser()
        cp.read_dict(DEFAULTS)
        if path:
            if not os.path.exists(path):
                raise FileNotFoundError(f"config file {path} does not exist")
            cp.read(path)
        for (section, key), value in (overrides or {}).items():
            cp.set(section, key, str(value))
        self.cp = cp
        self.validate()

    def get(self, section, key):
        return self.cp.get(section, key)

    def getint(self, section, key):
        return self.cp.getint(section, key)

    def getfloat(self, section, key):
        return self.cp.getfloat(section, key)

    def validate(self):
        if self.getint("grid", "nx") < 1 or self.getint("grid", "ny") < 1:
            raise ValueError("grid: nx and ny must be positive")
        r = self.getint("grid", "refine")
        if r < 1 or (r != 1 and r % 2):
            raise ValueError("grid: refine must be 1 or even")
        if self.get("field", "source") not in ("constant", "file", "inclusions", "channelized"):
            raise ValueError(f"field: unknown source {self.get('field', 'source')!r}")
        if self.get("field", "source") == "file" and not os.path.exists(self.get("field", "path")):
            raise ValueError(f"field: file {self.get('field', 'path')!r} does not exist")
        if self.getint("solver", "level") < 1:
            raise ValueError("solver: level must be >= 1")
        if self.get("solver", "method") not in ("reference", "msfem", "gmsfem"):
            raise ValueError(f"solver: unknown method {self.get('solver', 'method')!r}")
        for side in ("left", "right", "bottom", "top"):
            spec = self.get("bcs", side)
            kind = spec.split(":", 1)[0]
            if kind not in ("dirichlet", "neumann"):
                raise ValueError(f"bcs: side {side} has unknown kind {kind!r}")
        cfl = self.getfloat("transport", "cfl")
        if not 0 < cfl <= 1:
            raise ValueError("transport: cfl must be in (0, 1]")

    def levels(self):
        return [int(t) for t in self.get("solver", "levels").split(",") if t.strip()]

    def digest(self):
        h = hashlib.sha256()
        for section in sorted(self.cp.sections()):
            for key in sorted(self.cp[section]):
                h.update(f"{section}.{key}={self.cp[section][key]}\n".encode())
        return h.hexdigest()[:16]


def build_grid(cfg):
    return build_nested_grids(
        cfg.getint("grid", "nx"), cfg.getint("grid", "ny"), cfg.getint("grid", "refine")
    )


def build_field(cfg, grid):
    source = cfg.get("field", "source")
    if source == "constant":
        value = cfg.getfloat("field", "value")
        return CoefficientField(grid, np.full((grid.Ny, grid.Nx), value))
    if source == "file":
        return load_field(cfg.get("field", "path"), grid)
    if source == "inclusions":
        spec = cfg.get("field", "features")
        if spec.strip() == "deterministic":
            features = deterministic_features()
        else:
            features = []
            for chunk in spec.split(";"):
                if chunk.strip():
                    x0, y0, x1, y1, v = (float(t) for t in chunk.split(","))
                    features.append((x0, y0, x1, y1, v))
        return gen_inclusions(grid, cfg.getfloat("field", "background"), features)
    return gen_channelized(
        grid,
        seed=cfg.getint("field", "seed"),
        corr_x=cfg.getfloat("field", "corr_x"),
        corr_y=cfg.getfloat("field", "corr_y"),
        threshold=cfg.getfloat("field", "threshold"),
        contrast=cfg.getfloat("field", "contrast"),
    )


def build_bcs(cfg):
    sides = {}
    for side in ("left", "right", "bottom", "top"):
        kind, _, value = cfg.get("bcs", side).partition(":")
        sides[side] = (kind, float(value) if value else 0.0)
    return fem.BoundaryConditions(**sides)


def build_mobility(cfg):
    model = cfg.get("mobility", "model")
    if model == "quadratic":
        k_rw, k_ro = None, None
    elif model == "linear":
        k_rw, k_ro = (lambda s: s), (lambda s: 1.0 - s)
    else:
        raise ValueError(f"mobility: unknown model {model!r}")
    return MobilityModel(
        cfg.getfloat("mobility", "mu_w"), cfg.getfloat("mobility", "mu_o"),
        k_rw=k_rw, k_ro=k_ro,
    )


def write_manifest(path, cfg, entries, started):
    lines = [f"config_hash {cfg.digest()}"]
    for key in sorted(entries):
        lines.append(f"{key} {entries[key]}")
    lines.append(f"wall_time {time.perf_counter() - started:.3f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _solve_pipeline(cfg, grid, k_field, bcs, level=None, basis=None):
    """Solve the pressure problem per the configured method.

    Returns (fine nodal pressure, info dict, basis or None).
    """
    method = cfg.get("solver", "method")
    lamk = k_field.cells()
    info = {"method": method}
    if method == "reference":
        p = fem.solve_pressure(grid.fine, lamk, None, bcs)
        info["dofs"] = grid.fine.n_vertices
        return p, info, None
    classes = classify_vertices(grid.coarse, bcs.layout())
    L = level if level is not None else (1 if method == "msfem" else cfg.getint("solver", "level"))
    if method == "msfem":
        L = 1
    if basis is None:
        basis = msbasis.build_enriched(
            grid, k_field, classes, L,
            enrich_neumann=cfg.cp.getboolean("solver", "enrich_neumann"),
        )
    space = gmsfem.build_coarse_space(basis, classes, L)
    p, coeffs = gmsfem.solve_projected(space, lamk, None, bcs)
    info["dofs"] = space.n_dofs
    info["level"] = L
    return p, info, basis


def cmd_gen_perm(cfg, out):
    t0 = time.perf_counter()
    grid = build_grid(cfg)
    k = build_field(cfg, grid)
    save_field(os.path.join(out, "perm.txt"), k.values)
    vtkout.write_cell_scalar(
        os.path.join(out, "perm.vtk"), "permeability", k.values,
        (grid.fine.hx, grid.fine.hy),
    )
    write_manifest(
        os.path.join(out, "manifest.txt"), cfg,
        {
            "kmin": f"{k.kmin:.12g}",
            "kmax": f"{k.kmax:.12g}",
            "contrast": f"{k.contrast:.12g}",
            "seed": cfg.get("field", "seed"),
            "cells": grid.fine.n_cells,
        },
        t0,
    )
    return 0


def cmd_pressure(cfg, out):
    t0 = time.perf_counter()
    grid = build_grid(cfg)
    k = build_field(cfg, grid)
    bcs = build_bcs(cfg)
    p, info, _ = _solve_pipeline(cfg, grid, k, bcs)
    save_field(os.path.join(out, "pressure.txt"), p.reshape(grid.Ny + 1, grid.Nx + 1))
    vtkout.write_point_scalar(
        os.path.join(out, "pressure.vtk"), "pressure",
        p.reshape(grid.Ny + 1, grid.Nx + 1), (grid.fine.hx, grid.fine.hy),
    )
    classes = classify_vertices(grid.coarse, bcs.layout())
    with open(os.path.join(out, "grid.txt"), "w") as fh:
        fh.write(grid_summary(grid, classes))
    entries = {k2: v for k2, v in info.items()}
    write_manifest(os.path.join(out, "manifest.txt"), cfg, entries, t0)
    return 0


def _postprocess(cfg, grid, k_field, bcs, p, basis):
    method = cfg.get("solver", "method")
    lamk = k_field.cells()
    if method == "reference":
        flux = conserve.postprocess_fine(grid.fine, lamk, p, None, bcs)
        return flux, None
    post = conserve.postprocess_coarse(grid, basis.chi, lamk, p, None, bcs)
    return post.field, post


def cmd_flux(cfg, out):
    t0 = time.perf_counter()
    grid = build_grid(cfg)
    k = build_field(cfg, grid)
    bcs = build_bcs(cfg)
    p, info, basis = _solve_pipeline(cfg, grid, k, bcs)
    flux, post = _postprocess(cfg, grid, k, bcs, p, basis)
    report = conserve.conservation_audit(flux, None, grid)
    conserve.dump_flux(flux, os.path.join(out, "flux.csv"))
    conserve.dump_audit(report, os.path.join(out, "audit.txt"))
    info.update({
        "flux_level": flux.level,
        "audit_rel_max": f"{report.rel_max:.12g}",
    })
    write_manifest(os.path.join(out, "manifest.txt"), cfg, info, t0)
    return 0


def cmd_downscale(cfg, out):
    t0 = time.perf_counter()
    grid = build_grid(cfg)
    k = build_field(cfg, grid)
    bcs = build_bcs(cfg)
    method = cfg.get("solver", "method")
    if method == "reference":
        raise ValueError("downscale applies to the multiscale pipelines; "
                         "the reference flux is already fine-scale")
    p, info, basis = _solve_pipeline(cfg, grid, k, bcs)
    post = conserve.postprocess_coarse(grid, basis.chi, k.cells(), p, None, bcs)
    fine_flux, defects = conserve.downscale(grid, post, k.cells(), None)
    report = conserve.conservation_audit(fine_flux, None)
    conserve.dump_flux(fine_flux, os.path.join(out, "flux_fine.csv"))
    conserve.dump_audit(report, os.path.join(out, "audit_fine.txt"))
    vtkout.write_velocity(os.path.join(out, "velocity.vtk"), fine_flux)
    info.update({
        "audit_rel_max": f"{report.rel_max:.12g}",
        "max_cv_defect": f"{defects.max():.12g}",
    })
    write_manifest(os.path.join(out, "manifest.txt"), cfg, info, t0)
    return 0


def cmd_single_phase_compare(cfg, out):
    t0 = time.perf_counter()
    grid = build_grid(cfg)
    k = build_field(cfg, grid)
    bcs = build_bcs(cfg)
    levels = cfg.levels()
    classes = classify_vertices(grid.coarse, bcs.layout())
    p_ref = fem.solve_pressure(grid.fine, k.cells(), None, bcs)
    ref_flux = conserve.postprocess_fine(grid.fine, k.cells(), p_ref, None, bcs)
    basis = msbasis.build_enriched(
        grid, k, classes, max(levels),
        enrich_neumann=cfg.cp.getboolean("solver", "enrich_neumann"),
    )
    rows = []
    info = {"reference_dofs": grid.fine.n_vertices}
    for L in levels:
        space = gmsfem.build_coarse_space(basis, classes, L)
        p, _ = gmsfem.solve_projected(space, k.cells(), None, bcs)
        post = conserve.postprocess_coarse(grid, basis.chi, k.cells(), p, None, bcs)
        fine_flux, _ = conserve.downscale(grid, post, k.cells(), None)
        err = conserve.velocity_error(fine_flux, ref_flux)
        rows.append((L, space.n_dofs, err))
        info[f"dofs_L{L}"] = space.n_dofs
        info[f"velocity_error_L{L}"] = f"{err:.12g}"
    with open(os.path.join(out, "velocity_errors.csv"), "w") as fh:
        fh.write("level,dofs,velocity_error\n")
        for L, d, e in rows:
            fh.write(f"{L},{d},{e:.12g}\n")
    write_manifest(os.path.join(out, "manifest.txt"), cfg, info, t0)
    return 0


def cmd_two_phase(cfg, out):
    t0 = time.perf_counter()
    grid = build_grid(cfg)
    k = build_field(cfg, grid)
    bcs = build_bcs(cfg)
    mob = build_mobility(cfg)
    method = cfg.get("solver", "method")
    ft = cfg.get("transport", "final_time")
    if ft == "auto":
        p0 = fem.solve_pressure(grid.fine, k.cells(), None, bcs)
        f0 = conserve.postprocess_fine(grid.fine, k.cells(), p0, None, bcs)
        influx = -min(f0.bleft.sum(), -1e-300)
        final_time = cfg.getfloat("transport", "pore_volumes") / max(influx, 1e-300)
    else:
        final_time = float(ft)
    snaps = cfg.get("transport", "snapshots")
    snapshot_times = (
        [float(t) for t in snaps.split(",") if t.strip()] if snaps.strip() else None
    )
    kwargs = dict(
        substeps=cfg.getint("transport", "substeps"),
        cfl=cfg.getfloat("transport", "cfl"),
        final_time=final_time,
        snapshot_times=snapshot_times,
        inflow={"left": cfg.getfloat("transport", "inflow")},
        dt_max=cfg.getfloat("transport", "dt_max"),
    )
    if method == "reference":
        run = transport.run_two_phase(grid, k, bcs, mob, method="reference", **kwargs)
        info = {"method": method, "dofs": grid.fine.n_vertices}
    else:
        L = 1 if method == "msfem" else cfg.getint("solver", "level")
        run = transport.run_two_phase(
            grid, k, bcs, mob, method="gmsfem", L=L,
            transport_level=cfg.get("transport", "transport_level"), **kwargs
        )
        info = {"method": method, "level": L}
    for i, snap in enumerate(run.snapshots):
        transport.save_snapshot(os.path.join(out, f"saturation_{i}.txt"), snap)
        vtkout.write_point_scalar(
            os.path.join(out, f"saturation_{i}.vtk"), "saturation",
            snap.values, (snap.mesh.hx, snap.mesh.hy),
        )
    if method != "reference":
        ref = transport.run_two_phase(grid, k, bcs, mob, method="reference", **kwargs)
        errors = transport.saturation_error(run, ref)
        transport.save_error_curve(
            os.path.join(out, "saturation_error.csv"), run.times, errors
        )
        info["final_error"] = f"{errors[-1]:.12g}"
    info.update({
        "final_time": f"{final_time:.12g}",
        "pressure_solves": run.n_pressure_solves,
        "substeps_taken": run.n_substeps,
        "mass_residual_max": f"{run.mass_residual_max:.12g}",
        "smin": f"{run.smin:.12g}",
        "smax": f"{run.smax:.12g}",
    })
    write_manifest(os.path.join(out, "manifest.txt"), cfg, info, t0)
    return 0


def cmd_audit(cfg, out):
    t0 = time.perf_counter()
    grid = build_grid(cfg)
    k = build_field(cfg, grid)
    bcs = build_bcs(cfg)
    p, info, basis = _solve_pipeline(cfg, grid, k, bcs)
    flux, post = _postprocess(cfg, grid, k, bcs, p, basis)
    report = conserve.conservation_audit(flux, None, grid)
    raw = conserve.raw_flux_fine(grid.fine, k.cells(),
                                 fem.solve_pressure(grid.fine, k.cells(), None, bcs))
    raw_report = conserve.conservation_audit(raw, None)
    conserve.dump_audit(report, os.path.join(out, "audit.txt"))
    conserve.dump_audit(raw_report, os.path.join(out, "audit_raw.txt"))
    info.update({
        "audit_rel_max": f"{report.rel_max:.12g}",
        "raw_audit_rel_max": f"{raw_report.rel_max:.12g}",
    })
    write_manifest(os.path.join(out, "manifest.txt"), cfg, info, t0)
    return 0


COMMANDS = {
    "gen-perm": cmd_gen_perm,
    "pressure": cmd_pressure,
    "flux": cmd_flux,
    "downscale": cmd_downscale,
    "single-phase-compare": cmd_single_phase_compare,
    "two-phase": cmd_two_phase,
    "audit": cmd_audit,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="msflow",
        description="Multiscale flow experiments: conservative flux "
        "postprocessing and two-phase transport.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="experiment config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="random seed override")
    parser.add_argument("--level", type=int, default=None, help="enrichment level override")
    parser.add_argument("--coarse", nargs=2, type=int, metavar=("NX", "NY"), default=None)
    parser.add_argument("--refine", type=int, default=None, help="refinement factor override")
    args = parser.parse_args(argv)

    overrides = {}
    if args.seed is not None:
        overrides[("field", "seed")] = args.seed
    if args.level is not None:
        overrides[("solver", "level")] = args.level
    if args.coarse is not None:
        overrides[("grid", "nx")], overrides[("grid", "ny")] = args.coarse
    if args.refine is not None:
        overrides[("grid", "refine")] = args.refine
    if args.out is not None:
        overrides[("output", "dir")] = args.out

    try:
        cfg = ExperimentConfig(args.config, overrides)
        out = cfg.get("output", "dir")
        os.makedirs(out, exist_ok=True)
        return COMMANDS[args.command](cfg, out)
    except (ValueError, FileNotFoundError, conserve.CompatibilityError,
            fem.SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
