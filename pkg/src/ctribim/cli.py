"""Command line driver.

Configuration files hold flat ``key = value`` lines with dotted keys, for
example ``gmres.tol = 1e-8``.  Lines starting with ``#`` are comments.
Every key has a documented default (see :data:`SCHEMA`); unknown keys,
values of the wrong type and violated constraints are reported with the
offending key.

Subcommands
-----------
weights   build or load the correction weight table
surface   sample a surface on its grid and write an SDF file
solve     assemble, solve and post-process one configuration
converge  repeat ``solve`` over a list of grids and tabulate differences
area      tube-sum areas with the three Jacobian choices

Exit codes are 0 on success, 2 for configuration errors and 3 for
numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .analysis import (AnalysisError, ConvergenceRow, SphereOracle, consecutive_diffs,
                       export_field, observed_order, polarization_energy, psi_rxn,
                       surface_area, write_convergence)
from .geometry import (TORUS_ANGLES, CartesianGrid, GeometryError, SphereField, SurfaceField,
                       TorusField, enumerate_tube, read_sdf, write_sdf)
from .kernels import KernelError, KernelParams
from .surface_gen import (AtomSet, SesConfig, SurfaceGenError, generate_ses, read_atoms)
from .system import OperatorError, SolverError, assemble, build_rhs, gmres_solve
from .weights import DEFAULT_N, DEFAULT_P, DEFAULT_TOL, WeightError, cached_table, load_table

__all__ = [
    "ConfigError",
    "RunConfig",
    "SCHEMA",
    "parse_config",
    "parse_text",
    "ingest_atoms",
    "build_surface",
    "run_solve",
    "run_convergence",
    "run_area",
    "run_surface",
    "run_weights",
    "main",
]

log = logging.getLogger("ctribim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    """Invalid configuration; the message names the key."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


def _floats(n: Optional[int] = None):
    def conv(s: str):
        parts = [p for p in s.replace(";", ",").split(",") if p.strip()]
        vals = tuple(float(p) for p in parts)
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("values must be finite")
        return vals
    return conv


def _ints(s: str):
    return tuple(int(p) for p in s.split(",") if p.strip())


def _opt(conv):
    def wrapped(s: str):
        if s.strip().lower() in ("", "none"):
            return None
        return conv(s)
    return wrapped


def _choice(*opts):
    def conv(s: str):
        v = s.strip().lower()
        if v not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return v
    return conv


#: key -> (converter, default, description)
SCHEMA: dict = {
    "surface.kind": (_choice("sphere", "torus", "ses", "sdf"), "sphere",
                     "analytic sphere or torus, SES from atoms, or an SDF file"),
    "surface.radius": (float, 10.0, "sphere radius"),
    "surface.center": (_floats(3), (0.0, 0.0, 0.0), "sphere or torus centre"),
    "surface.R1": (float, 1.0, "torus centre-line radius"),
    "surface.R2": (float, 0.5, "torus tube radius"),
    "surface.angles": (_floats(3), tuple(TORUS_ANGLES), "torus rotation angles about x, y, z"),
    "surface.atoms": (_opt(str), None, "atom file for SES surfaces"),
    "surface.probe": (float, 1.4, "SES probe radius"),
    "surface.margin": (float, 1.0, "SES box margin beyond the inflated atoms"),
    "surface.band": (float, 8.0, "SES exact band half-width in cells"),
    "surface.tol": (float, 1e-10, "SES coverage tolerance"),
    "surface.sdf": (_opt(str), None, "SDF grid file for sdf surfaces"),
    "grid.n": (_opt(int), None, "nodes per axis (cube box mode)"),
    "grid.box": (_opt(_floats(2)), None, "lo,hi of the cube box"),
    "grid.box_scale": (float, 2.0, "default box half-width over the surface extent"),
    "grid.divisions": (_opt(int), None, "spacing mode: h = grid.length / divisions"),
    "grid.length": (_opt(float), None, "spacing mode reference length (default: sphere radius)"),
    "tube.eps_factor": (float, 2.0, "tube half-width as a multiple of h"),
    "tube.eps": (_opt(float), None, "fixed tube half-width, overrides eps_factor"),
    "tube.theta_rel": (float, 0.1, "relative threshold of the good/bad classification"),
    "tube.length_scale": (_opt(float), None, "curvature floor length (default 25 h)"),
    "method": (_choice("kreg", "ctr2", "hyb"), "ctr2", "quadrature"),
    "kernel.eps_i": (float, 1.0, "interior dielectric constant"),
    "kernel.eps_e": (float, 80.0, "exterior dielectric constant"),
    "kernel.kappa": (float, 0.125, "screening parameter"),
    "kreg.tau_factor": (float, 2.0, "regularization radius as a multiple of h"),
    "weights.N": (int, DEFAULT_N, "Fourier modes of the weight families"),
    "weights.P": (int, DEFAULT_P, "shift grid points per axis"),
    "weights.tol": (float, DEFAULT_TOL, "limit tolerance"),
    "weights.cache": (_opt(str), "default", "cache directory, 'default' or none"),
    "weights.path": (_opt(str), None, "explicit table file"),
    "gmres.tol": (float, 1e-8, "relative residual tolerance"),
    "gmres.maxiter": (int, 200, "iteration limit"),
    "gmres.scaling": (_choice("diagonal", "none"), "diagonal", "right scaling by Lambda^-1"),
    "charges.centers": (_opt(_floats()), None, "x,y,z;x,y,z;... charge positions"),
    "charges.values": (_opt(_floats()), None, "charge values"),
    "charges.file": (_opt(str), None, "atom file providing charges"),
    "evaluate.point": (_floats(3), (0.0, 0.0, 0.0), "where psi_rxn is reported"),
    "output.dir": (str, "out", "output directory"),
    "output.field": (_opt(str), "field.csv", "field CSV name or none"),
    "output.metrics": (str, "metrics.csv", "metrics CSV name"),
    "output.summary": (str, "summary.txt", "summary text name"),
    "output.sdf": (str, "surface.sdf", "SDF name written by the surface subcommand"),
    "output.table": (str, "convergence.csv", "table written by converge and area"),
    "converge.grids": (_opt(_ints), None, "grid.n or grid.divisions values, increasing"),
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration with every key of :data:`SCHEMA` present."""

    values: dict
    base: Path = Path(".")

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **updates) -> "RunConfig":
        """Copy with dotted keys (use ``__`` for ``.``) replaced and revalidated."""
        vals = dict(self.values)
        for k, v in updates.items():
            vals[k.replace("__", ".")] = v
        return _validate(vals, self.base)

    def path(self, key: str) -> Optional[Path]:
        v = self.values[key]
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base / p

    def out(self, key: str) -> Path:
        return Path(self.values["output.dir"]) / self.values[key]

    @property
    def params(self) -> KernelParams:
        return KernelParams(self["kernel.eps_i"], self["kernel.eps_e"], self["kernel.kappa"])


def _parse_lines(lines: Sequence[str], origin: str) -> dict:
    raw = {}
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        k, v = (t.strip() for t in s.split("=", 1))
        if k not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key '{k}'")
        raw[k] = v
    return raw


def _convert(raw: dict) -> dict:
    vals = {k: d for k, (_, d, _) in SCHEMA.items()}
    for k, v in raw.items():
        conv = SCHEMA[k][0]
        try:
            vals[k] = conv(v)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{k}: cannot parse {v!r}: {exc}") from None
    return vals


def _validate(vals: dict, base: Path) -> RunConfig:
    def need(cond, key, msg):
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    need(vals["grid.box_scale"] > 1, "grid.box_scale", "must exceed 1")
    for key in ("surface.radius", "surface.probe", "kernel.eps_i", "kernel.eps_e", "tube.eps_factor",
                "kreg.tau_factor", "weights.tol"):
        need(vals[key] > 0, key, "must be positive")
    need(vals["kernel.kappa"] >= 0, "kernel.kappa", "must be nonnegative")
    need(vals["surface.R1"] > vals["surface.R2"] > 0, "surface.R1", "torus needs R1 > R2 > 0")
    need(0 < vals["gmres.tol"] < 1, "gmres.tol", "must lie in (0, 1)")
    need(vals["gmres.maxiter"] >= 1, "gmres.maxiter", "must be at least 1")
    need(vals["weights.N"] >= 1 and vals["weights.P"] >= 4, "weights.N", "need N >= 1 and P >= 4")
    need(vals["tube.theta_rel"] > 0, "tube.theta_rel", "must be positive")
    if vals["tube.eps"] is not None:
        need(vals["tube.eps"] > 0, "tube.eps", "must be positive")
    else:
        need(vals["tube.eps_factor"] >= 1.0, "tube.eps_factor",
             f"eps = {vals['tube.eps_factor']:g} h is smaller than h")
    if vals["grid.n"] is not None:
        need(vals["grid.n"] >= 8, "grid.n", "must be at least 8")
        need(vals["grid.divisions"] is None, "grid.divisions", "cannot be combined with grid.n")
    if vals["grid.divisions"] is not None:
        need(vals["grid.divisions"] >= 2, "grid.divisions", "must be at least 2")
    if vals["grid.box"] is not None:
        lo, hi = vals["grid.box"]
        need(hi > lo, "grid.box", "needs lo < hi")
    kind = vals["surface.kind"]
    cfg = RunConfig(vals, base)
    if kind == "ses":
        p = cfg.path("surface.atoms")
        need(p is not None, "surface.atoms", "required for ses surfaces")
        need(p.is_file(), "surface.atoms", f"file {p} does not exist")
    if kind == "sdf":
        p = cfg.path("surface.sdf")
        need(p is not None, "surface.sdf", "required for sdf surfaces")
        need(p.is_file(), "surface.sdf", f"file {p} does not exist")
    if vals["charges.file"] is not None:
        need(cfg.path("charges.file").is_file(), "charges.file", "file does not exist")
    if (vals["charges.centers"] is None) != (vals["charges.values"] is None):
        raise ConfigError("charges.centers: charges.centers and charges.values go together")
    if vals["charges.centers"] is not None:
        need(len(vals["charges.centers"]) == 3 * len(vals["charges.values"]), "charges.centers",
             "needs three coordinates per charge value")
    if vals["method"] in ("ctr2", "hyb"):
        if vals["weights.path"] is not None:
            need(cfg.path("weights.path").is_file(), "weights.path",
                 f"file {cfg.path('weights.path')} does not exist")
        else:
            need(vals["weights.cache"] is not None, "weights.cache",
                 f"method {vals['method']} needs a weight table path or cache")
    if vals["converge.grids"] is not None:
        g = vals["converge.grids"]
        need(len(g) >= 3, "converge.grids", "needs at least three grids")
        need(all(b > a for a, b in zip(g, g[1:])), "converge.grids", "must increase strictly")
    return cfg


def parse_text(text: str, overrides: Sequence[str] = (), base=".", origin="<config>") -> RunConfig:
    """Parse configuration text plus ``key=value`` overrides."""
    raw = _parse_lines(text.splitlines(), origin)
    raw.update(_parse_lines(list(overrides), "--override"))
    return _validate(_convert(raw), Path(base))


def parse_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    """Read and validate a configuration file.

    Relative file paths inside the configuration resolve against the
    directory of the file.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file {path} does not exist")
    return parse_text(path.read_text(), overrides, base=path.parent, origin=str(path))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def ingest_atoms(path, key: str = "surface.atoms") -> AtomSet:
    """Read an atom file and log the count and bounding box.

    Raises
    ------
    ConfigError
        Malformed or empty file, reported with the line number.
    """
    try:
        atoms = read_atoms(path)
    except SurfaceGenError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    lo, hi = atoms.bounding_box
    log.info("read %d atoms from %s; bounding box %s .. %s", len(atoms), path,
             np.array2string(lo, precision=3), np.array2string(hi, precision=3))
    return atoms


@dataclass(frozen=True)
class Surface:
    """Surface field with the grid it is enumerated on and its charges."""

    field: SurfaceField
    grid: CartesianGrid
    eps: float
    centers: np.ndarray
    charges: np.ndarray
    exact_psi: Optional[float] = None


def _grid_for(cfg: RunConfig, extent: float, eps_hint: Callable[[float], float]) -> CartesianGrid:
    if cfg["grid.divisions"] is not None:
        length = cfg["grid.length"] or cfg["surface.radius"]
        h = length / cfg["grid.divisions"]
        c = np.asarray(cfg["surface.center"])
        g = CartesianGrid.centered(h, extent + eps_hint(h) + 4 * h)
        return CartesianGrid(g.dims, tuple(np.asarray(g.origin) + c), h)
    n = cfg["grid.n"] or 64
    if cfg["grid.box"] is not None:
        lo, hi = cfg["grid.box"]
    else:
        c = np.asarray(cfg["surface.center"])
        half = cfg["grid.box_scale"] * extent
        return CartesianGrid((n, n, n), tuple(c - half), 2 * half / (n - 1))
    return CartesianGrid.cube(n, lo, hi)


def _eps(cfg: RunConfig, h: float) -> float:
    return cfg["tube.eps"] if cfg["tube.eps"] is not None else cfg["tube.eps_factor"] * h


def _charges(cfg: RunConfig, atoms: Optional[AtomSet]):
    if cfg["charges.centers"] is not None:
        return (np.asarray(cfg["charges.centers"]).reshape(-1, 3),
                np.asarray(cfg["charges.values"], dtype=float))
    if cfg["charges.file"] is not None:
        a = ingest_atoms(cfg.path("charges.file"), "charges.file")
        return a.centers.copy(), a.charges.copy()
    if atoms is not None:
        return atoms.centers.copy(), atoms.charges.copy()
    return np.asarray([cfg["surface.center"]], dtype=float), np.array([1.0])


def build_surface(cfg: RunConfig) -> Surface:
    """Surface field, grid, tube half-width and charges for a configuration."""
    kind = cfg["surface.kind"]
    if kind == "sphere":
        r = cfg["surface.radius"]
        field = SphereField(r, cfg["surface.center"])
        grid = _grid_for(cfg, r, lambda h: _eps(cfg, h))
        centers, q = _charges(cfg, None)
        exact = None
        if cfg["charges.centers"] is None and cfg["charges.file"] is None:
            exact = SphereOracle(r, 1.0, cfg.params, tuple(cfg["surface.center"])).psi_rxn_center()
            if not np.allclose(cfg["evaluate.point"], cfg["surface.center"]):
                exact = None
        return Surface(field, grid, _eps(cfg, grid.h), centers, q, exact)
    if kind == "torus":
        field = TorusField(cfg["surface.R1"], cfg["surface.R2"], cfg["surface.angles"],
                           cfg["surface.center"])
        grid = _grid_for(cfg, cfg["surface.R1"] + cfg["surface.R2"], lambda h: _eps(cfg, h))
        centers, q = _charges(cfg, None)
        return Surface(field, grid, _eps(cfg, grid.h), centers, q)
    if kind == "ses":
        atoms = ingest_atoms(cfg.path("surface.atoms"))
        n = cfg["grid.n"] or 64
        if cfg["grid.box"] is not None:
            sc = SesConfig(cfg["surface.probe"], CartesianGrid.cube(n, *cfg["grid.box"]),
                           cfg["surface.band"], cfg["surface.tol"])
        else:
            sc = SesConfig.for_atoms(atoms, cfg["surface.probe"], n, cfg["surface.margin"],
                                     band=cfg["surface.band"], tol=cfg["surface.tol"])
        res = generate_ses(atoms, sc)
        log.info("SES on %s grid: %d exact nodes, %d cavity nodes filled", sc.grid.dims,
                 res.n_exact, res.n_cavity)
        centers, q = _charges(cfg, atoms)
        return Surface(res.field, sc.grid, _eps(cfg, sc.grid.h), centers, q)
    try:
        field = read_sdf(cfg.path("surface.sdf"))
    except GeometryError as exc:
        raise ConfigError(f"surface.sdf: {exc}") from None
    centers, q = _charges(cfg, None)
    return Surface(field, field.grid, _eps(cfg, field.grid.h), centers, q)


def _table(cfg: RunConfig):
    if cfg["method"] == "kreg":
        return None
    if cfg["weights.path"] is not None:
        return load_table(cfg.path("weights.path"))
    cache = None if cfg["weights.cache"] == "default" else cfg["weights.cache"]
    return cached_table(cfg["weights.N"], cfg["weights.P"], cfg["weights.tol"], cache_dir=cache,
                        progress=lambda f: log.info("weight table %3.0f%%", 100 * f))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_metrics(path: Path, metrics: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["key", "value"])
        for k, v in metrics.items():
            wr.writerow([k, _fmt(v)])


def solve_once(cfg: RunConfig, table=None) -> tuple:
    """Run surface, tube, assembly, GMRES and post-processing.

    Returns
    -------
    metrics : dict
        Deterministic results.
    extras : dict
        Tube, solution and timings.
    """
    stage = "surface"
    t0 = time.perf_counter()
    try:
        surf = build_surface(cfg)
        stage = "tube"
        tube = enumerate_tube(surf.field, surf.grid, surf.eps, theta_rel=cfg["tube.theta_rel"],
                              length_scale=cfg["tube.length_scale"])
        stage = "weights"
        if table is None:
            table = _table(cfg)
        stage = "assemble"
        params = cfg.params
        method = cfg["method"]
        t1 = time.perf_counter()
        op = assemble(tube, params, method, table=table, tau=cfg["kreg.tau_factor"] * tube.h)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rhs = build_rhs(surf.centers, surf.charges, tube, params)
        stage = "gmres"
        t2 = time.perf_counter()
        scaling = None if cfg["gmres.scaling"] == "none" else "diagonal"
        sol = gmres_solve(op, rhs, cfg["gmres.tol"], cfg["gmres.maxiter"], scaling=scaling)
        t3 = time.perf_counter()
        stage = "postprocess"
        value = psi_rxn(cfg["evaluate.point"], sol.x, tube, params, method)
    except (GeometryError, SurfaceGenError, OperatorError, SolverError, WeightError,
            KernelError, AnalysisError) as exc:
        raise StageError(stage, exc) from exc
    metrics = {
        "surface": cfg["surface.kind"],
        "method": method,
        "grid": "x".join(str(n) for n in surf.grid.dims),
        "h": surf.grid.h,
        "eps": surf.eps,
        "nodes": tube.size,
        "bad_nodes": tube.n_bad,
        "area": surface_area(tube, {"ctr2": "jh", "kreg": "one", "hyb": "hybrid"}[method]),
        "psi_rxn": value,
        "gmres_iterations": sol.iterations,
        "gmres_residual": sol.residual,
    }
    if surf.exact_psi is not None:
        metrics["psi_rxn_exact"] = surf.exact_psi
        metrics["psi_rxn_relerr"] = abs(value - surf.exact_psi) / abs(surf.exact_psi)
    if cfg["surface.kind"] == "ses" or cfg["charges.file"] is not None:
        try:
            metrics["g_pol"] = polarization_energy(sol.x, surf.centers, surf.charges, tube,
                                                   params, method)
        except AnalysisError as exc:
            log.warning("polarization energy skipped: %s", exc)
    extras = {"tube": tube, "solution": sol, "table": table,
              "times": {"surface+tube": t1 - t0, "assemble": t2 - t1, "gmres": t3 - t2}}
    return metrics, extras


class StageError(RuntimeError):
    """Numerical failure tagged with the pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def run_solve(cfg: RunConfig) -> dict:
    """Solve one configuration and write field, metrics and summary files."""
    metrics, extras = solve_once(cfg)
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["output.field"] is not None:
        export_field(extras["tube"], extras["solution"].x, cfg.out("output.field"))
    _write_metrics(cfg.out("output.metrics"), metrics)
    lines = [f"{k}: {_fmt(v)}" for k, v in metrics.items()]
    lines += [f"time {k}: {v:.2f} s" for k, v in extras["times"].items()]
    cfg.out("output.summary").write_text("\n".join(lines) + "\n")
    return metrics


def _grid_key(cfg: RunConfig) -> str:
    return "grid.divisions" if cfg["grid.divisions"] is not None else "grid.n"


def run_convergence(cfg: RunConfig, grids: Optional[Sequence[int]] = None) -> list:
    """Solve on increasing grids and tabulate consecutive differences.

    Returns the rows; the CSV goes to ``output.table``.  The observed order
    is fitted to the errors against the exact value when one is known and
    to the consecutive differences otherwise, and stored as an attribute of
    the returned list.
    """
    grids = list(grids if grids is not None else (cfg["converge.grids"] or ()))
    if len(grids) < 3:
        raise ConfigError("converge.grids: needs at least three grids")
    if not all(b > a for a, b in zip(grids, grids[1:])):
        raise ConfigError("converge.grids: grid list must increase strictly")
    key = _grid_key(cfg)
    table = _table(cfg)
    rows = []
    hs = []
    vals = []
    errs = []
    prev = None
    for n in grids:
        metrics, _ = solve_once(cfg.replace(**{key.replace(".", "__"): n}), table=table)
        v = metrics["psi_rxn"]
        hs.append(metrics["h"])
        vals.append(v)
        if "psi_rxn_relerr" in metrics:
            errs.append(metrics["psi_rxn_relerr"])
        rows.append(ConvergenceRow(n, metrics["eps"], metrics["method"], v,
                                   None if prev is None else abs(v - prev),
                                   metrics["gmres_iterations"]))
        log.info("grid %d: psi_rxn %.10g, %d iterations", n, v, metrics["gmres_iterations"])
        prev = v
    path = cfg.out("output.table")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_convergence(rows, path)
    result = _Rows(rows)
    if errs and all(e > 0 for e in errs):
        result.order = observed_order(hs, errs)
    else:
        d = consecutive_diffs(vals)
        result.order = observed_order(hs[1:], d) if np.all(d > 0) else float("nan")
    return result


class _Rows(list):
    order: float = float("nan")


def run_area(cfg: RunConfig, grids: Optional[Sequence[int]] = None) -> list:
    """Tube-sum areas with ``J_h``, ``J = 1`` and the hybrid Jacobian."""
    grids = list(grids if grids is not None else (cfg["converge.grids"] or ()))
    if not grids:
        grids = [cfg[_grid_key(cfg)] or 64]
    key = _grid_key(cfg)
    rows = []
    for n in grids:
        c = cfg.replace(**{key.replace(".", "__"): n})
        try:
            surf = build_surface(c)
            tube = enumerate_tube(surf.field, surf.grid, surf.eps,
                                  theta_rel=c["tube.theta_rel"],
                                  length_scale=c["tube.length_scale"])
        except (GeometryError, SurfaceGenError) as exc:
            raise StageError("tube", exc) from exc
        rows.append((n, surf.grid.h, surf.eps, tube.size, tube.n_bad,
                     surface_area(tube, "jh"), surface_area(tube, "one"),
                     surface_area(tube, "hybrid")))
    path = cfg.out("output.table")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["grid", "h", "eps", "nodes", "bad_nodes", "area_jh", "area_one",
                     "area_hybrid"])
        for r in rows:
            wr.writerow([_fmt(v) for v in r])
    return rows


def run_surface(cfg: RunConfig) -> Path:
    """Sample the configured surface on its grid and write it as an SDF file."""
    try:
        surf = build_surface(cfg)
        values = surf.field.distance_on_grid(surf.grid)
    except (GeometryError, SurfaceGenError) as exc:
        raise StageError("surface", exc) from exc
    path = cfg.out("output.sdf")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_sdf(path, values, surf.grid, binary=True)
    return path


def run_weights(cfg: RunConfig):
    """Load or build the weight table named by the configuration."""
    try:
        return _table(cfg.replace(method="ctr2"))
    except WeightError as exc:
        raise StageError("weights", exc) from exc


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctribim", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=["weights", "surface", "solve", "converge", "area"])
    p.add_argument("--config", type=Path, help="configuration file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration key (repeatable)")
    p.add_argument("--threads", type=int, help="number of worker threads")
    p.add_argument("--quiet", action="store_true", help="print nothing on success")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s")
    say = (lambda *a: None) if args.quiet else print
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be at least 1")
            import numba
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        if args.config is not None:
            cfg = parse_config(args.config, args.override)
        else:
            cfg = parse_text("", args.override)
        if args.command == "solve":
            m = run_solve(cfg)
            say(f"psi_rxn = {m['psi_rxn']:.10g} after {m['gmres_iterations']} GMRES iterations "
                f"({m['nodes']} nodes); results in {cfg['output.dir']}")
        elif args.command == "converge":
            rows = run_convergence(cfg)
            for r in rows:
                diff = "" if r.diff is None else f"  diff {r.diff:.3e}"
                say(f"grid {r.grid:5d}  psi_rxn {r.value:.10g}{diff}  iterations {r.gmres_iters}")
            say(f"observed order {rows.order:.3f}; table in {cfg.out('output.table')}")
        elif args.command == "area":
            for r in run_area(cfg):
                say(f"grid {r[0]:5d}  area J_h {r[5]:.10g}  J=1 {r[6]:.10g}  hybrid {r[7]:.10g}")
        elif args.command == "surface":
            say(f"wrote {run_surface(cfg)}")
        else:
            t = run_weights(cfg)
            say(f"weight table N={t.N} P={t.P} tol={t.tol:g} ready")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"numerical failure {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
