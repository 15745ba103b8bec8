"""Post-processing of solved densities and analytic reference solutions.

The reaction potential at a point ``z`` away from the surface is::

    psi_rxn(z) = int_Gamma ((eps_E/eps_I) dG_k/dn_y - dG_0/dn_y)(z, y) psi(y)
                 + (G_0 - G_k)(z, y) dpsi/dn(y)  dsigma_y

and is evaluated with the plain tube sum, since the integrand is smooth
when ``z`` stays away from the tube.  The polarization energy is
``1/2 sum_k q_k psi_rxn(z_k)``.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import TubeNodes
from .kernels import KernelParams
from .system import DensityPair, node_weights

__all__ = [
    "AnalysisError",
    "SphereOracle",
    "sphere_exact",
    "sphere_densities",
    "psi_rxn",
    "polarization_energy",
    "surface_area",
    "export_field",
    "observed_order",
    "consecutive_diffs",
    "ConvergenceRow",
    "write_convergence",
]

_FOUR_PI = 4.0 * np.pi


class AnalysisError(ValueError):
    """Invalid evaluation point or input data."""


# ---------------------------------------------------------------------------
# Sphere reference solution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SphereOracle:
    """Point charge at the centre of a dielectric sphere.

    Attributes
    ----------
    r : float
        Sphere radius.
    q : float
        Charge at the centre.
    params : KernelParams
    center : tuple of float
    """

    r: float
    q: float = 1.0
    params: KernelParams = KernelParams()
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.r > 0:
            raise AnalysisError("sphere radius must be positive")

    def psi_rxn_center(self) -> float:
        """Reaction potential at the centre, linear in ``q``."""
        p = self.params
        return self.q / (_FOUR_PI * self.r) * (
            1.0 / (p.eps_e * (1.0 + p.kappa * self.r)) - 1.0 / p.eps_i)

    def surface_values(self) -> tuple:
        """``(psi, dpsi/dn)`` on the sphere; the derivative is the interior one."""
        return sphere_exact(self, np.asarray(self.center) + np.array([self.r, 0.0, 0.0]))


def sphere_exact(oracle: SphereOracle, x) -> tuple:
    """Potential and radial derivative of the sphere solution.

    Inside (``|x| <= r``, up to a relative round-off of ``1e-12``) the potential is the interior Coulomb field plus a
    constant reaction term; outside it is a screened Coulomb field.  On the
    sphere itself the interior limit is returned, which is the normal
    derivative that the integral equations use.

    Parameters
    ----------
    oracle : SphereOracle
    x : array_like, shape (..., 3)

    Returns
    -------
    psi, psi_n : ndarray or float
    """
    p = oracle.params
    q = oracle.q
    r = oracle.r
    x = np.asarray(x, dtype=float) - np.asarray(oracle.center)
    rho = np.linalg.norm(x, axis=-1)
    if np.any(rho == 0):
        raise AnalysisError("the sphere solution is singular at the centre")
    k = p.kappa
    # Projected surface points land within round-off on either side of r.
    inside = rho <= r * (1.0 + 1e-12)
    psi_in = q / (_FOUR_PI * p.eps_i * rho) + q / (_FOUR_PI * r) * (
        1.0 / (p.eps_e * (1.0 + k * r)) - 1.0 / p.eps_i)
    dpsi_in = -q / (_FOUR_PI * p.eps_i * rho**2)
    decay = np.exp(-k * (rho - r))
    scale = q / (_FOUR_PI * p.eps_e * (1.0 + k * r))
    psi_out = scale * decay / rho
    dpsi_out = -scale * decay / rho**2 - k * scale * decay / rho
    psi = np.where(inside, psi_in, psi_out)
    dpsi = np.where(inside, dpsi_in, dpsi_out)
    if psi.ndim == 0:
        return float(psi), float(dpsi)
    return psi, dpsi


def sphere_densities(oracle: SphereOracle, tube: TubeNodes) -> DensityPair:
    """Exact densities extended constantly along normals to the tube nodes."""
    psi, dpsi = sphere_exact(oracle, tube.proj)
    return DensityPair(np.broadcast_to(psi, (tube.size,)).copy(),
                       np.broadcast_to(dpsi, (tube.size,)).copy())


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _weights(tube: TubeNodes, method, weights):
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != (tube.size,):
            raise AnalysisError("weights must have one entry per tube node")
        return w
    return node_weights(tube, method)


def psi_rxn(z, solution: DensityPair, tube: TubeNodes, params: KernelParams,
            method: str = "ctr2", weights=None) -> float:
    """Reaction potential at ``z`` by the plain tube sum.

    Parameters
    ----------
    z : array_like, shape (3,)
    solution : DensityPair
    tube : TubeNodes
    params : KernelParams
    method : {"ctr2", "kreg", "hyb"}
        Selects the Jacobian of the node weights.
    weights : ndarray, optional
        Explicit node weights overriding ``method``.

    Raises
    ------
    AnalysisError
        ``z`` lies inside the tube, where the plain sum is not accurate.
    """
    z = np.asarray(z, dtype=float).reshape(3)
    if len(solution) != tube.size:
        raise AnalysisError("solution length differs from the tube size")
    dz = float(np.atleast_1d(tube.field.distance(z[None]))[0])
    if abs(dz) <= tube.eps:
        raise AnalysisError(f"evaluation point at distance {abs(dz):.3g} lies inside the tube")
    if abs(dz) <= 2.0 * tube.eps:
        warnings.warn("evaluation point is within 2 eps of the surface; the plain sum "
                      "loses accuracy there", RuntimeWarning, stacklevel=2)
    w = _weights(tube, method, weights)
    y = tube.proj
    n = tube.normal
    diff = z - y
    r = np.linalg.norm(diff, axis=1)
    k = params.kappa
    ex = np.exp(-k * r)
    dn = np.sum(diff * n, axis=1) / (_FOUR_PI * r**3)
    dg0 = dn
    dgk = dn * ex * (1.0 + k * r)
    f = (params.ratio_ei * dgk - dg0) * solution.rho1 + (1.0 - ex) / (_FOUR_PI * r) * solution.rho2
    return float(tube.h**3 * math.fsum(f * w))


def polarization_energy(solution: DensityPair, centers, charges, tube: TubeNodes,
                        params: KernelParams, method: str = "ctr2", weights=None) -> float:
    """``1/2 sum_k q_k psi_rxn(z_k)``."""
    z = np.atleast_2d(np.asarray(centers, dtype=float))
    q = np.atleast_1d(np.asarray(charges, dtype=float))
    if z.shape != (q.size, 3):
        raise AnalysisError("centers must have shape (n, 3) matching the charges")
    w = _weights(tube, method, weights)
    vals = [qk * psi_rxn(zk, solution, tube, params, weights=w) for zk, qk in zip(z, q)]
    return 0.5 * math.fsum(vals)


def surface_area(tube: TubeNodes, jacobian: str = "jh") -> float:
    """Tube-sum area ``h^3 sum delta_eps(d) J``.

    Parameters
    ----------
    jacobian : {"jh", "one", "hybrid"}
        ``J_h``, the constant 1, or ``J_h`` at good nodes and 1 at bad ones.
    """
    key = {"jh": "ctr2", "one": "kreg", "hybrid": "hyb"}.get(jacobian)
    if key is None:
        raise AnalysisError("jacobian must be 'jh', 'one' or 'hybrid'")
    return float(tube.h**3 * math.fsum(node_weights(tube, key)))


# ---------------------------------------------------------------------------
# Export and convergence tables
# ---------------------------------------------------------------------------

_FIELD_COLUMNS = ("x", "y", "z", "d", "rho1", "rho2", "good")


def export_field(tube: TubeNodes, solution: Optional[DensityPair], path) -> Path:
    """Write node coordinates, distances, densities and flags as CSV.

    Rows follow the tube order; floats use 17 significant digits so that
    repeated exports are byte-identical.
    """
    path = Path(path)
    if solution is not None and len(solution) != tube.size:
        raise AnalysisError("solution length differs from the tube size")
    buf = io.StringIO()
    buf.write(",".join(_FIELD_COLUMNS) + "\n")
    if tube.size:
        r1 = solution.rho1 if solution is not None else np.zeros(tube.size)
        r2 = solution.rho2 if solution is not None else np.zeros(tube.size)
        data = np.column_stack([tube.points, tube.d, r1, r2])
        for row, g in zip(data, tube.good):
            buf.write(",".join(f"{v:.17g}" for v in row) + f",{int(g)}\n")
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise AnalysisError(f"cannot write {path}: {exc}") from exc
    return path


def observed_order(h: Sequence[float], err: Sequence[float]) -> float:
    """Least-squares slope of ``log |err|`` against ``log h``."""
    h = np.asarray(h, dtype=float)
    err = np.abs(np.asarray(err, dtype=float))
    if h.size < 2 or h.size != err.size:
        raise AnalysisError("need at least two matching (h, err) pairs")
    if np.any(err == 0) or np.any(h <= 0):
        raise AnalysisError("errors and spacings must be nonzero")
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def consecutive_diffs(values: Sequence[float]) -> np.ndarray:
    """``|v[i+1] - v[i]|`` for a refinement sequence."""
    v = np.asarray(values, dtype=float)
    return np.abs(np.diff(v))


@dataclass(frozen=True)
class ConvergenceRow:
    """One line of a convergence table."""

    grid: int
    eps: float
    method: str
    value: float
    diff: Optional[float]
    gmres_iters: Optional[int]


def write_convergence(rows: Iterable[ConvergenceRow], path) -> Path:
    """CSV with columns ``grid, eps, method, value, diff, gmres_iters``."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["grid", "eps", "method", "value", "diff", "gmres_iters"])
        for r in rows:
            wr.writerow([r.grid, f"{r.eps:.17g}", r.method, f"{r.value:.17g}",
                         "" if r.diff is None else f"{r.diff:.17g}",
                         "" if r.gmres_iters is None else r.gmres_iters])
    return path
