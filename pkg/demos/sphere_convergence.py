"""Sphere study: corrected versus regularized quadrature.

A unit charge sits at the centre of a sphere of radius 10 with
eps_I = 1, eps_E = 80 and kappa = 0.125, where the reaction potential is
known in closed form.  The tube half-width is held at 2.5 while the grid is
refined, so the discretization error of each quadrature shows its own order.

Run from the repository root::

    python demos/sphere_convergence.py
"""
import warnings

from ctribim.analysis import SphereOracle, observed_order, psi_rxn
from ctribim.geometry import CartesianGrid, SphereField, enumerate_tube
from ctribim.kernels import KernelParams
from ctribim.system import assemble, build_rhs, gmres_solve
from ctribim.weights import cached_table

R, EPS = 10.0, 2.5
KP = KernelParams(1.0, 80.0, 0.125)


def main():
    exact = SphereOracle(R, params=KP).psi_rxn_center()
    table = cached_table()  # built once (about 15 minutes), then read from the cache
    print(f"exact psi_rxn(0) = {exact:.9f}")
    hs, errs = [], {"kreg": [], "ctr2": []}
    for n in (8, 10, 12, 16):
        h = R / n
        tube = enumerate_tube(SphereField(R), CartesianGrid.centered(h, R + EPS + 3 * h), EPS)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rhs = build_rhs([[0, 0, 0]], [1.0], tube, KP)
        line = f"h = r/{n:<3d} nodes {tube.size:6d}"
        for method in errs:
            res = gmres_solve(assemble(tube, KP, method, table=table), rhs, 1e-8, 200)
            err = abs(psi_rxn([0, 0, 0], res.x, tube, KP, method) / exact - 1.0)
            errs[method].append(err)
            line += f"  {method} {err:.2e} ({res.iterations} it)"
        hs.append(h)
        print(line)
    for method, e in errs.items():
        print(f"observed order {method}: {observed_order(hs, e):.2f}")


if __name__ == "__main__":
    main()
