"""Cartesian grids, signed distance fields and tubular neighbourhoods.

The implicit boundary integral method replaces a surface integral by a
volume integral over the tube ``T_eps = {x : |d(x)| <= eps}``, where ``d``
is the signed distance to the surface.  This module provides the
ingredients: uniform grids, analytic and sampled distance fields, the
closest point projection ``P(x) = x - d(x) grad d(x)``, local surface frames
with principal curvatures, the area Jacobian and the enumeration of grid
nodes inside the tube.

Conventions
-----------
* ``d > 0`` inside the domain, so the outward normal is ``n = -grad d``.
* Principal curvatures are the tangential eigenvalues of the Hessian of
  ``d`` on the surface.  A sphere of radius ``r`` has ``kappa = -1/r``.
* The Jacobian ``J`` is the area ratio ``dsigma_Gamma / dsigma_eta`` between
  the surface and the level set ``{d = eta}`` through a point.  With the
  level-set curvatures ``H_eta, G_eta`` taken positive on convex sets,
  ``J = 1 + 2 eta H_eta + eta**2 G_eta``; equivalently
  ``J = 1 / ((1 + eta kappa_1)(1 + eta kappa_2))`` in terms of the surface
  curvatures above.  A sphere gives ``J = (1 - eta/r)**-2``, which makes
  ``int delta_eps(d) J dx`` equal to the area exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "GeometryError",
    "ReachError",
    "CartesianGrid",
    "SurfaceField",
    "SphereField",
    "PlaneField",
    "TorusField",
    "SphereUnionField",
    "SampledField",
    "SurfaceFrame",
    "TubeNodes",
    "sdf_analytic",
    "sample_sdf",
    "read_sdf",
    "write_sdf",
    "closest_point",
    "frame_at",
    "jacobian_at",
    "delta_weight",
    "enumerate_tube",
    "classify_nodes",
    "dominant_axes",
    "dominant_permutation",
    "TORUS_ANGLES",
]

#: Rotation angles (about x, y and z) of the torus test surface.
TORUS_ANGLES = (1.99487, 2.54097947651017, 4.219760487439292)

#: Magnitude difference below which two normal components count as tied.
AXIS_TIE_TOL = 1e-12

# Third axis of the permuted frame is the dominant one; the other two keep
# their natural order.
_PERMS = ((1, 2, 0), (0, 2, 1), (0, 1, 2))


class GeometryError(ValueError):
    """Invalid geometric input or failed geometric query."""


class ReachError(GeometryError):
    """The tube half-width is not below the reach of the surface."""


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CartesianGrid:
    """Uniform grid ``origin + h * (i, j, k)``.

    Parameters
    ----------
    dims : tuple of int
        Number of nodes along x, y and z (each at least 2).
    origin : array_like
        Coordinates of node ``(0, 0, 0)``.
    h : float
        Grid spacing, identical along all axes.
    """

    dims: tuple
    origin: tuple
    h: float

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 2:
            raise GeometryError(f"grid dims must be three integers >= 2, got {self.dims}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3 or not np.all(np.isfinite(origin)):
            raise GeometryError(f"grid origin must be a finite 3-vector, got {self.origin}")
        if not (np.isfinite(self.h) and self.h > 0):
            raise GeometryError(f"grid spacing must be positive, got {self.h}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "h", float(self.h))

    @classmethod
    def cube(cls, n: int, lo: float, hi: float) -> "CartesianGrid":
        """Grid with ``n`` nodes per axis spanning ``[lo, hi]**3``."""
        if n < 2 or not hi > lo:
            raise GeometryError("cube grid needs n >= 2 and hi > lo")
        return cls((n, n, n), (lo, lo, lo), (hi - lo) / (n - 1))

    @classmethod
    def centered(cls, h: float, half_width: float) -> "CartesianGrid":
        """Grid of spacing ``h`` symmetric about the origin with nodes on it.

        The node set is ``h * Z**3`` restricted to ``[-half_width, half_width]**3``.
        """
        m = int(np.floor(half_width / h + 1e-9))
        return cls((2 * m + 1,) * 3, (-m * h,) * 3, h)

    @property
    def shape(self) -> tuple:
        return self.dims

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.h * (np.asarray(self.dims) - 1)

    def node(self, i, j, k) -> np.ndarray:
        """Coordinates of node ``(i, j, k)``."""
        return np.asarray(self.origin) + self.h * np.array([i, j, k], dtype=float)

    def points(self, idx: np.ndarray) -> np.ndarray:
        """Coordinates of an ``(m, 3)`` array of integer node indices."""
        return np.asarray(self.origin) + self.h * np.asarray(idx, dtype=float)

    def axis(self, a: int) -> np.ndarray:
        """Node coordinates along axis ``a``."""
        return self.origin[a] + self.h * np.arange(self.dims[a])

    def contains(self, x: np.ndarray, margin: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        lo = np.asarray(self.origin) + margin
        hi = self.upper - margin
        return np.all((x >= lo) & (x <= hi), axis=-1)


# ---------------------------------------------------------------------------
# Distance fields
# ---------------------------------------------------------------------------


def _as_points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x), single


class SurfaceField:
    """Base class of signed distance sources (``d > 0`` inside).

    Subclasses implement :meth:`distance`, :meth:`gradient`,
    :meth:`hessian` and :meth:`closest_point` for arrays of points of shape
    ``(m, 3)``.  Single points of shape ``(3,)`` are accepted as well.
    """

    analytic = True

    def distance(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def hessian(self, x):
        raise NotImplementedError

    def closest_point(self, x):
        """Exact projection for analytic fields; see subclasses."""
        x, single = _as_points(x)
        p = x - self.distance(x)[:, None] * self.gradient(x)
        return p[0] if single else p

    def distance_on_grid(self, grid: CartesianGrid) -> np.ndarray:
        """Distance values on all grid nodes as an ``(nx, ny, nz)`` array."""
        nx, ny, nz = grid.dims
        xs, ys, zs = grid.axis(0), grid.axis(1), grid.axis(2)
        out = np.empty(grid.dims)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        for k in range(nz):
            pts = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, zs[k])])
            out[:, :, k] = self.distance(pts).reshape(nx, ny)
        return out

    def node_derivatives(self, grid: CartesianGrid, idx: np.ndarray):
        """Gradient and Hessian of ``d`` at grid nodes ``idx`` (shape ``(m, 3)``)."""
        pts = grid.points(idx)
        return self.gradient(pts), self.hessian(pts)

    def reach_check(self, points: np.ndarray, eps: float) -> None:
        """Hook for sources able to detect a reach violation directly."""


class PlaneField(SurfaceField):
    """Half space ``{x : (x - p) . n < 0}`` with outward normal ``n``."""

    def __init__(self, normal=(0.0, 0.0, 1.0), point=(0.0, 0.0, 0.0)):
        n = np.asarray(normal, dtype=float)
        nn = np.linalg.norm(n)
        if not nn > 0:
            raise GeometryError("plane normal must be nonzero")
        self.normal = n / nn
        self.point = np.asarray(point, dtype=float)

    def distance(self, x):
        x, single = _as_points(x)
        d = -(x - self.point) @ self.normal
        return d[0] if single else d

    def gradient(self, x):
        x, single = _as_points(x)
        g = np.broadcast_to(-self.normal, x.shape).copy()
        return g[0] if single else g

    def hessian(self, x):
        x, single = _as_points(x)
        H = np.zeros((x.shape[0], 3, 3))
        return H[0] if single else H


class SphereField(SurfaceField):
    """Sphere of radius ``radius`` about ``center``."""

    def __init__(self, radius: float, center=(0.0, 0.0, 0.0)):
        if not (np.isfinite(radius) and radius > 0):
            raise GeometryError(f"sphere radius must be positive, got {radius}")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def _rel(self, x):
        v = x - self.center
        r = np.linalg.norm(v, axis=1)
        return v, r

    def distance(self, x):
        x, single = _as_points(x)
        d = self.radius - np.linalg.norm(x - self.center, axis=1)
        return d[0] if single else d

    def gradient(self, x):
        x, single = _as_points(x)
        v, r = self._rel(x)
        if np.any(r == 0):
            raise GeometryError("gradient of the sphere distance is undefined at the center")
        g = -v / r[:, None]
        return g[0] if single else g

    def hessian(self, x):
        x, single = _as_points(x)
        v, r = self._rel(x)
        if np.any(r == 0):
            raise GeometryError("Hessian of the sphere distance is undefined at the center")
        u = v / r[:, None]
        H = -(np.eye(3)[None] - u[:, :, None] * u[:, None, :]) / r[:, None, None]
        return H[0] if single else H

    def closest_point(self, x):
        x, single = _as_points(x)
        v, r = self._rel(x)
        if np.any(r == 0):
            raise GeometryError("closest point is not unique at the sphere center")
        p = self.center + self.radius * v / r[:, None]
        return p[0] if single else p


class TorusField(SurfaceField):
    """Torus with centre-line radius ``R1`` and tube radius ``R2``.

    The body-frame torus has its symmetry axis along z.  The world-frame
    surface is obtained by rotating the body frame with extrinsic rotations
    about x, y and z by ``angles`` (in that order) and translating by
    ``center``.
    """

    def __init__(self, R1: float = 1.0, R2: float = 0.5, angles=(0.0, 0.0, 0.0),
                 center=(0.0, 0.0, 0.0)):
        if not (R2 > 0 and R1 > R2):
            raise GeometryError(f"torus needs R1 > R2 > 0, got R1={R1}, R2={R2}")
        self.R1 = float(R1)
        self.R2 = float(R2)
        self.angles = tuple(float(a) for a in angles)
        self.center = np.asarray(center, dtype=float)
        self.rot = Rotation.from_euler("xyz", self.angles).as_matrix()

    def _body(self, x):
        xb = (x - self.center) @ self.rot  # rot^T (x - c) for each row
        rho = np.hypot(xb[:, 0], xb[:, 1])
        if np.any(rho == 0):
            raise GeometryError("torus distance is not smooth on the symmetry axis")
        c = self.R1 * np.column_stack([xb[:, 0] / rho, xb[:, 1] / rho, np.zeros_like(rho)])
        w = xb - c
        D = np.linalg.norm(w, axis=1)
        return xb, rho, c, w, D

    def distance(self, x):
        x, single = _as_points(x)
        xb = (x - self.center) @ self.rot
        rho = np.hypot(xb[:, 0], xb[:, 1])
        d = self.R2 - np.hypot(rho - self.R1, xb[:, 2])
        return d[0] if single else d

    def gradient(self, x):
        x, single = _as_points(x)
        xb, rho, c, w, D = self._body(x)
        if np.any(D == 0):
            raise GeometryError("torus distance gradient undefined on the centre line")
        g = -(w / D[:, None]) @ self.rot.T
        return g[0] if single else g

    def hessian(self, x):
        x, single = _as_points(x)
        xb, rho, c, w, D = self._body(x)
        if np.any(D == 0):
            raise GeometryError("torus distance Hessian undefined on the centre line")
        u = w / D[:, None]
        ephi = np.column_stack([-xb[:, 1] / rho, xb[:, 0] / rho, np.zeros_like(rho)])
        Hb = -(np.eye(3)[None] - u[:, :, None] * u[:, None, :]
               - (self.R1 / rho)[:, None, None] * ephi[:, :, None] * ephi[:, None, :]) / D[:, None, None]
        H = self.rot[None] @ Hb @ self.rot.T[None]
        return H[0] if single else H

    def closest_point(self, x):
        x, single = _as_points(x)
        xb, rho, c, w, D = self._body(x)
        if np.any(D == 0):
            raise GeometryError("closest point is not unique on the torus centre line")
        pb = c + self.R2 * w / D[:, None]
        p = pb @ self.rot.T + self.center
        return p[0] if single else p


class SphereUnionField(SurfaceField):
    """Union of balls, ``d = max_k (r_k - |x - z_k|)``.

    Exact signed distance outside the union and a lower bound inside.
    Derivatives and projections follow the ball attaining the maximum.
    """

    def __init__(self, centers, radii):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.radii = np.atleast_1d(np.asarray(radii, dtype=float))
        if self.centers.shape != (self.radii.size, 3):
            raise GeometryError("centers must have shape (n, 3) matching radii")
        if self.radii.size == 0 or np.any(~(self.radii > 0)):
            raise GeometryError("sphere union needs at least one positive radius")
        self._spheres = [SphereField(r, c) for c, r in zip(self.centers, self.radii)]

    def _all(self, x):
        diff = x[:, None, :] - self.centers[None]
        return self.radii[None] - np.linalg.norm(diff, axis=2)

    def distance(self, x):
        x, single = _as_points(x)
        d = self._all(x).max(axis=1)
        return d[0] if single else d

    def _dispatch(self, x, method):
        x, single = _as_points(x)
        owner = np.argmax(self._all(x), axis=1)
        out = None
        for k in np.unique(owner):
            sel = owner == k
            val = getattr(self._spheres[k], method)(x[sel])
            if out is None:
                out = np.empty((x.shape[0],) + val.shape[1:])
            out[sel] = val
        return out[0] if single else out

    def gradient(self, x):
        return self._dispatch(x, "gradient")

    def hessian(self, x):
        return self._dispatch(x, "hessian")

    def closest_point(self, x):
        return self._dispatch(x, "closest_point")

    def reach_check(self, points, eps):
        # A node within eps of two distinct sphere surfaces sits where the
        # closest point map is not unique within the tube.
        vals = np.sort(self._all(points), axis=1)
        if vals.shape[1] > 1:
            bad = vals[:, -2] >= -eps
            if np.any(bad):
                raise ReachError(
                    f"{int(bad.sum())} tube nodes lie within eps={eps:g} of two spheres; "
                    "the closest point map is not unique there (J <= 0 regime, eps >= reach)")


# Finite difference coefficients (fourth order, five points).
_D1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_D2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


@numba.njit(cache=True)
def _lagrange4(t):
    # Cubic Lagrange basis on nodes -1, 0, 1, 2 and its derivative.
    w = np.empty(4)
    dw = np.empty(4)
    w[0] = -t * (t - 1.0) * (t - 2.0) / 6.0
    w[1] = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0
    w[2] = -(t + 1.0) * t * (t - 2.0) / 2.0
    w[3] = (t + 1.0) * t * (t - 1.0) / 6.0
    dw[0] = -(3.0 * t * t - 6.0 * t + 2.0) / 6.0
    dw[1] = (3.0 * t * t - 4.0 * t - 1.0) / 2.0
    dw[2] = -(3.0 * t * t - 2.0 * t - 2.0) / 2.0
    dw[3] = (3.0 * t * t - 1.0) / 6.0
    return w, dw


@numba.njit(cache=True)
def _tricubic(values, origin, h, pts, out_val, out_grad):
    nx, ny, nz = values.shape
    for p in range(pts.shape[0]):
        base = np.empty(3, dtype=np.int64)
        ws = np.empty((3, 4))
        dws = np.empty((3, 4))
        ok = True
        for a in range(3):
            n = values.shape[a]
            f = (pts[p, a] - origin[a]) / h
            i0 = int(np.floor(f))
            if i0 < 1:
                i0 = 1
            if i0 > n - 3:
                i0 = n - 3
            if f < -1e-9 or f > n - 1 + 1e-9 or n < 4:
                ok = False
            t = f - i0
            w, dw = _lagrange4(t)
            base[a] = i0 - 1
            for m in range(4):
                ws[a, m] = w[m]
                dws[a, m] = dw[m]
        if not ok:
            out_val[p] = np.nan
            for a in range(3):
                out_grad[p, a] = np.nan
            continue
        v = 0.0
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    f = values[base[0] + i, base[1] + j, base[2] + k]
                    v += ws[0, i] * ws[1, j] * ws[2, k] * f
                    gx += dws[0, i] * ws[1, j] * ws[2, k] * f
                    gy += ws[0, i] * dws[1, j] * ws[2, k] * f
                    gz += ws[0, i] * ws[1, j] * dws[2, k] * f
        out_val[p] = v
        out_grad[p, 0] = gx / h
        out_grad[p, 1] = gy / h
        out_grad[p, 2] = gz / h


class SampledField(SurfaceField):
    """Signed distance values sampled on a Cartesian grid.

    Values between nodes come from local tricubic Lagrange interpolation,
    which reproduces node values exactly.  Derivatives at nodes use
    five-point centred differences; off-node derivatives are derivatives of
    the interpolant.

    Parameters
    ----------
    grid : CartesianGrid
        Sample grid.
    values : ndarray, shape ``grid.dims``
        Signed distance samples indexed ``[i, j, k]``.
    """

    analytic = False

    def __init__(self, grid: CartesianGrid, values: np.ndarray, proj_tol_factor: float = 1e-3,
                 proj_maxiter: int = 20):
        values = np.ascontiguousarray(values, dtype=float)
        if values.shape != grid.dims:
            raise GeometryError(f"values shape {values.shape} does not match grid dims {grid.dims}")
        if not np.all(np.isfinite(values)):
            raise GeometryError("sampled distance values must be finite")
        self.grid = grid
        self.values = values
        self.values.setflags(write=False)
        self.proj_tol = proj_tol_factor * grid.h
        self.proj_maxiter = int(proj_maxiter)

    def _interp(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        val = np.empty(x.shape[0])
        grad = np.empty((x.shape[0], 3))
        _tricubic(self.values, np.asarray(self.grid.origin), self.grid.h, x, val, grad)
        if np.any(~np.isfinite(val)):
            raise GeometryError("query point outside the sampled grid")
        return val, grad

    def distance(self, x):
        x, single = _as_points(x)
        v, _ = self._interp(x)
        return v[0] if single else v

    def gradient(self, x):
        x, single = _as_points(x)
        _, g = self._interp(x)
        return g[0] if single else g

    def hessian(self, x):
        """Hessian from trilinear interpolation of node Hessians."""
        x, single = _as_points(x)
        g = self.grid
        f = (x - np.asarray(g.origin)) / g.h
        i0 = np.floor(f).astype(np.int64)
        i0 = np.clip(i0, 0, np.asarray(g.dims) - 2)
        t = f - i0
        H = np.zeros((x.shape[0], 3, 3))
        for corner in np.ndindex(2, 2, 2):
            c = np.asarray(corner)
            w = np.prod(np.where(c == 1, t, 1.0 - t), axis=1)
            _, Hc = self.node_derivatives(g, i0 + c)
            H += w[:, None, None] * Hc
        return H[0] if single else H

    def node_derivatives(self, grid, idx):
        """Five-point finite-difference gradient and Hessian at nodes.

        Raises
        ------
        GeometryError
            If a stencil leaves the sampled grid.
        """
        if grid != self.grid:
            raise GeometryError("node derivatives require the sample grid")
        idx = np.asarray(idx, dtype=np.int64)
        dims = np.asarray(self.grid.dims)
        if np.any(idx < 2) or np.any(idx > dims - 3):
            raise GeometryError("curvature stencil exits the sampled grid")
        v = self.values
        h = self.grid.h
        i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
        offs = (-2, -1, 0, 1, 2)
        e = np.eye(3, dtype=np.int64)
        grad = np.zeros((idx.shape[0], 3))
        H = np.zeros((idx.shape[0], 3, 3))
        for a in range(3):
            for c1, c2, o in zip(_D1, _D2, offs):
                s = v[i + o * e[a, 0], j + o * e[a, 1], k + o * e[a, 2]]
                grad[:, a] += c1 * s
                H[:, a, a] += c2 * s
        for a in range(3):
            for b in range(a + 1, 3):
                acc = np.zeros(idx.shape[0])
                for ca, oa in zip(_D1, offs):
                    if ca == 0.0:
                        continue
                    for cb, ob in zip(_D1, offs):
                        if cb == 0.0:
                            continue
                        off = oa * e[a] + ob * e[b]
                        acc += ca * cb * v[i + off[0], j + off[1], k + off[2]]
                H[:, a, b] = H[:, b, a] = acc
        return grad / h, H / h**2

    def closest_point(self, x, start=None):
        """Projection ``x - d grad d`` refined by fixed-point iteration.

        Parameters
        ----------
        x : array_like
            Query points.
        start : tuple of ndarray, optional
            Precomputed ``(d, grad d)`` at ``x`` used for the first step.

        Raises
        ------
        GeometryError
            If ``|d| <= proj_tol`` is not reached within ``proj_maxiter``
            refinement steps.
        """
        x, single = _as_points(x)
        if start is None:
            d, g = self._interp(x)
        else:
            d, g = start
        gn = np.linalg.norm(g, axis=1)
        p = x - (d / gn**2)[:, None] * g
        dp, gp = self._interp(p)
        active = np.abs(dp) > self.proj_tol
        it = 0
        while np.any(active):
            if it >= self.proj_maxiter:
                raise GeometryError(
                    f"projection did not reach |d| <= {self.proj_tol:g} after {it} refinements "
                    f"(max residual {np.abs(dp[active]).max():.3e})")
            gpa = gp[active]
            p[active] = p[active] - (dp[active] / np.sum(gpa * gpa, axis=1))[:, None] * gpa
            dp_a, gp_a = self._interp(p[active])
            dp[active] = dp_a
            gp[active] = gp_a
            active = np.abs(dp) > self.proj_tol
            it += 1
        return p[0] if single else p

    def distance_on_grid(self, grid):
        if grid != self.grid:
            raise GeometryError("sampled field can only be enumerated on its own grid")
        return np.array(self.values)


def sdf_analytic(shape: str, query, **params):
    """Evaluate an analytic signed distance.

    Parameters
    ----------
    shape : {'sphere', 'torus', 'union', 'plane'}
        Shape kind; ``params`` are forwarded to the field constructor.
    query : array_like
        Point(s) of shape ``(3,)`` or ``(m, 3)``.
    """
    kinds = {"sphere": SphereField, "torus": TorusField, "union": SphereUnionField,
             "plane": PlaneField}
    if shape not in kinds:
        raise GeometryError(f"unknown analytic shape {shape!r}")
    return kinds[shape](**params).distance(query)


# ---------------------------------------------------------------------------
# SDF grid files
# ---------------------------------------------------------------------------

_BINARY_MAGIC = b"SDFB"


def read_sdf(path) -> SampledField:
    """Read an SDF grid file (text or binary variant).

    The text format has ``NX NY NZ``, ``OX OY OZ`` and ``H`` on the first
    three lines followed by ``NX*NY*NZ`` values with x varying fastest.  The
    binary variant starts with the bytes ``SDFB`` and a newline, repeats the
    three header lines and then stores little-endian float64 values.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    binary = raw.startswith(_BINARY_MAGIC)
    if binary:
        raw = raw[len(_BINARY_MAGIC) + 1:]
        parts = raw.split(b"\n", 3)
        if len(parts) < 4:
            raise GeometryError("malformed binary SDF header")
        header = [p.decode("ascii") for p in parts[:3]]
        body = parts[3]
    else:
        lines = raw.decode("ascii").split("\n", 3)
        if len(lines) < 3:
            raise GeometryError("malformed SDF header: expected three header lines")
        header = lines[:3]
        body = lines[3] if len(lines) > 3 else ""
    try:
        dims = tuple(int(t) for t in header[0].split())
        origin = tuple(float(t) for t in header[1].split())
        h = float(header[2].strip())
    except ValueError as exc:
        raise GeometryError(f"malformed SDF header: {exc}") from None
    if len(dims) != 3 or len(origin) != 3:
        raise GeometryError("malformed SDF header: dims and origin need three entries")
    grid = CartesianGrid(dims, origin, h)
    count = grid.size
    if binary:
        if len(body) != 8 * count:
            raise GeometryError(f"header declares {count} values, file has {len(body) // 8}")
        vals = np.frombuffer(body, dtype="<f8").astype(float)
    else:
        try:
            vals = np.array(body.split(), dtype=float)
        except ValueError as exc:
            raise GeometryError(f"malformed SDF value: {exc}") from None
        if vals.size != count:
            raise GeometryError(f"header declares {count} values, file has {vals.size}")
    if not np.all(np.isfinite(vals)):
        raise GeometryError("SDF file contains non-finite values")
    values = vals.reshape(dims[::-1]).transpose(2, 1, 0)
    return SampledField(grid, values)


sample_sdf = read_sdf


def write_sdf(path, field_or_values, grid: Optional[CartesianGrid] = None,
              binary: bool = False) -> None:
    """Write sampled distances in the SDF grid format.

    Parameters
    ----------
    path : str or path-like
        Destination.
    field_or_values : SampledField or ndarray
        Values indexed ``[i, j, k]``; a grid is required for raw arrays.
    binary : bool
        Write the little-endian float64 variant.
    """
    if isinstance(field_or_values, SampledField):
        grid = field_or_values.grid
        values = field_or_values.values
    else:
        values = np.asarray(field_or_values, dtype=float)
        if grid is None:
            raise GeometryError("a grid is required to write raw values")
    header = "{} {} {}\n{!r} {!r} {!r}\n{!r}\n".format(*grid.dims, *grid.origin, grid.h)
    flat = np.ascontiguousarray(values.transpose(2, 1, 0)).ravel()
    if binary:
        with open(path, "wb") as fh:
            fh.write(_BINARY_MAGIC + b"\n" + header.encode("ascii"))
            fh.write(flat.astype("<f8").tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(header)
            for start in range(0, flat.size, 8):
                fh.write(" ".join(repr(float(v)) for v in flat[start:start + 8]))
                fh.write("\n")


# ---------------------------------------------------------------------------
# Frames, Jacobian, delta weight
# ---------------------------------------------------------------------------


def dominant_axes(normals) -> np.ndarray:
    """Dominant axis of each row of ``normals``, lowest index on near ties.

    Components within ``AXIS_TIE_TOL`` of the largest magnitude count as
    tied, so normals that differ only by round-off pick the same axis.
    """
    a = np.abs(np.asarray(normals, dtype=float))
    return np.argmax(a >= a.max(axis=1, keepdims=True) - AXIS_TIE_TOL, axis=1)


def dominant_permutation(normal) -> tuple[int, np.ndarray]:
    """Dominant axis of ``normal`` and the permutation matrix ``Q``.

    ``Q`` moves the dominant axis to the third position and keeps the other
    two axes in increasing order; ties (within ``AXIS_TIE_TOL``) pick the
    lowest axis index.
    """
    i = int(dominant_axes(np.asarray(normal, dtype=float)[None, :])[0])
    Q = np.zeros((3, 3))
    for row, col in enumerate(_PERMS[i]):
        Q[row, col] = 1.0
    return i, Q


@dataclass(frozen=True)
class SurfaceFrame:
    """Local frame at the projection of a query point.

    Attributes
    ----------
    point : ndarray
        Surface point ``P(x)``.
    normal, tau1, tau2 : ndarray
        Outward normal and principal directions.
    kappa : ndarray
        Principal curvatures ``(kappa_1, kappa_2)`` on the surface.
    Q : ndarray
        3x3 permutation with the dominant normal axis last.
    A : ndarray
        Top-left 2x2 block of the rows ``(Q tau1, Q tau2, Q n)``.
    eta : float
        Signed distance of the query point.
    axis : int
        Dominant axis index.
    """

    point: np.ndarray
    normal: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray
    kappa: np.ndarray
    Q: np.ndarray
    A: np.ndarray
    eta: float
    axis: int

    @property
    def M(self) -> np.ndarray:
        return np.diag(self.kappa)


def _tangent_basis(n):
    # Orthonormal tangent pair for each row of n (shape (m, 3)).
    m = n.shape[0]
    e = np.zeros((m, 3))
    e[np.arange(m), np.argmin(np.abs(n), axis=1)] = 1.0
    t1 = e - np.sum(e * n, axis=1)[:, None] * n
    t1 /= np.linalg.norm(t1, axis=1)[:, None]
    t2 = np.cross(n, t1)
    return t1, t2


def _frames_from_derivatives(eta, grad, H):
    """Normals, principal directions and level-set curvatures.

    Returns ``normal, tau1, tau2, kappa_eta`` where ``kappa_eta`` are the
    tangential Hessian eigenvalues at the query point.
    """
    gn = np.linalg.norm(grad, axis=1)
    n = -grad / gn[:, None]
    t1, t2 = _tangent_basis(n)
    B = np.empty((n.shape[0], 2, 2))
    Ht1 = np.einsum("mij,mj->mi", H, t1)
    Ht2 = np.einsum("mij,mj->mi", H, t2)
    B[:, 0, 0] = np.sum(t1 * Ht1, axis=1)
    B[:, 1, 1] = np.sum(t2 * Ht2, axis=1)
    B[:, 0, 1] = B[:, 1, 0] = 0.5 * (np.sum(t1 * Ht2, axis=1) + np.sum(t2 * Ht1, axis=1))
    lam, vec = np.linalg.eigh(B)
    tau1 = vec[:, 0, 0, None] * t1 + vec[:, 1, 0, None] * t2
    tau2 = vec[:, 0, 1, None] * t1 + vec[:, 1, 1, None] * t2
    return n, tau1, tau2, lam


def _surface_curvatures(eta, kappa_eta):
    # Level set {d = eta} curvature k_eta relates to the surface value by
    # k = k_eta / (1 - eta k_eta).
    denom = 1.0 - eta[:, None] * kappa_eta
    with np.errstate(divide="ignore", invalid="ignore"):
        return kappa_eta / denom, denom


def frame_at(field: SurfaceField, x) -> SurfaceFrame:
    """Surface frame at ``P(x)`` for a single point ``x`` near the surface."""
    x = np.asarray(x, dtype=float).reshape(1, 3)
    eta = np.atleast_1d(field.distance(x))
    grad = np.atleast_2d(field.gradient(x))
    H = field.hessian(x).reshape(1, 3, 3)
    n, t1, t2, lam = _frames_from_derivatives(eta, grad, H)
    kappa, denom = _surface_curvatures(eta, lam)
    if np.any(denom <= 0):
        raise ReachError("query point beyond the reach of the surface (J <= 0)")
    axis, Q = dominant_permutation(n[0])
    perm = _PERMS[axis]
    A = np.array([[t1[0, perm[0]], t1[0, perm[1]]], [t2[0, perm[0]], t2[0, perm[1]]]])
    p = np.atleast_2d(field.closest_point(x))[0]
    return SurfaceFrame(p, n[0], t1[0], t2[0], kappa[0], Q, A, float(eta[0]), axis)


def jacobian_at(field: SurfaceField, x) -> float:
    """Area Jacobian ``1 + 2 d H_eta + d**2 G_eta`` at a point near the surface.

    ``H_eta`` and ``G_eta`` are the mean and Gaussian curvatures of the level
    set through ``x`` (positive on convex sets), so that ``J`` is the ratio of
    surface to level-set area elements.

    Raises
    ------
    ReachError
        If ``J <= 0`` (the point is beyond the reach).
    """
    fr = frame_at(field, x)
    k1, k2 = fr.kappa
    J = 1.0 / ((1.0 + fr.eta * k1) * (1.0 + fr.eta * k2))
    if not J > 0:
        raise ReachError(f"J = {J:g} <= 0: tube width exceeds the reach")
    return float(J)


def delta_weight(d, eps: float):
    """Cosine averaging kernel ``(1/eps) * (1 + cos(pi d / eps)) / 2`` on ``|d| <= eps``."""
    if not eps > 0:
        raise GeometryError("eps must be positive")
    d = np.asarray(d, dtype=float)
    w = np.where(np.abs(d) <= eps, 0.5 * (1.0 + np.cos(np.pi * d / eps)) / eps, 0.0)
    return w if w.ndim else float(w)


def closest_point(field: SurfaceField, x):
    """Closest point projection ``P(x)`` of point(s) ``x`` onto ``field``'s surface."""
    return field.closest_point(x)


# ---------------------------------------------------------------------------
# Tube
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TubeNodes:
    """Grid nodes inside the tube ``|d| <= eps`` with per-node geometry.

    Nodes are ordered lexicographically by ``(k, j, i)`` (x fastest).

    Attributes
    ----------
    grid : CartesianGrid
    eps : float
    index : ndarray of int, shape (m, 3)
    points : ndarray, shape (m, 3)
    d : ndarray, shape (m,)
    proj : ndarray, shape (m, 3)
        Closest surface points.
    normal, tau1, tau2 : ndarray, shape (m, 3)
    kappa : ndarray, shape (m, 2)
        Principal curvatures at the projected points.
    jacobian : ndarray, shape (m,)
        ``J_h``, the area Jacobian from the node curvatures.
    delta : ndarray, shape (m,)
        ``delta_eps(d)``.
    good : ndarray of bool, shape (m,)
    indicator : ndarray, shape (m,)
        Curvature consistency indicator used for the good/bad split.
    field : SurfaceField
    """

    grid: CartesianGrid
    eps: float
    index: np.ndarray
    points: np.ndarray
    d: np.ndarray
    proj: np.ndarray
    normal: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray
    kappa: np.ndarray
    jacobian: np.ndarray
    delta: np.ndarray
    good: np.ndarray
    indicator: np.ndarray
    field: SurfaceField = field(repr=False)
    eikonal_error: float = 0.0

    def __len__(self) -> int:
        return self.d.size

    @property
    def size(self) -> int:
        return self.d.size

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def n_bad(self) -> int:
        return int(np.count_nonzero(~self.good))

    def hybrid_jacobian(self) -> np.ndarray:
        """``J_h`` at good nodes and 1 at bad nodes."""
        return np.where(self.good, self.jacobian, 1.0)

    def lookup(self) -> np.ndarray:
        """Dense ``grid.dims`` array mapping node indices to tube positions (-1 outside)."""
        table = np.full(self.grid.dims, -1, dtype=np.int64)
        table[self.index[:, 0], self.index[:, 1], self.index[:, 2]] = np.arange(self.size)
        return table

    def with_flags(self, good: np.ndarray) -> "TubeNodes":
        """Copy of the tube with replaced good/bad flags."""
        good = np.asarray(good, dtype=bool)
        if good.shape != self.good.shape:
            raise GeometryError("flag array has the wrong length")
        from dataclasses import replace
        return replace(self, good=good)


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def classify_nodes(field: SurfaceField, tube_or_data, theta_rel: float = 0.1,
                   length_scale: Optional[float] = None):
    """Good/bad flags from a curvature consistency indicator.

    The indicator at a node is the largest absolute difference between the
    principal curvatures obtained from the stencil at the node itself and
    those obtained at its projected surface point from the neighbouring
    stencils.  A node is bad when the indicator exceeds
    ``theta_rel * max(|kappa_1|, |kappa_2|, 1/length_scale)`` or when any
    stencil value is not finite.  Analytic fields are all good.

    Parameters
    ----------
    field : SurfaceField
    tube_or_data : TubeNodes or tuple
        Tube, or the tuple ``(index, d, kappa, proj, normal)`` used during
        enumeration.
    theta_rel : float
        Relative threshold.
    length_scale : float, optional
        Length whose inverse floors the curvature scale, so that flat
        regions are not flagged by round-off.  Defaults to ``25 h``.

    Returns
    -------
    good : ndarray of bool
    indicator : ndarray
    """
    if isinstance(tube_or_data, TubeNodes):
        t = tube_or_data
        index, d, kappa, proj, normal, grid = t.index, t.d, t.kappa, t.proj, t.normal, t.grid
    else:
        index, d, kappa, proj, normal, grid = tube_or_data
    m = d.size
    if field.analytic:
        return np.ones(m, dtype=bool), np.zeros(m)
    if length_scale is None:
        length_scale = 25.0 * grid.h
    finite = np.all(np.isfinite(kappa), axis=1)
    # Curvature at the projected point from interpolated node Hessians.
    try:
        Hp = field.hessian(proj)
        _, gp = field._interp(proj)
    except GeometryError:
        Hp = np.full((m, 3, 3), np.nan)
        gp = np.full((m, 3), np.nan)
    finite &= np.all(np.isfinite(Hp.reshape(m, -1)), axis=1) & np.all(np.isfinite(gp), axis=1)
    with np.errstate(invalid="ignore"):
        _, _, _, kp = _frames_from_derivatives(np.zeros(m), np.where(np.isfinite(gp), gp, normal), np.nan_to_num(Hp))
    indicator = np.max(np.abs(np.sort(kappa, axis=1) - kp), axis=1)
    scale = np.maximum(np.max(np.abs(kappa), axis=1), 1.0 / length_scale)
    with np.errstate(invalid="ignore"):
        good = finite & (indicator <= theta_rel * scale)
    indicator = np.where(finite, indicator, np.inf)
    return good, indicator


def enumerate_tube(field: SurfaceField, grid: Optional[CartesianGrid], eps: float, *,
                   theta_rel: float = 0.1, length_scale: Optional[float] = None,
                   check_eps: bool = True) -> TubeNodes:
    """Enumerate the grid nodes with ``|d| <= eps`` and their geometry.

    Parameters
    ----------
    field : SurfaceField
        Distance source.  Sampled fields must be enumerated on their grid.
    grid : CartesianGrid or None
        Grid; ``None`` uses the sample grid of a sampled field.
    eps : float
        Tube half-width, at least ``h`` and below the reach.
    theta_rel, length_scale : float
        Parameters of :func:`classify_nodes`.
    check_eps : bool
        Enforce ``eps >= h``.

    Raises
    ------
    GeometryError
        Empty tube, ``eps < h`` or a stencil leaving the sampled grid.
    ReachError
        ``J <= 0`` at a good node.
    """
    if grid is None:
        if not isinstance(field, SampledField):
            raise GeometryError("a grid is required for analytic fields")
        grid = field.grid
    h = grid.h
    if not eps > 0:
        raise GeometryError("eps must be positive")
    if check_eps and eps < h * (1.0 - 1e-12):
        raise GeometryError(f"tube half-width eps={eps:g} is smaller than h={h:g}")
    dgrid = field.distance_on_grid(grid)
    mask = np.abs(dgrid) <= eps
    # (k, j, i) lexicographic order = x fastest.
    kji = np.argwhere(mask.transpose(2, 1, 0))
    if kji.shape[0] == 0:
        raise GeometryError("empty tube: the surface does not cross the grid")
    index = np.ascontiguousarray(kji[:, ::-1])
    points = grid.points(index)
    d = dgrid[index[:, 0], index[:, 1], index[:, 2]]
    field.reach_check(points, eps)
    grad, H = field.node_derivatives(grid, index)
    eik = float(np.max(np.abs(np.linalg.norm(grad, axis=1) - 1.0)))
    normal, tau1, tau2, kap_eta = _frames_from_derivatives(d, grad, H)
    kappa, denom = _surface_curvatures(d, kap_eta)
    if isinstance(field, SampledField):
        proj = field.closest_point(points, start=(d, grad))
    else:
        proj = field.closest_point(points)
    # denom = 1 - eta * kappa_eta, so J = 1 + 2 eta H_eta + eta^2 G_eta.
    jac = denom[:, 0] * denom[:, 1]
    good, indicator = classify_nodes(field, (index, d, kappa, proj, normal, grid),
                                     theta_rel=theta_rel, length_scale=length_scale)
    invalid = ~(denom[:, 0] > 0) | ~(denom[:, 1] > 0) | ~np.isfinite(jac)
    if np.any(invalid & good):
        bad = np.flatnonzero(invalid & good)
        raise ReachError(
            f"J <= 0 at {bad.size} tube nodes (first at {points[bad[0]]}); eps={eps:g} exceeds the reach")
    good = good & ~invalid
    jac = np.where(invalid, 1.0, jac)
    delta = delta_weight(d, eps)
    arrays = (index, points, d, proj, normal, tau1, tau2, kappa, jac, delta, good, indicator)
    _freeze(*arrays)
    return TubeNodes(grid, float(eps), index, points, d, proj, normal, tau1, tau2, kappa, jac,
                     delta, good, indicator, field, eik)
