"""Discrete boundary integral system on tube nodes and its GMRES solution.

The coupled unknowns ``(rho_1, rho_2)`` live on the grid nodes of the tube
and solve::

    Lambda p + h^3 K W p + h^2 Omega W p = g

``W`` holds the node weights ``delta_eps(d) J``.  ``K`` is the dense matrix
of restricted kernels with the entries of each row's stencil removed and
``Omega`` the sparse stencil matrix.  Three quadratures are available:

``ctr2``
    The stencil of a target holds, on every lattice plane normal to the
    dominant axis of the target normal, the node nearest to the singular
    line.  Its entries are the corrected trapezoidal weights for the leading
    singular terms of each kernel.
``kreg``
    The stencil holds the nodes whose projections lie within the tangential
    radius ``tau`` of the target.  There the kernels are replaced by their
    disc averages, which vanish except for ``K12``.
``hyb``
    ``ctr2`` rows at good nodes and ``kreg`` rows at bad nodes, with the
    Jacobian set to 1 at bad nodes.

The dense part is applied matrix-free; the stencil part is a sparse matrix
built once per operator.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .geometry import TubeNodes, dominant_axes
from .kernels import KernelParams, kreg_constant, s0_samples, s1_12
from .weights import WeightTable, family_coefficients

__all__ = [
    "OperatorError",
    "SolverError",
    "DensityPair",
    "SingularLine",
    "DiscreteOperator",
    "GmresResult",
    "METHODS",
    "build_rhs",
    "node_weights",
    "singular_line",
    "assemble",
    "apply_operator",
    "classify_and_split",
    "gmres_solve",
    "solve",
]

METHODS = ("ctr2", "kreg", "hyb")

# Permutation of the axes that puts the dominant one last, indexed by it.
_PERMS = np.array([(1, 2, 0), (0, 2, 1), (0, 1, 2)])
_FOUR_PI = 4.0 * np.pi
# Shift distance (in units of h) from -1/2 treated as an exact tie.
_SHIFT_TIE_TOL = 1e-9


class OperatorError(ValueError):
    """Invalid operator, density or right-hand side."""


class SolverError(RuntimeError):
    """GMRES did not reach the requested tolerance.

    Attributes
    ----------
    residuals : list of float
        Relative residual after every iteration.
    """

    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = list(residuals)


# ---------------------------------------------------------------------------
# Densities and right-hand side
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DensityPair:
    """Potential and normal-derivative densities on the tube nodes.

    Attributes
    ----------
    rho1, rho2 : ndarray, shape (m,)
    """

    rho1: np.ndarray
    rho2: np.ndarray

    def __post_init__(self):
        r1 = np.asarray(self.rho1, dtype=float)
        r2 = np.asarray(self.rho2, dtype=float)
        if r1.ndim != 1 or r1.shape != r2.shape:
            raise OperatorError("densities must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(r1)) and np.all(np.isfinite(r2))):
            raise OperatorError("densities must be finite")
        object.__setattr__(self, "rho1", r1)
        object.__setattr__(self, "rho2", r2)

    def __len__(self) -> int:
        return self.rho1.size

    def vector(self) -> np.ndarray:
        """Stacked vector ``(rho1, rho2)``."""
        return np.concatenate([self.rho1, self.rho2])

    @classmethod
    def from_vector(cls, v) -> "DensityPair":
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.size % 2:
            raise OperatorError("stacked density vector must have even length")
        m = v.size // 2
        return cls(v[:m].copy(), v[m:].copy())

    @classmethod
    def zeros(cls, m: int) -> "DensityPair":
        return cls(np.zeros(m), np.zeros(m))


def build_rhs(centers, charges, tube: TubeNodes, params: KernelParams,
              surface_tol: Optional[float] = None) -> DensityPair:
    """Right-hand sides ``g1 = sum q G0 / eps_I`` and ``g2 = sum q dG0/dn_x / eps_I``.

    Both are evaluated at the projected points, so they are constant along
    normal lines.

    Parameters
    ----------
    centers : array_like, shape (n, 3)
        Charge positions.
    charges : array_like, shape (n,)
    tube : TubeNodes
    params : KernelParams
    surface_tol : float, optional
        Charges with ``|d| <= surface_tol`` count as lying on the surface;
        default ``1e-6 h``.

    Raises
    ------
    OperatorError
        A charge lies on the surface.
    """
    z = np.atleast_2d(np.asarray(centers, dtype=float))
    q = np.atleast_1d(np.asarray(charges, dtype=float))
    if z.shape != (q.size, 3):
        raise OperatorError("centers must have shape (n, 3) matching the charges")
    tol = 1e-6 * tube.h if surface_tol is None else surface_tol
    dz = np.atleast_1d(tube.field.distance(z))
    if np.any(np.abs(dz) <= tol):
        raise OperatorError("a charge lies on the surface")
    if np.any(dz < 0):
        warnings.warn("some charges lie outside the domain", RuntimeWarning, stacklevel=2)
    x = tube.proj
    n = tube.normal
    g1 = np.zeros(tube.size)
    g2 = np.zeros(tube.size)
    for zk, qk in zip(z, q):
        diff = x - zk
        r = np.linalg.norm(diff, axis=1)
        g1 += qk / (_FOUR_PI * r)
        g2 -= qk * np.sum(diff * n, axis=1) / (_FOUR_PI * r**3)
    return DensityPair(g1 / params.eps_i, g2 / params.eps_i)


# ---------------------------------------------------------------------------
# Singular lines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SingularLine:
    """Planes crossed by the normal line of one target inside the tube.

    Attributes
    ----------
    target : int
        Tube row of the target node.
    axis : int
        Dominant axis of the target normal (the plane normal).
    perm : ndarray of int, shape (3,)
        Axis order of the permuted frame; ``perm[2] == axis``.
    A : ndarray, shape (2, 2)
        Frame block ``A[r, c] = tau_r[perm[c]]``.
    kappa : ndarray, shape (2,)
        Principal curvatures at the target.
    planes : ndarray of int, shape (p,)
        Grid index of each plane along ``axis``.
    t : ndarray, shape (p,)
        Plane coordinates.
    points : ndarray, shape (p, 3)
        Intersections of the normal line with the planes.
    eta : ndarray, shape (p,)
        Signed distance of the intersection points.
    nodes : ndarray of int, shape (p, 3)
        Nearest in-plane grid node.
    alpha, beta : ndarray, shape (p,)
        Shifts in ``[-1/2, 1/2)``: ``point = node + h (alpha, beta)`` in the
        two in-plane axes ``perm[0], perm[1]``.
    rows : ndarray of int, shape (p,)
        Tube row of each nearest node, ``-1`` if it is outside the tube.
    """

    target: int
    axis: int
    perm: np.ndarray
    A: np.ndarray
    kappa: np.ndarray
    planes: np.ndarray
    t: np.ndarray
    points: np.ndarray
    eta: np.ndarray
    nodes: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    rows: np.ndarray


def _frame_blocks(tube: TubeNodes, targets):
    # Dominant axis, permutation and A block for each target row.
    n = tube.normal[targets]
    axis = dominant_axes(n)
    perm = _PERMS[axis]
    t1 = np.take_along_axis(tube.tau1[targets], perm[:, :2], axis=1)
    t2 = np.take_along_axis(tube.tau2[targets], perm[:, :2], axis=1)
    A = np.stack([t1, t2], axis=1)
    return axis, perm, A


def _line_records(tube: TubeNodes, targets, lookup=None):
    # Plane records of the singular lines of many targets (concatenated).
    targets = np.asarray(targets, dtype=np.int64)
    grid = tube.grid
    h = grid.h
    eps = tube.eps
    o = np.asarray(grid.origin, dtype=float)
    dims = np.asarray(grid.dims)
    axis, perm, A = _frame_blocks(tube, targets)
    xs = tube.proj[targets]
    ns = tube.normal[targets]
    ni = ns[np.arange(targets.size), axis]
    xi = xs[np.arange(targets.size), axis]
    reach = eps * np.abs(ni)
    lo = np.ceil((xi - o[axis] - reach) / h - 1e-12).astype(np.int64)
    hi = np.floor((xi - o[axis] + reach) / h + 1e-12).astype(np.int64)
    count = np.maximum(hi - lo + 1, 0)
    owner = np.repeat(np.arange(targets.size), count)
    start = np.cumsum(count) - count
    plane = lo[owner] + (np.arange(owner.size) - start[owner])
    ax = axis[owner]
    t = o[ax] + h * plane
    s = (t - xi[owner]) / ni[owner]
    keep = np.abs(s) <= eps
    owner, plane, ax, t, s = owner[keep], plane[keep], ax[keep], t[keep], s[keep]
    pts = xs[owner] + s[:, None] * ns[owner]
    pm = perm[owner]
    f = (np.take_along_axis(pts, pm[:, :2], axis=1) - o[pm[:, :2]]) / h
    # A midpoint within round-off of a tie goes to the upper node, so that
    # targets sharing a projection point get the same stencil.
    near = np.floor(f + 0.5 + _SHIFT_TIE_TOL)
    shift = np.maximum(f - near, -0.5)
    nodes = np.empty((owner.size, 3), dtype=np.int64)
    rows_idx = np.arange(owner.size)
    nodes[rows_idx, pm[:, 0]] = near[:, 0].astype(np.int64)
    nodes[rows_idx, pm[:, 1]] = near[:, 1].astype(np.int64)
    nodes[rows_idx, ax] = plane
    inside = np.all((nodes >= 0) & (nodes < dims), axis=1)
    rows = np.full(owner.size, -1, dtype=np.int64)
    if lookup is None:
        lookup = tube.lookup()
    ok = np.flatnonzero(inside)
    rows[ok] = lookup[nodes[ok, 0], nodes[ok, 1], nodes[ok, 2]]
    return dict(owner=owner, target=targets[owner], axis=ax, perm=pm, A=A[owner],
                plane=plane, t=t, points=pts, eta=-s, nodes=nodes,
                alpha=shift[:, 0], beta=shift[:, 1], rows=rows)


def singular_line(tube: TubeNodes, target: int, lookup=None) -> SingularLine:
    """Planes crossed by the normal line through the projection of a target node.

    The line ``P y + s n`` is cut by the lattice planes normal to the
    dominant axis of ``n``; planes with ``|s| <= eps`` are kept.  On each
    plane the nearest grid node is found by rounding, so an exact tie picks
    the upper node and keeps the shift in ``[-1/2, 1/2)``.
    """
    rec = _line_records(tube, [int(target)], lookup)
    axis, perm, A = _frame_blocks(tube, np.array([int(target)]))
    return SingularLine(
        target=int(target), axis=int(axis[0]), perm=perm[0].copy(), A=A[0].copy(),
        kappa=tube.kappa[target].copy(), planes=rec["plane"], t=rec["t"],
        points=rec["points"], eta=rec["eta"], nodes=rec["nodes"], alpha=rec["alpha"],
        beta=rec["beta"], rows=rec["rows"])


# ---------------------------------------------------------------------------
# Operator assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteOperator:
    """Assembled discrete operator.

    Attributes
    ----------
    method : str
        ``"ctr2"``, ``"kreg"`` or ``"hyb"``.
    tube : TubeNodes
    params : KernelParams
    tau : float
        Regularization radius of ``kreg`` rows.
    weights : ndarray, shape (m,)
        Node weights ``delta_eps(d) J`` (the diagonal of ``W``).
    row_kind : ndarray of int8, shape (m,)
        1 for corrected rows, 0 for regularized rows.
    excl_ptr, excl_idx : ndarray of int
        CSR lists of the sources removed from each row's dense sum.
    stencil : scipy.sparse.csr_matrix, shape (2m, 2m)
        ``h^2 Omega W``, including the regularization constants.
    table : WeightTable or None
    """

    method: str
    tube: TubeNodes
    params: KernelParams
    tau: float
    weights: np.ndarray
    row_kind: np.ndarray
    excl_ptr: np.ndarray
    excl_idx: np.ndarray
    stencil: sp.csr_matrix
    table: Optional[WeightTable] = field(default=None, repr=False)
    soa_points: np.ndarray = field(default=None, repr=False)
    soa_normals: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.soa_points is None:
            object.__setattr__(self, "soa_points", np.ascontiguousarray(self.tube.proj.T))
            object.__setattr__(self, "soa_normals", np.ascontiguousarray(self.tube.normal.T))

    @property
    def size(self) -> int:
        return self.tube.size

    @property
    def shape(self) -> tuple:
        return (2 * self.size, 2 * self.size)

    def stencil_sizes(self) -> np.ndarray:
        """Number of removed sources per row."""
        return np.diff(self.excl_ptr)

    def matvec(self, v) -> np.ndarray:
        """Apply to a stacked vector."""
        return apply_operator(self, DensityPair.from_vector(v)).vector()

    def apply(self, p: "DensityPair") -> "DensityPair":
        return apply_operator(self, p)


def _ctr2_stencils(tube, rows, params, table, lookup, chunk=50000):
    # Corrected nodes and weights for the given target rows.
    h = tube.h
    rec = _line_records(tube, rows, lookup)
    keep = rec["rows"] >= 0
    tgt = rec["target"][keep]
    src = rec["rows"][keep]
    A = rec["A"][keep]
    eta = rec["eta"][keep]
    alpha = rec["alpha"][keep]
    beta = rec["beta"][keep]
    kap = tube.kappa[tgt]
    n_theta = 1 << max(6, int(math.ceil(math.log2(4 * table.N))))
    w11 = np.empty(tgt.size)
    w21 = np.empty(tgt.size)
    w22 = np.empty(tgt.size)
    w1 = np.empty(tgt.size)
    for s in range(0, tgt.size, chunk):
        e = min(s + chunk, tgt.size)
        s11, s21, s22 = s0_samples(A[s:e], kap[s:e], eta[s:e], n_theta, params)
        fam = table.family_values(alpha[s:e], beta[s:e])
        w11[s:e] = np.sum(family_coefficients(s11, table.N) * fam, axis=1)
        w21[s:e] = np.sum(family_coefficients(s21, table.N) * fam, axis=1)
        w22[s:e] = np.sum(family_coefficients(s22, table.N) * fam, axis=1)
        w1[s:e] = fam[:, -1]
    w12 = s1_12(params) * w1
    return tgt, src, h**2 * w11, -(h**3) * w12, h**2 * w21, -(h**2) * w22


def _kreg_stencils(tube, rows, params, tau):
    # Sources within tangential distance tau of each target projection.  The
    # candidate search is limited to chord length 2 tau so that far-side
    # points whose tangent-plane projection happens to be close are excluded.
    tree = cKDTree(tube.proj)
    lists = tree.query_ball_point(tube.proj[rows], 2.0 * tau, return_sorted=True)
    counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
    tgt = np.repeat(np.asarray(rows, dtype=np.int64), counts)
    src = np.fromiter((j for l in lists for j in l), dtype=np.int64, count=int(counts.sum()))
    v = tube.proj[src] - tube.proj[tgt]
    nx = tube.normal[tgt]
    vt = v - np.sum(v * nx, axis=1)[:, None] * nx
    inside = np.linalg.norm(vt, axis=1) < tau
    tgt, src = tgt[inside], src[inside]
    c12 = kreg_constant(1, 2, tau, params)
    return tgt, src, -(tube.h**3) * c12 * np.ones(tgt.size)


def node_weights(tube: TubeNodes, method: str) -> np.ndarray:
    """Node weights ``delta_eps(d) J`` with the Jacobian matching the method.

    ``ctr2`` uses ``J_h``, ``kreg`` uses 1 and ``hyb`` uses ``J_h`` at good
    nodes and 1 at bad nodes.
    """
    method = method.lower()
    if method == "ctr2":
        jac = tube.jacobian
    elif method == "kreg":
        jac = np.ones(tube.size)
    elif method == "hyb":
        jac = tube.hybrid_jacobian()
    else:
        raise OperatorError(f"unknown method {method!r}; expected one of {METHODS}")
    return tube.delta * jac


def assemble(tube: TubeNodes, params: KernelParams, method: str = "ctr2",
             table: Optional[WeightTable] = None, tau: Optional[float] = None,
             correct: bool = True) -> DiscreteOperator:
    """Assemble the discrete operator for one quadrature.

    Parameters
    ----------
    tube : TubeNodes
    params : KernelParams
    method : {"ctr2", "kreg", "hyb"}
    table : WeightTable
        Correction weights; required by ``ctr2`` and ``hyb`` when ``correct``.
    tau : float, optional
        Regularization radius, default ``2 h``.
    correct : bool
        With ``False`` the corrected rows carry no stencil at all, which
        leaves the plain punctured lattice sum.

    Returns
    -------
    DiscreteOperator
    """
    method = method.lower()
    if method not in METHODS:
        raise OperatorError(f"unknown method {method!r}; expected one of {METHODS}")
    tau = 2.0 * tube.h if tau is None else float(tau)
    if not tau > 0:
        raise OperatorError("regularization radius must be positive")
    m = tube.size
    if method == "ctr2":
        kind = np.ones(m, dtype=np.int8)
    elif method == "kreg":
        kind = np.zeros(m, dtype=np.int8)
    else:
        kind = tube.good.astype(np.int8)
    weights = node_weights(tube, method)
    weights.setflags(write=False)

    tgt_all, src_all = [], []
    ri, ci, vals = [], [], []
    corr_rows = np.flatnonzero(kind == 1)
    reg_rows = np.flatnonzero(kind == 0)
    if corr_rows.size and correct:
        if table is None:
            raise OperatorError(f"method {method!r} needs a weight table")
        tgt, src, a11, a12, a21, a22 = _ctr2_stencils(tube, corr_rows, params, table,
                                                      tube.lookup())
        tgt_all.append(tgt)
        src_all.append(src)
        w = weights[src]
        ri += [tgt, tgt, m + tgt, m + tgt]
        ci += [src, m + src, src, m + src]
        vals += [a11 * w, a12 * w, a21 * w, a22 * w]
    if reg_rows.size:
        tgt, src, c12 = _kreg_stencils(tube, reg_rows, params, tau)
        tgt_all.append(tgt)
        src_all.append(src)
        ri.append(tgt)
        ci.append(m + src)
        vals.append(c12 * weights[src])
    if tgt_all:
        tgt = np.concatenate(tgt_all)
        src = np.concatenate(src_all)
    else:
        tgt = np.zeros(0, dtype=np.int64)
        src = np.zeros(0, dtype=np.int64)
    order = np.lexsort((src, tgt))
    tgt, src = tgt[order], src[order]
    counts = np.bincount(tgt, minlength=m)
    excl_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    excl_idx = src.astype(np.int64)
    if ri:
        stencil = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))),
            shape=(2 * m, 2 * m))
    else:
        stencil = sp.csr_matrix((2 * m, 2 * m))
    stencil.sum_duplicates()
    for a in (kind, excl_ptr, excl_idx):
        a.setflags(write=False)
    return DiscreteOperator(method=method, tube=tube, params=params, tau=tau, weights=weights,
                            row_kind=kind, excl_ptr=excl_ptr, excl_idx=excl_idx,
                            stencil=stencil, table=table)


def classify_and_split(op: DiscreteOperator, table: Optional[WeightTable] = None
                       ) -> DiscreteOperator:
    """Hybrid operator on the same tube: corrected rows at good nodes, regularized at bad ones."""
    return assemble(op.tube, op.params, "hyb", table=table if table is not None else op.table,
                    tau=op.tau)


# ---------------------------------------------------------------------------
# Dense part
# ---------------------------------------------------------------------------


@numba.njit(inline="always", fastmath=True)
def _exp_neg(x):
    # exp(-x) for 0 <= x <~ 50: Taylor polynomial on x/256, then 8 squarings.
    # Relative error below 1e-13 on [0, 10]; division free, so it vectorizes.
    y = -x * (1.0 / 256.0)
    p = 1.0 + y * (1.0 + y * (0.5 + y * (1.0 / 6.0 + y * (1.0 / 24.0 + y * (
        1.0 / 120.0 + y * (1.0 / 720.0 + y * (1.0 / 5040.0)))))))
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    p = p * p
    return p


@numba.njit(cache=True, fastmath=True)
def _dense_rows(r0, r1, X, Y, Z, NX, NY, NZ, a, b, excl_ptr, excl_idx, kappa, ratio_ei,
                ratio_ie, out1, out2):
    # Rows r0..r1-1 of the dense kernel sums over the projected points
    # (coordinates and normals stored per axis).  ``a`` and ``b`` are the
    # weighted densities; excluded sources are zeroed for the duration of a
    # row and restored afterwards, so both arrays must be private to the
    # caller.  Coincident points contribute nothing.
    m = X.shape[0]
    inv4pi = 1.0 / (4.0 * np.pi)
    for k in range(r0, r1):
        e0 = excl_ptr[k]
        e1 = excl_ptr[k + 1]
        saved_a = np.empty(e1 - e0)
        saved_b = np.empty(e1 - e0)
        for e in range(e0, e1):
            saved_a[e - e0] = a[excl_idx[e]]
            saved_b[e - e0] = b[excl_idx[e]]
            a[excl_idx[e]] = 0.0
            b[excl_idx[e]] = 0.0
        x0 = X[k]
        x1 = Y[k]
        x2 = Z[k]
        n0 = NX[k]
        n1 = NY[k]
        n2 = NZ[k]
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            d0 = x0 - X[j]
            d1 = x1 - Y[j]
            d2 = x2 - Z[j]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            ok = r2 > 1e-24
            r2s = r2 if ok else 1.0
            ir = 1.0 / math.sqrt(r2s)
            r = r2s * ir
            xk = kappa * r
            ex = _exp_neg(xk)
            p = ex * (1.0 + xk)
            cm = (d0 * NX[j] + d1 * NY[j] + d2 * NZ[j]) * ir
            ck = (d0 * n0 + d1 * n1 + d2 * n2) * ir
            nn = n0 * NX[j] + n1 * NY[j] + n2 * NZ[j]
            g = inv4pi * ir
            g2 = g * ir
            aj = a[j] if ok else 0.0
            bj = b[j] if ok else 0.0
            k11 = cm * (1.0 - ratio_ei * p) * g2
            k12 = (1.0 - ex) * g
            k22 = -ck * (1.0 - ratio_ie * p) * g2
            k21 = (nn * (1.0 - p) - ck * cm * (3.0 - ex * (3.0 + 3.0 * xk + xk * xk))) * g2 * ir
            s1 += k11 * aj - k12 * bj
            s2 += k21 * aj - k22 * bj
        out1[k] = s1
        out2[k] = s2
        for e in range(e0, e1):
            a[excl_idx[e]] = saved_a[e - e0]
            b[excl_idx[e]] = saved_b[e - e0]


@numba.njit(parallel=True, cache=True)
def _dense_apply(P, N, a, b, excl_ptr, excl_idx, kappa, ratio_ei, ratio_ie, nblocks):
    m = P.shape[1]
    out1 = np.zeros(m)
    out2 = np.zeros(m)
    size = (m + nblocks - 1) // nblocks
    for blk in numba.prange(nblocks):
        r0 = blk * size
        r1 = min(m, r0 + size)
        if r0 >= r1:
            continue
        aa = a.copy()
        bb = b.copy()
        _dense_rows(r0, r1, P[0], P[1], P[2], N[0], N[1], N[2], aa, bb, excl_ptr, excl_idx,
                    kappa, ratio_ei, ratio_ie, out1, out2)
    return out1, out2


def dense_sums(op: DiscreteOperator, p: DensityPair):
    """``h^3 K W p``: the kernel sums over each row's non-stencil sources."""
    tube = op.tube
    h3 = tube.h**3
    a = np.ascontiguousarray(h3 * op.weights * p.rho1)
    b = np.ascontiguousarray(h3 * op.weights * p.rho2)
    nblocks = max(1, numba.get_num_threads())
    return _dense_apply(op.soa_points, op.soa_normals, a, b, op.excl_ptr, op.excl_idx,
                        float(op.params.kappa), float(op.params.ratio_ei),
                        float(op.params.ratio_ie), nblocks)


def apply_operator(op: DiscreteOperator, p: DensityPair) -> DensityPair:
    """``Lambda p + h^3 K W p + h^2 Omega W p``.

    Raises
    ------
    OperatorError
        Density length differs from the tube size.
    """
    if len(p) != op.size:
        raise OperatorError(f"density has {len(p)} entries, operator expects {op.size}")
    d1, d2 = dense_sums(op, p)
    corr = op.stencil @ p.vector()
    m = op.size
    lam1 = op.params.lambda1
    lam2 = op.params.lambda2
    return DensityPair(lam1 * p.rho1 + d1 + corr[:m], lam2 * p.rho2 + d2 + corr[m:])


# ---------------------------------------------------------------------------
# GMRES
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GmresResult:
    """Outcome of a GMRES solve.

    Attributes
    ----------
    x : ndarray or DensityPair
        Solution, in the form of the right-hand side.
    iterations : int
    residuals : tuple of float
        Relative residual norm after each iteration (entry 0 is 1).
    """

    x: object
    iterations: int
    residuals: tuple

    @property
    def residual(self) -> float:
        return self.residuals[-1]


def gmres_solve(op, rhs, tol: float = 1e-8, maxiter: int = 200,
                callback: Optional[Callable[[int, float], None]] = None,
                scaling: Optional[str] = "diagonal") -> GmresResult:
    """Unrestarted GMRES with modified Gram-Schmidt, started from zero.

    For a :class:`DiscreteOperator` the default ``scaling="diagonal"``
    solves ``A Lambda^-1 y = b`` and returns ``x = Lambda^-1 y``.  The
    residual monitored is still that of ``A x = b``; the scaling merges the
    two eigenvalue clusters near ``lambda_1`` and ``lambda_2`` and roughly
    divides the iteration count by three when the permittivities differ
    strongly.

    Parameters
    ----------
    op : DiscreteOperator or callable
        Operator; a callable maps stacked vectors to stacked vectors.
    rhs : DensityPair or ndarray
    tol : float
        Relative residual target in ``(0, 1)``.
    maxiter : int
    callback : callable, optional
        Called with ``(iteration, relative residual)``.
    scaling : {"diagonal", None}
        Right scaling by ``Lambda^-1``; ignored for plain callables.

    Raises
    ------
    SolverError
        ``maxiter`` iterations without reaching ``tol``; carries the history.
    """
    if not 0.0 < tol < 1.0:
        raise OperatorError("tol must lie in (0, 1)")
    if scaling not in ("diagonal", None):
        raise OperatorError("scaling must be 'diagonal' or None")
    pair = isinstance(rhs, DensityPair)
    b = rhs.vector() if pair else np.asarray(rhs, dtype=float).ravel()
    if isinstance(op, DiscreteOperator):
        if not pair or len(rhs) != op.size:
            raise OperatorError("right-hand side does not match the operator")
        if scaling == "diagonal":
            m = op.size
            inv = np.concatenate([np.full(m, 1.0 / op.params.lambda1),
                                  np.full(m, 1.0 / op.params.lambda2)])
            matvec = lambda v: op.matvec(v * inv)  # noqa: E731
        else:
            inv = None
            matvec = op.matvec
    else:
        inv = None
        matvec = op
    n = b.size
    beta = float(np.linalg.norm(b))
    history = [1.0]
    if beta == 0.0:
        x = np.zeros(n)
        return GmresResult(DensityPair.from_vector(x) if pair else x, 0, tuple(history))
    kmax = min(maxiter, n)
    V = np.zeros((kmax + 1, n))
    H = np.zeros((kmax + 1, kmax))
    cs = np.zeros(kmax)
    sn = np.zeros(kmax)
    gvec = np.zeros(kmax + 1)
    gvec[0] = beta
    V[0] = b / beta
    it = 0
    converged = False
    for j in range(kmax):
        w = np.asarray(matvec(V[j]), dtype=float)
        for i in range(j + 1):
            H[i, j] = np.dot(w, V[i])
            w = w - H[i, j] * V[i]
        H[j + 1, j] = np.linalg.norm(w)
        if H[j + 1, j] > 0.0:
            V[j + 1] = w / H[j + 1, j]
        for i in range(j):
            tmp = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
            H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
            H[i, j] = tmp
        den = math.hypot(H[j, j], H[j + 1, j])
        if den == 0.0:
            raise SolverError("GMRES breakdown: singular Hessenberg matrix", history)
        cs[j] = H[j, j] / den
        sn[j] = H[j + 1, j] / den
        H[j, j] = den
        H[j + 1, j] = 0.0
        gvec[j + 1] = -sn[j] * gvec[j]
        gvec[j] = cs[j] * gvec[j]
        it = j + 1
        res = abs(gvec[j + 1]) / beta
        history.append(res)
        if callback is not None:
            callback(it, res)
        if res <= tol:
            converged = True
            break
    y = np.zeros(it)
    for i in range(it - 1, -1, -1):
        y[i] = (gvec[i] - np.dot(H[i, i + 1:it], y[i + 1:it])) / H[i, i]
    x = V[:it].T @ y
    if inv is not None:
        x = x * inv
    if not converged:
        raise SolverError(f"GMRES stopped after {it} iterations with relative residual "
                          f"{history[-1]:.3e} > {tol:g}", history)
    return GmresResult(DensityPair.from_vector(x) if pair else x, it, tuple(history))


def solve(op: DiscreteOperator, rhs: DensityPair, tol: float = 1e-8, maxiter: int = 200,
          callback=None, scaling: Optional[str] = "diagonal") -> GmresResult:
    """Solve ``op p = rhs`` with :func:`gmres_solve`."""
    return gmres_solve(op, rhs, tol=tol, maxiter=maxiter, callback=callback, scaling=scaling)
