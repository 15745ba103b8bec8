"""Solvent excluded surfaces on Cartesian grids.

The solvent excluded surface (SES) of a set of atoms is the boundary of the
closing of the van der Waals union by a probe ball of radius ``r_p``, with
enclosed cavities removed.  With ``d_SAS`` the signed distance to the
solvent accessible surface (the union of balls of radii ``r_k + r_p``),
the points ``{d_SAS >= r_p}`` form the closed set, and ``d_SAS - r_p`` is
its exact signed distance wherever ``d_SAS >= 0``.

The pipeline is

1. the inflated-union value ``u = max_k (r_k + r_p - |x - z_k|)``, exact
   outside the SAS and a lower bound inside;
2. the exact SAS distance in a shell inside the SAS, from the nearest
   point among radial projections onto spheres, nearest points on pairwise
   intersection circles and triple intersection vertices that are not
   covered by another ball;
3. erosion ``d <- d_SAS - r_p``;
4. removal of cavities by a 6-connected flood fill from the box boundary;
5. first-order fast marching away from the exact band.

Sign convention: ``d > 0`` inside the molecule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np
from scipy.ndimage import distance_transform_edt

from .geometry import CartesianGrid, SampledField

__all__ = [
    "SurfaceGenError",
    "AtomSet",
    "SesConfig",
    "read_atoms",
    "vdw_sdf",
    "sas_distance",
    "remove_cavities",
    "fast_marching",
    "generate_ses",
    "SesResult",
]


class SurfaceGenError(ValueError):
    """Invalid atoms, grid or probe for surface generation."""


# ---------------------------------------------------------------------------
# Atoms and configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AtomSet:
    """Atom centres, radii and charges.

    Attributes
    ----------
    centers : ndarray, shape (n, 3)
    radii : ndarray, shape (n,)
    charges : ndarray, shape (n,)
    """

    centers: np.ndarray
    radii: np.ndarray
    charges: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        r = np.atleast_1d(np.asarray(self.radii, dtype=float))
        q = np.atleast_1d(np.asarray(self.charges, dtype=float))
        if c.shape[0] == 0 or c.shape[1:] != (3,):
            raise SurfaceGenError("an atom set needs at least one centre with three coordinates")
        if r.shape != (c.shape[0],) or q.shape != (c.shape[0],):
            raise SurfaceGenError("radii and charges need one entry per atom")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(q))):
            raise SurfaceGenError("atom coordinates and charges must be finite")
        if not np.all(r > 0) or not np.all(np.isfinite(r)):
            raise SurfaceGenError("atom radii must be positive")
        for name, a in (("centers", c), ("radii", r), ("charges", q)):
            a = a.copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return self.radii.size

    @property
    def bounding_box(self) -> tuple:
        """``(lo, hi)`` corners of the box enclosing all balls."""
        lo = np.min(self.centers - self.radii[:, None], axis=0)
        hi = np.max(self.centers + self.radii[:, None], axis=0)
        return lo, hi


def read_atoms(path) -> AtomSet:
    """Read a PQR-like atom file.

    Lines starting with ``#`` and blank lines are skipped; data lines hold
    ``x y z q r`` separated by whitespace.

    Raises
    ------
    SurfaceGenError
        Malformed line (with its line number) or no atoms.
    """
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SurfaceGenError(f"cannot read atom file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 5:
            raise SurfaceGenError(f"{path}:{lineno}: expected 'x y z q r', got {len(parts)} fields")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise SurfaceGenError(f"{path}:{lineno}: non-numeric field in {s!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise SurfaceGenError(f"{path}:{lineno}: non-finite value")
        if not vals[4] > 0:
            raise SurfaceGenError(f"{path}:{lineno}: radius must be positive")
        rows.append(vals)
    if not rows:
        raise SurfaceGenError(f"{path}: no atoms found")
    a = np.array(rows)
    return AtomSet(a[:, :3], a[:, 4], a[:, 3])


@dataclass(frozen=True)
class SesConfig:
    """Parameters of the SES pipeline.

    Attributes
    ----------
    probe : float
        Probe radius ``r_p``; at least ``2 h``.
    grid : CartesianGrid
        Sample grid; must contain every ball inflated by ``r_p + 3 h``.
    band : float
        Half-width, in units of ``h``, of the band in which the exact
        distance is kept; fast marching fills the rest.
    tol : float
        Relative tolerance of the coverage tests for boundary candidates.
    """

    probe: float
    grid: CartesianGrid
    band: float = 8.0
    tol: float = 1e-10

    def __post_init__(self):
        if not (math.isfinite(self.probe) and self.probe > 0):
            raise SurfaceGenError("probe radius must be positive")
        if self.probe < 2.0 * self.grid.h * (1.0 - 1e-12):
            raise SurfaceGenError(
                f"grid spacing h={self.grid.h:g} cannot resolve probe radius {self.probe:g} "
                "(need r_p >= 2 h)")
        if not self.band >= 3.0:
            raise SurfaceGenError("the exact band must be at least 3 cells wide")
        if not (0 < self.tol < 1e-3):
            raise SurfaceGenError("tol must lie in (0, 1e-3)")

    @classmethod
    def for_atoms(cls, atoms: AtomSet, probe: float, n: int, margin: float = 1.0,
                  **kw) -> "SesConfig":
        """Cubic grid of ``n`` nodes per axis around the inflated atoms.

        The box is the bounding cube of the balls inflated by ``probe``,
        enlarged by ``margin`` on each side, centred on the atoms.
        """
        lo, hi = atoms.bounding_box
        lo = lo - probe - margin
        hi = hi + probe + margin
        mid = 0.5 * (lo + hi)
        half = 0.5 * float(np.max(hi - lo))
        h = 2.0 * half / (n - 1)
        return cls(probe, CartesianGrid((n, n, n), tuple(mid - half), h), **kw)


# ---------------------------------------------------------------------------
# Van der Waals and SAS distances
# ---------------------------------------------------------------------------


def vdw_sdf(atoms: AtomSet, query) -> np.ndarray:
    """``max_k (r_k - |x - z_k|)``, exact outside the union.

    Parameters
    ----------
    atoms : AtomSet
    query : array_like, shape (3,) or (m, 3)
    """
    x = np.asarray(query, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    out = _union_value(np.ascontiguousarray(x), atoms.centers.copy(), atoms.radii.copy())
    return out[0] if single else out


@numba.njit(cache=True)
def _union_value(x, z, r):
    m = x.shape[0]
    out = np.empty(m)
    for i in range(m):
        best = -np.inf
        for k in range(z.shape[0]):
            d0 = x[i, 0] - z[k, 0]
            d1 = x[i, 1] - z[k, 1]
            d2 = x[i, 2] - z[k, 2]
            v = r[k] - math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            if v > best:
                best = v
        out[i] = best
    return out


@numba.njit(cache=True)
def _union_on_grid(origin, h, dims, z, r, out):
    # Only balls whose support reaches a node matter; a plain loop over
    # atoms per node keeps this simple and exact.
    n0, n1, n2 = dims
    for i in range(n0):
        x0 = origin[0] + h * i
        for j in range(n1):
            x1 = origin[1] + h * j
            for k in range(n2):
                x2 = origin[2] + h * k
                best = -np.inf
                for a in range(z.shape[0]):
                    d0 = x0 - z[a, 0]
                    d1 = x1 - z[a, 1]
                    d2 = x2 - z[a, 2]
                    v = r[a] - math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                    if v > best:
                        best = v
                out[i, j, k] = best


@numba.njit(cache=True)
def _covered(p0, p1, p2, z, r, local, nloc, skip0, skip1, skip2, tol):
    for t in range(nloc):
        a = local[t]
        if a == skip0 or a == skip1 or a == skip2:
            continue
        d0 = p0 - z[a, 0]
        d1 = p1 - z[a, 1]
        d2 = p2 - z[a, 2]
        if math.sqrt(d0 * d0 + d1 * d1 + d2 * d2) < r[a] * (1.0 - tol):
            return True
    return False


@numba.njit(cache=True)
def _sas_point(x0, x1, x2, z, r, local, nloc, vert, vlocal, nvl, tol, cap):
    # Distance from an interior point to the boundary of the union of the
    # local balls, capped at ``cap``.
    best = cap
    for t in range(nloc):
        a = local[t]
        d0 = x0 - z[a, 0]
        d1 = x1 - z[a, 1]
        d2 = x2 - z[a, 2]
        rho = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        dist = abs(r[a] - rho)
        if dist >= best or rho == 0.0:
            continue
        s = r[a] / rho
        if not _covered(z[a, 0] + s * d0, z[a, 1] + s * d1, z[a, 2] + s * d2, z, r, local, nloc,
                        a, -1, -1, tol):
            best = dist
    for t in range(nloc):
        a = local[t]
        for u in range(t + 1, nloc):
            b = local[u]
            e0 = z[b, 0] - z[a, 0]
            e1 = z[b, 1] - z[a, 1]
            e2 = z[b, 2] - z[a, 2]
            L = math.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
            if L >= r[a] + r[b] or L <= abs(r[a] - r[b]):
                continue
            e0 /= L
            e1 /= L
            e2 /= L
            s = 0.5 * (L + (r[a] * r[a] - r[b] * r[b]) / L)
            rad = math.sqrt(max(r[a] * r[a] - s * s, 0.0))
            c0 = z[a, 0] + s * e0
            c1 = z[a, 1] + s * e1
            c2 = z[a, 2] + s * e2
            w0 = x0 - c0
            w1 = x1 - c1
            w2 = x2 - c2
            ax = w0 * e0 + w1 * e1 + w2 * e2
            p0 = w0 - ax * e0
            p1 = w1 - ax * e1
            p2 = w2 - ax * e2
            pn = math.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
            if pn == 0.0:
                # On the axis every circle point is equally near; any
                # uncovered one is found through the vertices.
                continue
            q0 = c0 + rad * p0 / pn
            q1 = c1 + rad * p1 / pn
            q2 = c2 + rad * p2 / pn
            dist = math.sqrt((x0 - q0) ** 2 + (x1 - q1) ** 2 + (x2 - q2) ** 2)
            if dist >= best:
                continue
            if not _covered(q0, q1, q2, z, r, local, nloc, a, b, -1, tol):
                best = dist
    for t in range(nvl):
        v = vlocal[t]
        dist = math.sqrt((x0 - vert[v, 0]) ** 2 + (x1 - vert[v, 1]) ** 2 + (x2 - vert[v, 2]) ** 2)
        if dist < best:
            best = dist
    return best


@numba.njit(cache=True)
def _vertices(z, r, tol):
    # All uncovered intersection points of three spheres.
    n = z.shape[0]
    out = []
    allidx = np.arange(n)
    for a in range(n):
        for b in range(a + 1, n):
            dab = math.sqrt(np.sum((z[b] - z[a]) ** 2))
            if dab >= r[a] + r[b] or dab <= abs(r[a] - r[b]):
                continue
            for c in range(b + 1, n):
                dac = math.sqrt(np.sum((z[c] - z[a]) ** 2))
                dbc = math.sqrt(np.sum((z[c] - z[b]) ** 2))
                if dac >= r[a] + r[c] or dbc >= r[b] + r[c]:
                    continue
                ex = (z[b] - z[a]) / dab
                i = np.dot(ex, z[c] - z[a])
                ey = z[c] - z[a] - i * ex
                ny = math.sqrt(np.sum(ey * ey))
                if ny < 1e-12 * dab:
                    continue
                ey = ey / ny
                ez = np.cross(ex, ey)
                j = np.dot(ey, z[c] - z[a])
                px = (r[a] ** 2 - r[b] ** 2 + dab ** 2) / (2.0 * dab)
                py = (r[a] ** 2 - r[c] ** 2 + i * i + j * j) / (2.0 * j) - i * px / j
                h2 = r[a] ** 2 - px * px - py * py
                if h2 < 0.0:
                    continue
                hz = math.sqrt(h2)
                for sgn in (-1.0, 1.0):
                    p = z[a] + px * ex + py * ey + sgn * hz * ez
                    if not _covered(p[0], p[1], p[2], z, r, allidx, n, a, b, c, tol):
                        out.append((p[0], p[1], p[2]))
                    if hz == 0.0:
                        break
    res = np.empty((len(out), 3))
    for t in range(len(out)):
        res[t, 0] = out[t][0]
        res[t, 1] = out[t][1]
        res[t, 2] = out[t][2]
    return res


@numba.njit(cache=True)
def _bin(points, lo, cell, nc):
    # Cell list: ``order`` sorted by cell id, ``start`` offsets per cell.
    m = points.shape[0]
    ids = np.empty(m, dtype=np.int64)
    for t in range(m):
        c0 = min(max(int((points[t, 0] - lo[0]) / cell), 0), nc[0] - 1)
        c1 = min(max(int((points[t, 1] - lo[1]) / cell), 0), nc[1] - 1)
        c2 = min(max(int((points[t, 2] - lo[2]) / cell), 0), nc[2] - 1)
        ids[t] = (c0 * nc[1] + c1) * nc[2] + c2
    order = np.argsort(ids, kind="mergesort")
    start = np.zeros(nc[0] * nc[1] * nc[2] + 1, dtype=np.int64)
    for t in range(m):
        start[ids[t] + 1] += 1
    for t in range(start.size - 1):
        start[t + 1] += start[t]
    return order, start


@numba.njit(cache=True)
def _gather(x0, x1, x2, pts, order, start, lo, cell, nc, reach, extra, out):
    # Indices of binned points within ``reach + extra[p]`` of x.
    c0 = int((x0 - lo[0]) / cell)
    c1 = int((x1 - lo[1]) / cell)
    c2 = int((x2 - lo[2]) / cell)
    cnt = 0
    for a in range(max(c0 - 1, 0), min(c0 + 2, nc[0])):
        for b in range(max(c1 - 1, 0), min(c1 + 2, nc[1])):
            for c in range(max(c2 - 1, 0), min(c2 + 2, nc[2])):
                cid = (a * nc[1] + b) * nc[2] + c
                for t in range(start[cid], start[cid + 1]):
                    p = order[t]
                    d = math.sqrt((x0 - pts[p, 0]) ** 2 + (x1 - pts[p, 1]) ** 2
                                  + (x2 - pts[p, 2]) ** 2)
                    if d <= reach + extra[p]:
                        out[cnt] = p
                        cnt += 1
    return cnt


@numba.njit(parallel=True, cache=True)
def _sas_nodes(points, z, r, vert, reach, tol, lo, cell, nc):
    m = points.shape[0]
    a_order, a_start = _bin(z, lo, cell, nc)
    v_order, v_start = _bin(vert, lo, cell, nc)
    zero_v = np.zeros(vert.shape[0])
    out = np.empty(m)
    for t in numba.prange(m):
        local = np.empty(z.shape[0], dtype=np.int64)
        vloc = np.empty(max(vert.shape[0], 1), dtype=np.int64)
        x0 = points[t, 0]
        x1 = points[t, 1]
        x2 = points[t, 2]
        nloc = _gather(x0, x1, x2, z, a_order, a_start, lo, cell, nc, reach, r, local)
        nvl = _gather(x0, x1, x2, vert, v_order, v_start, lo, cell, nc, reach, zero_v, vloc)
        out[t] = _sas_point(x0, x1, x2, z, r, local, nloc, vert, vloc, nvl, tol, reach)
    return out


def sas_distance(atoms: AtomSet, probe: float, points, cap: float, tol: float = 1e-10):
    """Signed distance to the solvent accessible surface.

    Exact for points outside the SAS and for interior points within ``cap``
    of the surface; deeper interior points return ``cap``.

    Parameters
    ----------
    atoms : AtomSet
    probe : float
        Inflation radius.
    points : array_like, shape (m, 3)
    cap : float
        Largest interior distance resolved.
    """
    pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
    z = atoms.centers.copy()
    R = atoms.radii + probe
    u = _union_value(pts, z, R)
    out = u.copy()
    inside = np.flatnonzero(u >= 0)
    if inside.size:
        out[inside] = _sas_inside(pts[inside], z, R, cap, tol)
    return out


def _sas_inside(pts, z, R, cap, tol):
    vert = _vertices(z, R, tol)
    cell = float(R.max() + cap)
    lo = np.minimum(z.min(axis=0), pts.min(axis=0)) - cell
    hi = np.maximum(z.max(axis=0), pts.max(axis=0)) + cell
    nc = np.maximum(np.ceil((hi - lo) / cell).astype(np.int64), 1)
    return _sas_nodes(np.ascontiguousarray(pts), z, R, vert if vert.size else np.zeros((0, 3)),
                      float(cap), float(tol), lo, cell, nc)


# ---------------------------------------------------------------------------
# Cavities and fast marching
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _flood_outside(outside):
    n0, n1, n2 = outside.shape
    seen = np.zeros(outside.shape, dtype=np.bool_)
    queue = np.empty((outside.size, 3), dtype=np.int64)
    head = 0
    tail = 0
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                if (i == 0 or j == 0 or k == 0 or i == n0 - 1 or j == n1 - 1
                        or k == n2 - 1) and outside[i, j, k]:
                    seen[i, j, k] = True
                    queue[tail, 0] = i
                    queue[tail, 1] = j
                    queue[tail, 2] = k
                    tail += 1
    while head < tail:
        i = queue[head, 0]
        j = queue[head, 1]
        k = queue[head, 2]
        head += 1
        for dd in range(6):
            a = i
            b = j
            c = k
            if dd == 0:
                a -= 1
            elif dd == 1:
                a += 1
            elif dd == 2:
                b -= 1
            elif dd == 3:
                b += 1
            elif dd == 4:
                c -= 1
            else:
                c += 1
            if a < 0 or b < 0 or c < 0 or a >= n0 or b >= n1 or c >= n2:
                continue
            if outside[a, b, c] and not seen[a, b, c]:
                seen[a, b, c] = True
                queue[tail, 0] = a
                queue[tail, 1] = b
                queue[tail, 2] = c
                tail += 1
    return seen


def remove_cavities(inside) -> np.ndarray:
    """Fill enclosed outside regions of a boolean inside indicator.

    Outside nodes not 6-connected to the box boundary through outside nodes
    are flipped to inside.

    Parameters
    ----------
    inside : ndarray of bool, shape (n0, n1, n2)

    Returns
    -------
    ndarray of bool
    """
    inside = np.asarray(inside, dtype=bool)
    if inside.ndim != 3:
        raise SurfaceGenError("the indicator must be a 3D array")
    reached = _flood_outside(np.ascontiguousarray(~inside))
    return ~reached


@numba.njit(inline="always")
def _heap_push(hv, hi, n, v, idx):
    t = n
    hv[t] = v
    hi[t] = idx
    while t > 0:
        p = (t - 1) >> 1
        if hv[p] <= hv[t]:
            break
        hv[p], hv[t] = hv[t], hv[p]
        hi[p], hi[t] = hi[t], hi[p]
        t = p
    return n + 1


@numba.njit(inline="always")
def _heap_pop(hv, hi, n):
    v = hv[0]
    idx = hi[0]
    n -= 1
    hv[0] = hv[n]
    hi[0] = hi[n]
    t = 0
    while True:
        c = 2 * t + 1
        if c >= n:
            break
        if c + 1 < n and hv[c + 1] < hv[c]:
            c += 1
        if hv[t] <= hv[c]:
            break
        hv[c], hv[t] = hv[t], hv[c]
        hi[c], hi[t] = hi[t], hi[c]
        t = c
    return v, idx, n


@numba.njit(cache=True)
def _fmm(T, frozen, sign, h):
    # First-order fast marching for |grad T| = 1 from the frozen nodes.
    # Updates only use neighbours of the same sign.
    n0, n1, n2 = T.shape
    size = T.size
    state = np.zeros(size, dtype=np.int8)  # 0 far, 1 trial, 2 accepted
    Tf = T.ravel()
    sf = sign.ravel()
    hv = np.empty(7 * size + 1)
    hi = np.empty(7 * size + 1, dtype=np.int64)
    n = 0
    ff = frozen.ravel()
    for p in range(size):
        if ff[p]:
            state[p] = 2
        else:
            Tf[p] = np.inf
    s12 = n1 * n2
    for p in range(size):
        if state[p] != 2:
            continue
        i = p // s12
        j = (p // n2) % n1
        k = p % n2
        for dd in range(6):
            q, ok = _nbr(i, j, k, dd, n0, n1, n2)
            if ok and state[q] == 0 and sf[q] == sf[p]:
                state[q] = 1
                Tf[q] = _update(Tf, state, sf, q, n0, n1, n2, h)
                n = _heap_push(hv, hi, n, Tf[q], q)
    while n > 0:
        v, p, n = _heap_pop(hv, hi, n)
        if state[p] == 2 or v > Tf[p]:
            continue
        state[p] = 2
        i = p // s12
        j = (p // n2) % n1
        k = p % n2
        for dd in range(6):
            q, ok = _nbr(i, j, k, dd, n0, n1, n2)
            if not ok or state[q] == 2 or sf[q] != sf[p]:
                continue
            t = _update(Tf, state, sf, q, n0, n1, n2, h)
            if t < Tf[q]:
                Tf[q] = t
                state[q] = 1
                n = _heap_push(hv, hi, n, t, q)
    return Tf.reshape(T.shape)


@numba.njit(inline="always")
def _nbr(i, j, k, dd, n0, n1, n2):
    a = i
    b = j
    c = k
    if dd == 0:
        a -= 1
    elif dd == 1:
        a += 1
    elif dd == 2:
        b -= 1
    elif dd == 3:
        b += 1
    elif dd == 4:
        c -= 1
    else:
        c += 1
    ok = a >= 0 and b >= 0 and c >= 0 and a < n0 and b < n1 and c < n2
    return (a * n1 + b) * n2 + c, ok


@numba.njit(cache=True)
def _update(Tf, state, sf, q, n0, n1, n2, h):
    i = q // (n1 * n2)
    j = (q // n2) % n1
    k = q % n2
    vals = np.empty(3)
    for ax in range(3):
        best = np.inf
        for side in range(2):
            nb, ok = _nbr(i, j, k, 2 * ax + side, n0, n1, n2)
            if ok and state[nb] == 2 and sf[nb] == sf[q] and Tf[nb] < best:
                best = Tf[nb]
        vals[ax] = best
    vals.sort()
    # Solve with the smallest 1, 2 or 3 neighbour values.
    t = vals[0] + h
    if t > vals[1]:
        a = vals[0]
        b = vals[1]
        t = 0.5 * (a + b + math.sqrt(max(2.0 * h * h - (a - b) ** 2, 0.0)))
        if t > vals[2]:
            s = vals[0] + vals[1] + vals[2]
            s2 = vals[0] ** 2 + vals[1] ** 2 + vals[2] ** 2
            disc = s * s - 3.0 * (s2 - h * h)
            t = (s + math.sqrt(max(disc, 0.0))) / 3.0
    return t


def fast_marching(values, frozen, h: float) -> np.ndarray:
    """Redistance ``values`` away from the ``frozen`` nodes.

    Frozen nodes keep their values.  Every other node receives the
    first-order fast marching solution of ``|grad d| = 1`` with the sign of
    its input value, marching separately inside (``d > 0``) and outside.

    Parameters
    ----------
    values : ndarray, shape (n0, n1, n2)
    frozen : ndarray of bool, same shape
    h : float
    """
    values = np.asarray(values, dtype=float)
    frozen = np.asarray(frozen, dtype=bool)
    if values.shape != frozen.shape or values.ndim != 3:
        raise SurfaceGenError("values and frozen mask must be matching 3D arrays")
    if not np.any(frozen):
        raise SurfaceGenError("fast marching needs at least one frozen node")
    sign = np.where(values > 0, 1, -1).astype(np.int8)
    T = np.ascontiguousarray(np.abs(values))
    out = _fmm(T, np.ascontiguousarray(frozen), np.ascontiguousarray(sign), float(h))
    # Regions with no frozen node of their sign stay unreached.
    out = np.where(np.isfinite(out), out, np.nanmax(np.where(np.isfinite(out), out, np.nan)) + h)
    return sign * out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SesResult:
    """Generated surface and pipeline diagnostics.

    Attributes
    ----------
    field : SampledField
        Signed distance to the SES on the configured grid.
    n_cavity : int
        Nodes moved inside by cavity removal.
    n_exact : int
        Nodes whose distance is exact (frozen during redistancing).
    """

    field: SampledField
    n_cavity: int
    n_exact: int
    config: SesConfig = field(repr=False)


def generate_ses(atoms: AtomSet, config: SesConfig) -> SesResult:
    """Sample the signed distance to the solvent excluded surface.

    Raises
    ------
    SurfaceGenError
        Probe below ``2 h`` or an inflated atom leaving the box.
    """
    grid = config.grid
    h = grid.h
    rp = config.probe
    R = atoms.radii + rp
    inflated_lo = atoms.centers - (R + 3 * h)[:, None]
    inflated_hi = atoms.centers + (R + 3 * h)[:, None]
    if np.any(inflated_lo < np.asarray(grid.origin)) or np.any(inflated_hi > grid.upper):
        raise SurfaceGenError("the grid box does not contain all atoms inflated by r + r_p + 3 h")
    w = config.band * h
    # (1) inflated union value, exact outside the SAS.
    u = np.empty(grid.dims)
    _union_on_grid(np.asarray(grid.origin), h, grid.dims, atoms.centers.copy(), R, u)
    # (2) exact SAS distance in the interior shell that can reach the band.
    cap = rp + w + h
    shell = (u >= 0) & (u <= rp + w)
    idx = np.argwhere(shell)
    dsas = u.copy()
    if idx.size:
        dsas[shell] = _sas_inside(grid.points(idx), atoms.centers.copy(), R, cap, config.tol)
    dsas[u > rp + w] = np.maximum(u[u > rp + w], cap)
    # (3) erosion by the probe radius.
    d = dsas - rp
    exact = np.abs(d) <= w
    exact &= (dsas < cap) | (u < 0)
    # (4) cavities.
    inside = d > 0
    filled = remove_cavities(inside)
    flipped = filled & ~inside
    n_cav = int(np.count_nonzero(flipped))
    if n_cav:
        near = distance_transform_edt(~flipped) * h <= w + h
        exact &= ~near
        d = np.where(flipped, np.abs(d) + h, d)
    if not np.any(exact):
        raise SurfaceGenError("the surface is not resolved on this grid")
    # (5) redistance away from the exact band.
    d = fast_marching(d, exact, h)
    return SesResult(SampledField(grid, d), n_cav, int(np.count_nonzero(exact)), config)
