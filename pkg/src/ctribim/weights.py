"""Correction weights of the second-order corrected trapezoidal rule.

For a singular integrand ``s(u) v(u)`` on a plane, with ``s`` homogeneous of
degree ``q - 1`` about the point ``u0 = u_h + h (alpha, beta)``, the
punctured lattice sum (the node ``u_h`` omitted) is corrected by
``h**(q+1) * omega[s; alpha, beta] * v(u_h)``.  The weight is the limit
``h -> 0`` of::

    omega_h = (int s g - T_h^0[s(. - (alpha, beta) h) g(. - (alpha, beta) h)])
              / (h**(q+1) g((alpha, beta) h))

for a radial bump ``g`` with ``g(0) = 1``.  Singular functions of the form
``|y|**-1 l(y/|y|)`` are handled by expanding ``l`` in a Fourier series and
combining the weights of the families ``|y|**-1``, ``|y|**-1 cos(k psi)``
and ``|y|**-1 sin(k psi)``; the constant family ``1`` serves the ``q = 1``
term.  Family weights are tabulated on a shift grid and interpolated with a
tensor-product Lagrange basis (six points per axis by default).
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numba
import numpy as np

__all__ = [
    "DEFAULT_N",
    "DEFAULT_P",
    "DEFAULT_TOL",
    "DEFAULT_STENCIL",
    "WeightError",
    "Bump",
    "DEFAULT_BUMP",
    "Family",
    "reference_integral",
    "lattice_sums",
    "omega_finite",
    "omega_limit",
    "WeightTable",
    "build_table",
    "load_table",
    "cached_table",
    "cache_path",
    "default_cache_dir",
    "fourier_modes",
    "family_coefficients",
    "weight_for",
    "check_shift",
]

DEFAULT_N = 32
DEFAULT_P = 33
DEFAULT_TOL = 1e-8
#: Finest level of the limit, ``h* >= 2**-MAX_LEVEL``.
MAX_LEVEL = 12
#: Points per axis of the shift-grid interpolant.
DEFAULT_STENCIL = 6


class WeightError(RuntimeError):
    """Failure to compute, load or apply correction weights."""

    def __init__(self, message, increment=None, family=None, shift=None):
        super().__init__(message)
        self.increment = increment
        self.family = family
        self.shift = shift


@dataclass(frozen=True)
class Bump:
    """Radial cutoff ``g(r) = exp(1 - 1/(1 - (r/R)**p))`` for ``r < R``.

    ``g(0) = 1`` and ``g`` is smooth with compact support.  The exponent
    ``p`` controls flatness at the origin: ``g - 1 = O(r**p)``.

    Parameters
    ----------
    radius : float
        Support radius ``R``.
    power : int
        Even exponent ``p``.
    """

    radius: float = 4.0
    power: int = 8

    def __post_init__(self):
        if not self.radius > 0 or self.power < 2 or self.power % 2:
            raise WeightError("bump needs a positive radius and an even power >= 2")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        t = (r / self.radius) ** self.power
        with np.errstate(divide="ignore", over="ignore"):
            val = np.where(t < 1.0, np.exp(1.0 - 1.0 / np.maximum(1.0 - t, 1e-300)), 0.0)
        return val if val.ndim else float(val)


DEFAULT_BUMP = Bump()


@dataclass(frozen=True)
class Family:
    """Singular function family.

    Parameters
    ----------
    kind : {'inv', 'cos', 'sin', 'one'}
        ``|y|**-1``, ``|y|**-1 cos(k psi)``, ``|y|**-1 sin(k psi)`` or the
        constant ``1`` (``q = 1``).
    k : int
        Angular frequency for the trigonometric families.
    """

    kind: str
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("inv", "cos", "sin", "one"):
            raise WeightError(f"unknown family {self.kind!r}")
        if self.kind in ("cos", "sin") and self.k < 1:
            raise WeightError("trigonometric families need k >= 1")

    @property
    def q(self) -> int:
        return 1 if self.kind == "one" else 0

    def angular(self, theta):
        """Angular factor ``l(theta)``."""
        theta = np.asarray(theta, dtype=float)
        if self.kind == "cos":
            return np.cos(self.k * theta)
        if self.kind == "sin":
            return np.sin(self.k * theta)
        return np.ones_like(theta)


def _gauss_legendre_radial(fun, R, panels=16, order=32):
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, R, panels + 1)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        r = 0.5 * (b - a) * x + 0.5 * (a + b)
        total += 0.5 * (b - a) * np.sum(w * fun(r))
    return total


def reference_integral(family: Family, bump: Bump = DEFAULT_BUMP, n_theta: int = 256) -> float:
    """``int_{R^2} s g`` in polar coordinates.

    In polar coordinates ``s g dA = r**q l(theta) g(r) dr dtheta`` is smooth,
    so a trapezoidal rule in ``theta`` and composite Gauss-Legendre in ``r``
    reach round-off accuracy.
    """
    th = 2.0 * np.pi * np.arange(n_theta) / n_theta
    ang = 2.0 * np.pi * np.mean(family.angular(th))
    q = family.q
    rad = _gauss_legendre_radial(lambda r: r**q * bump(r), bump.radius)
    return float(ang * rad)


@numba.njit(cache=True)
def _lattice_sums(alpha, beta, h, R, power, N):
    # Punctured lattice sums over h*Z^2 of g(|y|) times 1/|y|, cos/sin(k psi)/|y|
    # and 1, with y = x - (alpha, beta) h.  Row partial sums limit round-off.
    s_inv = 0.0
    s_one = 0.0
    c_tot = np.zeros(N)
    s_tot = np.zeros(N)
    c_row = np.zeros(N)
    s_row = np.zeros(N)
    R2 = R * R
    n = int(R / h) + 2
    for i in range(-n, n + 1):
        y1 = h * (i - alpha)
        if y1 * y1 >= R2:
            continue
        inv_row = 0.0
        one_row = 0.0
        for k in range(N):
            c_row[k] = 0.0
            s_row[k] = 0.0
        for j in range(-n, n + 1):
            if i == 0 and j == 0:
                continue
            y2 = h * (j - beta)
            r2 = y1 * y1 + y2 * y2
            if r2 >= R2:
                continue
            t = (r2 / R2) ** (power // 2)
            g = np.exp(1.0 - 1.0 / (1.0 - t))
            r = np.sqrt(r2)
            one_row += g
            b = g / r
            inv_row += b
            c1 = y1 / r
            s1 = y2 / r
            ck = c1
            sk = s1
            for k in range(N):
                c_row[k] += b * ck
                s_row[k] += b * sk
                tmp = ck * c1 - sk * s1
                sk = sk * c1 + ck * s1
                ck = tmp
        s_inv += inv_row
        s_one += one_row
        for k in range(N):
            c_tot[k] += c_row[k]
            s_tot[k] += s_row[k]
    return s_inv, c_tot, s_tot, s_one


def lattice_sums(alpha: float, beta: float, h: float, N: int, bump: Bump = DEFAULT_BUMP):
    """Punctured lattice sums ``T_h^0`` (without the ``h**2`` factor) for all families.

    Returns
    -------
    inv : float
    cos, sin : ndarray, shape (N,)
    one : float
    """
    return _lattice_sums(float(alpha), float(beta), float(h), float(bump.radius),
                         int(bump.power), int(N))


def check_shift(alpha, beta):
    """Validate shifts in ``[-1/2, 1/2)``."""
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    if np.any(~((a >= -0.5) & (a < 0.5))) or np.any(~((b >= -0.5) & (b < 0.5))):
        raise WeightError("shift parameters must lie in [-1/2, 1/2)")


class _RefCache:
    def __init__(self, bump):
        self.bump = bump
        self.inv = reference_integral(Family("inv"), bump)
        self.one = reference_integral(Family("one"), bump)


_REF = {}


def _refs(bump):
    if bump not in _REF:
        _REF[bump] = _RefCache(bump)
    return _REF[bump]


def _omega_all(alpha, beta, h, N, bump):
    # All family weights at one level; trigonometric reference integrals are 0.
    refs = _refs(bump)
    s_inv, s_cos, s_sin, s_one = lattice_sums(alpha, beta, h, max(N, 1), bump)
    g0 = bump(h * np.hypot(alpha, beta))
    w_inv = (refs.inv - h * h * s_inv) / (h * g0)
    w_cos = (0.0 - h * h * s_cos[:N]) / (h * g0)
    w_sin = (0.0 - h * h * s_sin[:N]) / (h * g0)
    w_one = (refs.one - h * h * s_one) / (h * h * g0)
    return w_inv, w_cos, w_sin, w_one


def omega_finite(family: Family, alpha: float, beta: float, h: float,
                 bump: Bump = DEFAULT_BUMP) -> float:
    """Finite-``h`` weight ``omega_h[s; alpha, beta]``.

    Parameters
    ----------
    family : Family
    alpha, beta : float
        Shifts (any real values are accepted here).
    h : float
        Lattice spacing.
    bump : Bump
    """
    N = family.k if family.kind in ("cos", "sin") else 1
    w_inv, w_cos, w_sin, w_one = _omega_all(alpha, beta, h, N, bump)
    if family.kind == "inv":
        return float(w_inv)
    if family.kind == "one":
        return float(w_one)
    if family.kind == "cos":
        return float(w_cos[family.k - 1])
    return float(w_sin[family.k - 1])


def omega_limit(family: Family, alpha: float, beta: float, tol: float = DEFAULT_TOL,
                bump: Bump = DEFAULT_BUMP, max_level: int = MAX_LEVEL) -> float:
    """Limit ``omega[s; alpha, beta]`` by dyadic refinement.

    Returns ``omega_{2^-n}`` for the first ``n`` with
    ``|omega_{2^-n} - omega_{2^-(n+1)}| <= tol``.

    Raises
    ------
    WeightError
        If no ``n <= max_level`` satisfies the criterion; carries the last
        increment.
    """
    if not tol > 0:
        raise WeightError("tolerance must be positive")
    prev = omega_finite(family, alpha, beta, 0.5, bump)
    inc = np.inf
    for j in range(2, max_level + 2):
        cur = omega_finite(family, alpha, beta, 2.0**-j, bump)
        inc = abs(cur - prev)
        if inc <= tol:
            return prev
        prev = cur
    raise WeightError(f"weight limit not reached by level {max_level} (last increment {inc:.3e})",
                      increment=inc, family=family, shift=(alpha, beta))


def _limit_all(alpha, beta, N, tol, bump, max_level):
    # Simultaneous limit for every family at one shift.
    F = 2 * N + 2
    prev = None
    result = np.full(F, np.nan)
    done = np.zeros(F, dtype=bool)
    inc = np.full(F, np.inf)
    for j in range(1, max_level + 2):
        w_inv, w_cos, w_sin, w_one = _omega_all(alpha, beta, 2.0**-j, N, bump)
        cur = np.concatenate([[w_inv], w_cos, w_sin, [w_one]])
        if prev is not None:
            inc = np.where(done, inc, np.abs(cur - prev))
            newly = ~done & (inc <= tol)
            result[newly] = prev[newly]
            done |= newly
            if done.all():
                return result
        prev = cur
    bad = int(np.flatnonzero(~done)[0])
    raise WeightError(f"weight limit not reached by level {max_level} for family index {bad} "
                      f"at shift ({alpha:g}, {beta:g}); last increment {inc[bad]:.3e}",
                      increment=float(inc[bad]), family=bad, shift=(alpha, beta))


# ---------------------------------------------------------------------------
# Table
# ---------------------------------------------------------------------------

_MAGIC = "CTRW1"


@dataclass(frozen=True)
class WeightTable:
    """Tabulated family weights on a ``P x P`` shift grid over ``[-1/2, 1/2]**2``.

    Attributes
    ----------
    N : int
        Number of Fourier modes.
    P : int
        Shift-grid points per axis.
    tol : float
        Limit tolerance used to build the table.
    values : ndarray, shape (2N + 2, P, P)
        Families in the order ``inv, cos_1..cos_N, sin_1..sin_N, one``;
        entry ``[f, m, n]`` belongs to shift ``(alpha_m, beta_n)``.
    stencil : int, optional
        Points per axis of the tensor Lagrange interpolant: 6 (quintic) or 4
        (bicubic).  Defaults to 6, or 4 on grids with ``P < 6``.  The stencil
        is not part of the cache file.
    """

    N: int
    P: int
    tol: float
    values: np.ndarray
    stencil: Optional[int] = None

    def __post_init__(self):
        if self.stencil is None:
            object.__setattr__(self, "stencil", DEFAULT_STENCIL if self.P >= DEFAULT_STENCIL else 4)
        if self.stencil not in (4, 6):
            raise WeightError("interpolation stencil must have 4 or 6 points")
        if self.P < self.stencil:
            raise WeightError(f"a {self.stencil}-point stencil needs P >= {self.stencil}")

    @property
    def shifts(self) -> np.ndarray:
        return np.linspace(-0.5, 0.5, self.P)

    def family_index(self, family: Family) -> int:
        if family.kind == "inv":
            return 0
        if family.kind == "cos":
            return family.k
        if family.kind == "sin":
            return self.N + family.k
        return 2 * self.N + 1

    def family(self, family: Family) -> np.ndarray:
        """``P x P`` block of one family."""
        if family.kind in ("cos", "sin") and family.k > self.N:
            raise WeightError(f"table holds modes up to {self.N}")
        return self.values[self.family_index(family)]

    def basis(self, alpha, beta):
        """Stencil offsets and Lagrange weights for shifts.

        Returns
        -------
        ia, ib : ndarray of int, shape (m,)
            First stencil index along each axis.
        wa, wb : ndarray, shape (m, stencil)
        """
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        check_shift(alpha, beta)
        ia, wa = _lagrange_stencil(alpha, self.P, self.stencil)
        ib, wb = _lagrange_stencil(beta, self.P, self.stencil)
        return ia, ib, wa, wb

    def interpolate(self, coeffs, alpha, beta, chunk: int = 20000):
        """Interpolated weight ``sum_f coeffs[:, f] * omega_f(alpha, beta)``.

        Parameters
        ----------
        coeffs : ndarray, shape (m, 2N + 2)
            Family coefficients per query.
        alpha, beta : ndarray, shape (m,)
        """
        coeffs = np.atleast_2d(coeffs)
        ia, ib, wa, wb = self.basis(alpha, beta)
        out = np.empty(coeffs.shape[0])
        off = np.arange(self.stencil)
        for s in range(0, coeffs.shape[0], chunk):
            e = min(s + chunk, coeffs.shape[0])
            rows = ia[s:e, None, None] + off[None, :, None]
            cols = ib[s:e, None, None] + off[None, None, :]
            # (m, F, k, k) gathered stencil values
            sten = self.values[:, rows, cols].transpose(1, 0, 2, 3)
            comb = np.einsum("mf,mfab->mab", coeffs[s:e], sten)
            out[s:e] = np.einsum("mab,ma,mb->m", comb, wa[s:e], wb[s:e])
        return out

    def family_values(self, alpha, beta, chunk: int = 20000):
        """Every family interpolated to each shift.

        Returns
        -------
        ndarray, shape (m, 2N + 2)
        """
        ia, ib, wa, wb = self.basis(alpha, beta)
        out = np.empty((ia.size, self.values.shape[0]))
        off = np.arange(self.stencil)
        for s in range(0, ia.size, chunk):
            e = min(s + chunk, ia.size)
            rows = ia[s:e, None, None] + off[None, :, None]
            cols = ib[s:e, None, None] + off[None, None, :]
            sten = self.values[:, rows, cols]  # (F, m, k, k)
            out[s:e] = np.einsum("fmab,ma,mb->mf", sten, wa[s:e], wb[s:e])
        return out

    def value(self, family: Family, alpha, beta):
        """Interpolated weight of a single family."""
        alpha = np.atleast_1d(alpha)
        c = np.zeros((alpha.size, self.values.shape[0]))
        c[:, self.family_index(family)] = 1.0
        out = self.interpolate(c, alpha, np.atleast_1d(beta))
        return out if out.size > 1 else float(out[0])

    def save(self, path) -> None:
        """Write the binary cache file (header line then float64 LE blocks)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(f"{_MAGIC} {self.N} {self.P} {self.tol!r}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        os.replace(tmp, path)


def _lagrange_stencil(x, P, k=4):
    # k consecutive nodes centred on the interval holding x, shifted inwards
    # at the ends of the grid.
    f = (x + 0.5) * (P - 1)
    i0 = np.clip(np.floor(f).astype(np.int64) - (k // 2 - 1), 0, P - k)
    t = f - i0  # position relative to stencil nodes 0..k-1
    w = np.empty((x.size, k))
    nodes = np.arange(float(k))
    for a in range(k):
        num = np.ones_like(t)
        den = 1.0
        for b in range(k):
            if b != a:
                num = num * (t - nodes[b])
                den *= nodes[a] - nodes[b]
        w[:, a] = num / den
    return i0, w


def build_table(N: int = DEFAULT_N, P: int = DEFAULT_P, tol: float = DEFAULT_TOL,
                bump: Bump = DEFAULT_BUMP, max_level: int = MAX_LEVEL, progress=None) -> WeightTable:
    """Tabulate all families on the ``P x P`` shift grid.

    Parameters
    ----------
    N : int
        Fourier modes (at least 1).
    P : int
        Shift-grid points per axis (at least 4).
    tol : float
        Limit tolerance.
    progress : callable, optional
        Called with the fraction of completed rows.

    Raises
    ------
    WeightError
        Carrying the offending family and shift if a limit fails.
    """
    if N < 1 or P < 4:
        raise WeightError("build_table needs N >= 1 and P >= 4")
    shifts = np.linspace(-0.5, 0.5, P)
    vals = np.empty((2 * N + 2, P, P))
    for m, a in enumerate(shifts):
        for n, b in enumerate(shifts):
            vals[:, m, n] = _limit_all(a, b, N, tol, bump, max_level)
        if progress is not None:
            progress((m + 1) / P)
    vals.setflags(write=False)
    return WeightTable(int(N), int(P), float(tol), vals)


def load_table(path) -> WeightTable:
    """Load and validate a cache file."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        body = fh.read()
    if len(header) != 4 or header[0] != _MAGIC:
        raise WeightError(f"{path}: not a weight table (bad header)")
    try:
        N, P, tol = int(header[1]), int(header[2]), float(header[3])
    except ValueError:
        raise WeightError(f"{path}: malformed weight table header") from None
    F = 2 * N + 2
    if len(body) != 8 * F * P * P:
        raise WeightError(f"{path}: expected {F * P * P} values, found {len(body) // 8}")
    vals = np.frombuffer(body, dtype="<f8").reshape(F, P, P).astype(float)
    if not np.all(np.isfinite(vals)):
        raise WeightError(f"{path}: table contains non-finite values")
    vals.setflags(write=False)
    return WeightTable(N, P, tol, vals)


def default_cache_dir() -> Path:
    env = os.environ.get("CTRIBIM_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "ctribim"


def cache_path(N: int, P: int, tol: float, cache_dir=None) -> Path:
    d = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    return d / f"ctrw1_N{N}_P{P}_tol{tol:.0e}.bin"


def cached_table(N: int = DEFAULT_N, P: int = DEFAULT_P, tol: float = DEFAULT_TOL,
                 cache_dir=None, path=None, progress=None) -> WeightTable:
    """Load the table keyed by ``(N, P, tol)``, building and saving it on first use."""
    p = Path(path) if path is not None else cache_path(N, P, tol, cache_dir)
    if p.exists():
        t = load_table(p)
        if (t.N, t.P, t.tol) != (N, P, float(tol)):
            raise WeightError(f"{p}: table key {(t.N, t.P, t.tol)} does not match {(N, P, tol)}")
        return t
    t = build_table(N, P, tol, progress=progress)
    t.save(p)
    return t


# ---------------------------------------------------------------------------
# Fourier assembly
# ---------------------------------------------------------------------------


def fourier_modes(samples, N: int):
    """Fourier coefficients of real samples on uniform angles.

    ``l(theta) ~ a0 + sum_k a_k cos(k theta) + b_k sin(k theta)``.

    Parameters
    ----------
    samples : ndarray, shape (..., L)
        Values at ``theta_l = 2 pi l / L`` with ``L >= 2N + 2``.

    Returns
    -------
    a0 : ndarray, shape (...)
    a, b : ndarray, shape (..., N)
    """
    samples = np.asarray(samples, dtype=float)
    L = samples.shape[-1]
    if L < 2 * N + 2:
        raise WeightError(f"need at least {2 * N + 2} angular samples, got {L}")
    c = np.fft.rfft(samples, axis=-1)
    a0 = c[..., 0].real / L
    a = 2.0 * c[..., 1:N + 1].real / L
    b = -2.0 * c[..., 1:N + 1].imag / L
    return a0, a, b


def family_coefficients(samples, N: int):
    """Coefficient vectors over the table families (``one`` set to 0)."""
    a0, a, b = fourier_modes(samples, N)
    out = np.zeros(a0.shape + (2 * N + 2,))
    out[..., 0] = a0
    out[..., 1:N + 1] = a
    out[..., N + 1:2 * N + 1] = b
    return out


def weight_for(samples, alpha, beta, table: WeightTable) -> float:
    """Correction weight for ``|y|**-1 l(y/|y|)`` with ``l`` given by samples.

    Parameters
    ----------
    samples : array_like, shape (L,)
        ``l`` on ``L = 2**m >= 2N + 2`` uniform angles.
    alpha, beta : float
        Shifts in ``[-1/2, 1/2)``.
    table : WeightTable
    """
    samples = np.asarray(samples, dtype=float)
    L = samples.shape[-1]
    if L & (L - 1):
        raise WeightError("number of angular samples must be a power of two")
    coeffs = family_coefficients(samples, table.N)
    return float(table.interpolate(coeffs[None], np.atleast_1d(alpha), np.atleast_1d(beta))[0])
