"""Fundamental solutions, Poisson-Boltzmann kernels and expansion terms.

Kernels of the coupled boundary integral system::

    K11 = dG0/dn_y - (eps_E/eps_I) dGk/dn_y       K12 = G0 - Gk
    K21 = d2(G0 - Gk)/dn_x dn_y                   K22 = dG0/dn_x - (eps_I/eps_E) dGk/dn_x

with ``G0 = 1/(4 pi r)`` and ``Gk = exp(-kappa r)/(4 pi r)``.  ``K12`` and
``K21`` are differences of nearly equal quantities when ``kappa r`` is small;
both are evaluated through the functions ``chi``, ``phi`` and ``psi`` below,
which switch to truncated Taylor series under :data:`SERIES_THRESHOLD`.

All functions accept broadcastable arrays with points along the last axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KernelParams",
    "ExpansionContext",
    "KernelError",
    "SERIES_THRESHOLD",
    "g0",
    "gk",
    "dg0_dn",
    "dgk_dn",
    "kij",
    "kij_restricted",
    "kreg_constant",
    "kreg_kernel",
    "tangential_distance",
    "s0",
    "s1_12",
    "s0_samples",
]

#: Below this value of ``kappa * r`` the cancellation-prone factors use series.
SERIES_THRESHOLD = 1e-3
_NTERMS = 10
_FOUR_PI = 4.0 * np.pi


class KernelError(ValueError):
    """Invalid kernel arguments (coincident points, bad parameters)."""


@dataclass(frozen=True)
class KernelParams:
    """Dielectric constants and screening parameter.

    Parameters
    ----------
    eps_i : float
        Interior dielectric constant.
    eps_e : float
        Exterior dielectric constant.
    kappa : float
        Screening parameter (inverse length), ``kappa >= 0``.
    """

    eps_i: float = 1.0
    eps_e: float = 80.0
    kappa: float = 0.125

    def __post_init__(self):
        if not (self.eps_i > 0 and self.eps_e > 0):
            raise KernelError("dielectric constants must be positive")
        if not (self.kappa >= 0 and np.isfinite(self.kappa)):
            raise KernelError("kappa must be finite and nonnegative")

    @property
    def ratio_ei(self) -> float:
        """``eps_E / eps_I``."""
        return self.eps_e / self.eps_i

    @property
    def ratio_ie(self) -> float:
        """``eps_I / eps_E``."""
        return self.eps_i / self.eps_e

    @property
    def lambda1(self) -> float:
        return 0.5 * (1.0 + self.eps_e / self.eps_i)

    @property
    def lambda2(self) -> float:
        return 0.5 * (1.0 + self.eps_i / self.eps_e)


# ---------------------------------------------------------------------------
# Cancellation-safe radial factors
# ---------------------------------------------------------------------------


def _series(x, coeffs):
    out = np.zeros_like(x)
    for c in coeffs[::-1]:
        out = out * x + c
    return out


def _fact(n):
    return float(np.prod(np.arange(1, n + 1))) if n > 0 else 1.0


_CHI = [(-1) ** n / _fact(n + 1) for n in range(_NTERMS)]
_PHI = [(-1) ** n * (n + 1) / _fact(n + 2) for n in range(_NTERMS)]
_CREG = [(-1) ** n / _fact(n) for n in range(2, _NTERMS + 2)]
_PSI = [-((-1) ** n) * (n - 1) * (n - 3) / _fact(n) for n in range(2, _NTERMS + 2)]


def _chi(x):
    """``(1 - exp(-x)) / x``."""
    small = x < SERIES_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore"):
        big = -np.expm1(-x) / x
    return np.where(small, _series(x, _CHI), big)


def _phi(x):
    """``(1 - exp(-x)(1 + x)) / x**2``."""
    small = x < SERIES_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore"):
        big = (-np.expm1(-x) - x * np.exp(-x)) / x**2
    return np.where(small, _series(x, _PHI), big)


def _psi(x):
    """``(3 - exp(-x)(3 + 3x + x**2)) / x**2``."""
    small = x < SERIES_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore"):
        big = (-3.0 * np.expm1(-x) - np.exp(-x) * x * (3.0 + x)) / x**2
    return np.where(small, _series(x, _PSI), big)


# ---------------------------------------------------------------------------
# Fundamental solutions
# ---------------------------------------------------------------------------


def _diff(x, y):
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0):
        raise KernelError("kernel evaluated at coincident points")
    return d, r


def g0(x, y):
    """Laplace fundamental solution ``1 / (4 pi |x - y|)``."""
    _, r = _diff(x, y)
    return 1.0 / (_FOUR_PI * r)


def gk(x, y, kappa):
    """Yukawa fundamental solution ``exp(-kappa |x - y|) / (4 pi |x - y|)``."""
    _, r = _diff(x, y)
    return np.exp(-kappa * r) / (_FOUR_PI * r)


def dg0_dn(x, y, n, wrt="y"):
    """Normal derivative of ``G0`` with respect to ``x`` or ``y`` along ``n``."""
    d, r = _diff(x, y)
    dn = np.sum(d * n, axis=-1)
    sign = 1.0 if wrt == "y" else -1.0
    return sign * dn / (_FOUR_PI * r**3)


def dgk_dn(x, y, n, kappa, wrt="y"):
    """Normal derivative of ``G_kappa`` with respect to ``x`` or ``y`` along ``n``."""
    d, r = _diff(x, y)
    dn = np.sum(d * n, axis=-1)
    sign = 1.0 if wrt == "y" else -1.0
    kr = kappa * r
    return sign * np.exp(-kr) * (1.0 + kr) * dn / (_FOUR_PI * r**3)


def kij(i: int, j: int, x, n_x, y, n_y, params: KernelParams):
    """Kernel ``K_ij(x, y)`` with unit normals ``n_x`` and ``n_y``.

    Parameters
    ----------
    i, j : {1, 2}
        Kernel indices.
    x, y : array_like, shape (..., 3)
        Target and source points, ``x != y``.
    n_x, n_y : array_like, shape (..., 3)
        Outward unit normals at ``x`` and ``y``.
    params : KernelParams

    Returns
    -------
    ndarray
    """
    d, r = _diff(x, y)
    kap = params.kappa
    xk = kap * r
    if (i, j) == (1, 2):
        # (1 - e^{-x}) / (4 pi r) = kappa chi(x) / (4 pi)
        return kap * _chi(xk) / _FOUR_PI + 0.0 * r
    e1 = np.exp(-xk) * (1.0 + xk)
    if (i, j) == (1, 1):
        cm = np.sum(d * n_y, axis=-1) / r
        return cm * (1.0 - params.ratio_ei * e1) / (_FOUR_PI * r**2)
    if (i, j) == (2, 2):
        ck = np.sum(d * n_x, axis=-1) / r
        return -ck * (1.0 - params.ratio_ie * e1) / (_FOUR_PI * r**2)
    if (i, j) == (2, 1):
        ck = np.sum(d * n_x, axis=-1) / r
        cm = np.sum(d * n_y, axis=-1) / r
        nn = np.sum(np.asarray(n_x) * np.asarray(n_y), axis=-1)
        return kap**2 * (nn * _phi(xk) - ck * cm * _psi(xk)) / (_FOUR_PI * r)
    raise KernelError(f"unknown kernel index ({i}, {j})")


def kij_restricted(i: int, j: int, x, n_x, tube, m, params: KernelParams):
    """Restricted kernel ``K_ij(x, P y_m)`` for tube node(s) ``m``.

    Uses the projected point and its normal, so the value is constant along
    the normal line through ``P y_m``.
    """
    return kij(i, j, x, n_x, tube.proj[m], tube.normal[m], params)


def kreg_constant(i: int, j: int, tau: float, params: KernelParams) -> float:
    """Constant replacing ``K_ij`` inside the regularization radius ``tau``.

    Zero for (1,1), (2,2) and (2,1); for (1,2) the average
    ``(exp(-kappa tau) - 1 + kappa tau) / (2 pi kappa tau**2)``, which is 0
    when ``kappa = 0``.
    """
    if not tau > 0:
        raise KernelError("regularization radius must be positive")
    if (i, j) != (1, 2):
        if (i, j) not in ((1, 1), (2, 1), (2, 2)):
            raise KernelError(f"unknown kernel index ({i}, {j})")
        return 0.0
    kap = params.kappa
    if kap == 0.0:
        return 0.0
    x = np.array(kap * tau)
    if x < SERIES_THRESHOLD:
        val = float(_series(x, _CREG))
    else:
        val = float((np.expm1(-x) + x) / x**2)
    return kap * val / (2.0 * np.pi)


def tangential_distance(x, n_x, y):
    """Norm of the tangent-plane component of ``y - x`` at ``x`` with normal ``n_x``."""
    v = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
    vn = np.sum(v * n_x, axis=-1)
    return np.linalg.norm(v - vn[..., None] * np.asarray(n_x), axis=-1)


def kreg_kernel(i: int, j: int, x, n_x, y, n_y, tau: float, params: KernelParams):
    """Regularized kernel: ``K_ij`` outside the tangential ``tau``-ball, a constant inside.

    Parameters
    ----------
    x, n_x : array_like
        Target surface point and its normal (defines the tangent plane).
    y, n_y : array_like
        Projected source point and its normal.
    tau : float
        Regularization radius.
    """
    dist = tangential_distance(x, n_x, y)
    inside = dist < tau
    c = kreg_constant(i, j, tau, params)
    if np.ndim(inside) == 0:
        return c if inside else kij(i, j, x, n_x, y, n_y, params)
    out = np.full(np.shape(inside), c, dtype=float)
    if np.any(~inside):
        xx = np.broadcast_to(x, np.shape(inside) + (3,))[~inside]
        nx = np.broadcast_to(n_x, np.shape(inside) + (3,))[~inside]
        yy = np.broadcast_to(y, np.shape(inside) + (3,))[~inside]
        ny = np.broadcast_to(n_y, np.shape(inside) + (3,))[~inside]
        out[~inside] = kij(i, j, xx, nx, yy, ny, params)
    return out


# ---------------------------------------------------------------------------
# Expansion terms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpansionContext:
    """Local data for the expansion of a restricted kernel along the singular line.

    Parameters
    ----------
    A : array_like, shape (2, 2)
        Frame block ``A[i, j] = (Q tau_i)_j``.
    kappa : array_like, shape (2,)
        Principal curvatures (Hessian-of-``d`` sign convention, so a sphere
        of radius ``r`` has ``-1/r``).
    eta : float
        Signed distance of the singular-line point in the current plane.

    Notes
    -----
    A point at signed distance ``eta`` displaced by ``v`` tangentially
    projects onto the surface at tangential offset ``D0 v`` to first order,
    with ``D0 = (I + eta M)^{-1}`` and ``M = diag(kappa)``.
    """

    A: np.ndarray
    kappa: np.ndarray
    eta: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(2, 2)
        k = np.asarray(self.kappa, dtype=float).reshape(2)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "kappa", k)
        diag = 1.0 + self.eta * k
        if np.any(diag <= 0):
            raise KernelError("I + eta M is not positive definite: eta beyond the reach")
        if abs(np.linalg.det(A)) < 1e-12:
            raise KernelError("frame block A is singular")

    @property
    def M(self) -> np.ndarray:
        return np.diag(self.kappa)

    @property
    def D0(self) -> np.ndarray:
        return np.diag(1.0 / (1.0 + self.eta * self.kappa))


def _quad_terms(A, kappa, eta, yhat):
    # v = D0 A yhat, returns |v| and v^T M v for yhat of shape (..., 2).
    v = np.einsum("ij,...j->...i", A, yhat) / (1.0 + eta * kappa)
    nv = np.linalg.norm(v, axis=-1)
    q = np.sum(kappa * v * v, axis=-1)
    return nv, q


def s0(i: int, j: int, yhat, ctx: ExpansionContext, params: KernelParams):
    """Leading expansion coefficient ``s0^(ij)(yhat)``.

    ``s(u) ~ s0(u/|u|) / |u|`` near the singular point in the plane, with

    * ``s0^(11) = (1 - eps_E/eps_I) q / (8 pi |v|^3)``
    * ``s0^(22) = (1 - eps_I/eps_E) q / (8 pi |v|^3)``
    * ``s0^(21) = kappa**2 / (8 pi |v|)``
    * ``s0^(12) = 0``

    where ``v = D0 A yhat`` and ``q = v^T M v``.
    """
    yhat = np.asarray(yhat, dtype=float)
    nv, q = _quad_terms(ctx.A, ctx.kappa, ctx.eta, yhat)
    if (i, j) == (1, 1):
        return (1.0 - params.ratio_ei) * q / (8.0 * np.pi * nv**3)
    if (i, j) == (2, 2):
        return (1.0 - params.ratio_ie) * q / (8.0 * np.pi * nv**3)
    if (i, j) == (2, 1):
        return params.kappa**2 / (8.0 * np.pi * nv)
    if (i, j) == (1, 2):
        return np.zeros(nv.shape)
    raise KernelError(f"unknown kernel index ({i}, {j})")


def s1_12(params: KernelParams) -> float:
    """Constant second expansion term of ``K12``: ``kappa / (4 pi)``."""
    return params.kappa / _FOUR_PI


def s0_samples(A, kappa, eta, n_theta: int, params: KernelParams):
    """Sample ``s0^(11)``, ``s0^(21)`` and ``s0^(22)`` on uniform angles.

    Vectorized over many singular-line records.

    Parameters
    ----------
    A : ndarray, shape (m, 2, 2)
    kappa : ndarray, shape (m, 2)
    eta : ndarray, shape (m,)
    n_theta : int
        Number of angles ``theta_l = 2 pi l / n_theta``.

    Returns
    -------
    s11, s21, s22 : ndarray, shape (m, n_theta)
    """
    th = 2.0 * np.pi * np.arange(n_theta) / n_theta
    yhat = np.stack([np.cos(th), np.sin(th)], axis=-1)  # (L, 2)
    v = np.einsum("mij,lj->mli", A, yhat) / (1.0 + eta[:, None, None] * kappa[:, None, :])
    nv = np.linalg.norm(v, axis=-1)
    q = np.sum(kappa[:, None, :] * v * v, axis=-1)
    base = q / (8.0 * np.pi * nv**3)
    s11 = (1.0 - params.ratio_ei) * base
    s22 = (1.0 - params.ratio_ie) * base
    s21 = params.kappa**2 / (8.0 * np.pi * nv)
    return s11, s21, s22
