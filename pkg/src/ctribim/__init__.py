"""Corrected trapezoidal rules for implicit boundary integrals.

Solves the linearized Poisson-Boltzmann boundary integral equations on
surfaces given by signed distance functions, using grid nodes in a tube
around the surface and corrected trapezoidal quadrature for the singular
kernels.
"""
__version__ = "0.1.0"
