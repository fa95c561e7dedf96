"""Quadrature rules on segments, triangles and discs."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def gauss_segment(n: int = 3):
    """Gauss-Legendre points in [0, 1] and weights summing to 1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# Radon's degree-5 rule, barycentric coordinates and weights summing to 1.
_R15 = np.sqrt(15.0)
_A1, _B1 = (9 - 2 * _R15) / 21, (6 + _R15) / 21
_A2, _B2 = (9 + 2 * _R15) / 21, (6 - _R15) / 21
_TRI5_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
_TRI5_W = np.array([9 / 40] + [(155 + _R15) / 1200] * 3 + [(155 - _R15) / 1200] * 3)


def triangle_rule(degree: int = 5):
    """Barycentric points and unit-sum weights exact to ``degree`` (1 or 5)."""
    if degree <= 1:
        return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
    if degree <= 5:
        return _TRI5_BARY, _TRI5_W
    raise ValueError("triangle rules above degree 5 are not tabulated")


def triangle_points(tri: np.ndarray, degree: int = 5):
    """Map a rule onto triangles ``tri`` of shape (..., 3, 2).

    Returns points (..., q, 2) and weights (..., q) that already include the
    triangle areas.
    """
    bary, w = triangle_rule(degree)
    pts = np.einsum("qi,...ij->...qj", bary, tri)
    e1 = tri[..., 1, :] - tri[..., 0, :]
    e2 = tri[..., 2, :] - tri[..., 0, :]
    area = 0.5 * np.abs(e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0])
    return pts, area[..., None] * w


@lru_cache(maxsize=None)
def disc_rule(n_radial: int = 8, n_angular: int = 24):
    """Points in the unit disc and weights summing to 1.

    Gauss-Legendre in r (with the r Jacobian) times the periodic trapezoid rule
    in the angle; exact for polynomials of degree below
    ``min(2 * n_radial - 1, n_angular)``.
    """
    r, wr = gauss_segment(n_radial)
    t = 2.0 * np.pi * np.arange(n_angular) / n_angular
    rr, tt = np.meshgrid(r, t, indexing="ij")
    pts = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])
    w = (wr[:, None] * r[:, None] * 2.0 * np.ones_like(tt) / n_angular).ravel()
    return pts, w


def disc_mean(f, centre, radius, n_radial: int = 8, n_angular: int = 24) -> float:
    """Mean value of ``f`` over the disc of given centre and radius."""
    pts, w = disc_rule(n_radial, n_angular)
    vals = np.asarray(f(centre + radius * pts), dtype=float)
    return float(np.dot(w, vals))
