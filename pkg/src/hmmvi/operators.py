"""Leray-Lions flux functions a(x, s, xi) and their structural constants.

Every callable here is vectorised: ``x`` has shape (N, 2), ``s`` shape (N,) and
``xi`` shape (N, 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from hmmvi.quadrature import triangle_points


class NotSPD(ValueError):
    pass


@dataclass(frozen=True)
class HeavisideParams:
    """Lower plateau ``epsilon`` and ramp width ``lam`` of the smoothed step."""

    epsilon: float = 1e-3
    lam: float = 1e-3

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in (0, 1]")
        if not self.lam > 0.0:
            raise ValueError("lambda must be positive")


def heaviside(rho, params: HeavisideParams = HeavisideParams()):
    """Piecewise-linear step: 1 for rho >= 0, epsilon below -lam, linear in between."""
    rho = np.asarray(rho, dtype=float)
    eps, lam = params.epsilon, params.lam
    ramp = (1.0 - eps) / lam * rho + 1.0
    out = np.where(rho >= 0.0, 1.0, np.where(rho > -lam, ramp, eps))
    return out if out.ndim else float(out)


@dataclass
class OperatorSpec:
    """A flux a(x, s, xi) with the constants of its growth and coercivity bounds.

    ``growth_bound`` (a-bar) may be a constant or a callable of x. Quasi-linear
    operators, a = coefficient(x, s) * tensor @ xi with p = 2, also carry
    ``coefficient`` and ``tensor``; ``diamond_weights`` may be overridden with an
    exact integration rule for the coefficient.
    """

    flux: Callable
    p: float
    growth_bound: Union[float, Callable] = 0.0
    growth_factor: float = 1.0
    coercivity: float = 1.0
    is_quasilinear: bool = False
    is_strictly_monotone: bool = False
    name: str = "custom"
    coefficient: Optional[Callable] = None
    tensor: Optional[np.ndarray] = None
    jacobian: Optional[Callable] = None
    potential: Optional[Callable] = None
    exact_weights: Optional[Callable] = None
    # "quadrature"/"exact": integrate over the diamond; "cell": freeze at the cell point x_K
    coefficient_rule: str = "quadrature"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.p > 1.0:
            raise ValueError("p must lie in (1, inf)")
        if self.is_quasilinear and (self.coefficient is None or self.p != 2.0):
            raise ValueError("a quasi-linear operator needs p = 2 and a coefficient")

    @property
    def conjugate_exponent(self) -> float:
        return self.p / (self.p - 1.0)

    def abar(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if callable(self.growth_bound):
            return np.asarray(self.growth_bound(x), dtype=float)
        return np.full(len(x), float(self.growth_bound))

    def __call__(self, x, s, xi) -> np.ndarray:
        return self.flux(np.atleast_2d(x), np.atleast_1d(s), np.atleast_2d(xi))

    def flux_jacobian(self, x, s, xi, step: float = 1e-7):
        """(da/ds, da/dxi) with shapes (N, 2) and (N, 2, 2).

        Uses the analytic ``jacobian`` when provided, central differences otherwise.
        """
        x, s, xi = np.atleast_2d(x), np.atleast_1d(s).astype(float), np.atleast_2d(xi).astype(float)
        if self.jacobian is not None:
            return self.jacobian(x, s, xi)
        hs = step * (1.0 + np.abs(s))
        ds = (self.flux(x, s + hs, xi) - self.flux(x, s - hs, xi)) / (2 * hs)[:, None]
        dxi = np.empty(xi.shape + (2,))
        for j in range(2):
            e = np.zeros_like(xi)
            h = step * (1.0 + np.abs(xi[:, j]))
            e[:, j] = h
            dxi[:, :, j] = (self.flux(x, s, xi + e) - self.flux(x, s, xi - e)) / (2 * h)[:, None]
        return ds, dxi

    def diamond_weights(self, disc, w) -> np.ndarray:
        """Diamond weights of coefficient(., w_K) for the frozen cell values of w.

        With ``coefficient_rule == "cell"`` the coefficient is evaluated once at the
        cell point and multiplied by |D|; otherwise it is integrated over the diamond.
        """
        if not self.is_quasilinear:
            raise ValueError(f"operator {self.name!r} is not quasi-linear")
        cell = w.cell_values if hasattr(w, "cell_values") else np.asarray(w, dtype=float)
        s = cell[disc.diamond_cell]
        if self.coefficient_rule == "cell":
            xk = disc.mesh.cell_centres[disc.diamond_cell]
            return np.asarray(self.coefficient(xk, s), dtype=float) * disc.diamond_measure
        if self.exact_weights is not None:
            return self.exact_weights(disc.diamond_triangles, s)
        pts, wq = triangle_points(disc.diamond_triangles, 5)
        q = wq.shape[1]
        vals = np.asarray(self.coefficient(pts.reshape(-1, 2), np.repeat(s, q)), dtype=float)
        return (vals.reshape(wq.shape) * wq).sum(axis=1)


# ---- built-in operators -------------------------------------------------------


def _check_spd(tensor) -> np.ndarray:
    t = np.asarray(tensor, dtype=float)
    if t.shape != (2, 2) or not np.allclose(t, t.T, rtol=0, atol=1e-14 * max(1.0, np.abs(t).max())):
        raise NotSPD("permeability must be a symmetric 2 x 2 matrix")
    ev = np.linalg.eigvalsh(t)
    if ev.min() <= 0.0:
        raise NotSPD(f"permeability has a non-positive eigenvalue {ev.min():g}")
    return t


def _simpson(f, a, b):
    return (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))


def triangle_step_integrals(triangles: np.ndarray, s: np.ndarray, params: HeavisideParams) -> np.ndarray:
    """Exact integral of heaviside(s - y) over each triangle.

    The chord width of a triangle at height y and the step profile are both
    piecewise linear in y, so Simpson's rule on the pieces between breakpoints
    (vertex ordinates, s and s + lam) is exact.
    """
    tri = np.asarray(triangles, dtype=float)
    s = np.asarray(s, dtype=float)
    ys = np.sort(tri[:, :, 1], axis=1)
    ya, yb, yc = ys[:, 0], ys[:, 1], ys[:, 2]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    width_mid = 2.0 * area / (yc - ya)

    def width(y):
        lo = np.where(yb > ya, width_mid * (y - ya) / np.where(yb > ya, yb - ya, 1.0), width_mid)
        hi = np.where(yc > yb, width_mid * (yc - y) / np.where(yc > yb, yc - yb, 1.0), width_mid)
        return np.clip(np.where(y <= yb, lo, hi), 0.0, None)

    def integrand(y):
        return heaviside(s - y, params) * width(y)

    cuts = np.column_stack([ya, yb, yc, np.clip(s, ya, yc), np.clip(s + params.lam, ya, yc)])
    cuts.sort(axis=1)
    total = np.zeros(len(tri))
    for k in range(4):
        # both factors are continuous, so kinks at the piece ends do no harm
        total += _simpson(integrand, cuts[:, k], cuts[:, k + 1])
    return total


def seepage_operator(params: HeavisideParams = HeavisideParams(), permeability=None,
                     coefficient_rule: str = "cell") -> OperatorSpec:
    """Quasi-linear seepage flux heaviside(s - y) * permeability @ xi.

    ``coefficient_rule`` picks how the frozen coefficient enters the Kacanov
    weights: "cell" (value at x_K times |D|) or "exact" (exact diamond integral).
    """
    if coefficient_rule not in ("cell", "exact"):
        raise ValueError(f"unknown coefficient rule {coefficient_rule!r}")
    perm = np.eye(2) if permeability is None else _check_spd(permeability)
    lam_min, lam_max = np.linalg.eigvalsh(perm)[[0, -1]]

    def coefficient(x, s):
        return heaviside(np.asarray(s) - np.atleast_2d(x)[:, 1], params)

    def flux(x, s, xi):
        return coefficient(x, s)[:, None] * (xi @ perm.T)

    def jacobian(x, s, xi):
        rho = s - x[:, 1]
        slope = np.where((rho < 0.0) & (rho > -params.lam), (1.0 - params.epsilon) / params.lam, 0.0)
        ds = slope[:, None] * (xi @ perm.T)
        dxi = coefficient(x, s)[:, None, None] * perm[None]
        return ds, dxi

    def exact_weights(triangles, s):
        return triangle_step_integrals(triangles, s, params)

    return OperatorSpec(
        flux=flux,
        p=2.0,
        growth_bound=0.0,
        growth_factor=float(lam_max),
        coercivity=float(params.epsilon * lam_min),
        is_quasilinear=True,
        is_strictly_monotone=True,
        name="seepage",
        coefficient=coefficient,
        tensor=None if permeability is None else perm,
        jacobian=jacobian,
        exact_weights=exact_weights,
        coefficient_rule=coefficient_rule,
        params={"epsilon": params.epsilon, "lambda": params.lam, "coefficient_rule": coefficient_rule},
    )


def p_laplacian(p: float = 2.0) -> OperatorSpec:
    """a(x, s, xi) = |xi|^(p-2) xi."""
    p = float(p)
    if not p > 1.0:
        raise ValueError("p must lie in (1, inf)")

    def flux(x, s, xi):
        n = np.linalg.norm(xi, axis=1)
        scale = np.where(n > 0, np.where(n > 0, n, 1.0) ** (p - 2.0), 0.0)
        return scale[:, None] * xi

    def jacobian(x, s, xi):
        n = np.linalg.norm(xi, axis=1)
        safe = np.where(n > 0, n, 1.0)
        outer = np.einsum("ni,nj->nij", xi, xi) / safe[:, None, None] ** 2
        base = safe ** (p - 2.0)
        dxi = base[:, None, None] * (np.eye(2)[None] + (p - 2.0) * outer)
        if p < 2:
            # the true Jacobian is unbounded at 0; a unit floor keeps Newton well posed
            dxi = np.where((n > 0)[:, None, None], dxi, np.eye(2)[None])
        else:
            dxi = np.where((n > 0)[:, None, None], dxi, (1.0 if p == 2 else 0.0) * np.eye(2)[None])
        return np.zeros_like(xi), dxi

    def potential(xi):
        return np.linalg.norm(xi, axis=1) ** p / p

    coefficient = (lambda x, s: np.ones(len(np.atleast_2d(x)))) if p == 2.0 else None
    return OperatorSpec(
        flux=flux,
        p=p,
        growth_bound=0.0,
        growth_factor=1.0,
        coercivity=1.0,
        is_quasilinear=p == 2.0,
        is_strictly_monotone=True,
        name="p-laplacian",
        coefficient=coefficient,
        jacobian=jacobian,
        potential=potential,
        exact_weights=(lambda tri, s: _triangle_areas(tri)) if p == 2.0 else None,
        params={"p": p},
    )


def _triangle_areas(tri: np.ndarray) -> np.ndarray:
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


# ---- sampled structural checks ------------------------------------------------


@dataclass
class ValidationReport:
    samples: int
    growth_violations: int
    coercivity_violations: int
    monotonicity_violations: int
    strict_violations: int

    @property
    def ok(self) -> bool:
        return self.growth_violations == self.coercivity_violations == self.monotonicity_violations == 0


def validate_operator(op: OperatorSpec, n_samples: int = 10_000, seed: int = 0, box=((0.0, 7.0), (0.0, 5.0)),
                      s_range=(-10.0, 10.0), xi_scale: float = 10.0, rtol: float = 1e-12) -> ValidationReport:
    """Count violations of the growth, coercivity and monotonicity inequalities on random samples."""
    rng = np.random.default_rng(seed)
    (x0, x1), (y0, y1) = box
    x = np.column_stack([rng.uniform(x0, x1, n_samples), rng.uniform(y0, y1, n_samples)])
    s = rng.uniform(*s_range, n_samples)
    xi = xi_scale * rng.standard_normal((n_samples, 2))
    chi = xi_scale * rng.standard_normal((n_samples, 2))
    a = op(x, s, xi)
    b = op(x, s, chi)
    nxi = np.linalg.norm(xi, axis=1)
    slack = rtol * (1.0 + nxi ** op.p)
    growth = np.linalg.norm(a, axis=1) > op.abar(x) + op.growth_factor * nxi ** (op.p - 1) + slack
    coer = (a * xi).sum(axis=1) < op.coercivity * nxi ** op.p - slack
    mono_val = ((a - b) * (xi - chi)).sum(axis=1)
    mono = mono_val < -slack
    strict = (mono_val <= 0) & (np.linalg.norm(xi - chi, axis=1) > 0)
    return ValidationReport(n_samples, int(growth.sum()), int(coer.sum()), int(mono.sum()), int(strict.sum()))
