"""Smoothing kernels for the Nadaraya-Watson link estimators.

Three families are provided:

* ``order_m`` -- even polynomial times the triweight base ``(1 - u^2)^3`` on
  ``[-1, 1]``; the polynomial is chosen so that moments ``1..m-1`` vanish and
  the mass is one.
* ``flat_top`` -- infinite-order kernel whose Fourier transform is a trapezoid
  (flat on ``[-c, c]``, linear taper to zero at ``2c``).
* ``box`` -- uniform kernel on ``[-1, 1]``; used only by the Lipschitz
  pricing branch, where no kernel derivative is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import integrate

__all__ = [
    "KernelSpec",
    "MomentReport",
    "build_order_m",
    "build_flat_top",
    "build_box",
    "eval_kernel",
    "eval_kernel_deriv",
    "kernel_and_deriv",
    "check_moments",
    "flat_top_by_quadrature",
    "PRINTED_K2_COEFFS",
]

# 35/12 (1 - u^2)^3 as printed in the simulation design; integrates to 8/3.
PRINTED_K2_COEFFS = tuple(float(Fraction(35, 12) * c) for c in (1, 0, -3, 0, 3, 0, -1))

_FLAT_TOP_ENVELOPE_FLOOR = 1e-12
_SERIES_CUTOFF = 1e-3


def _triweight_moment(k: int) -> Fraction:
    """Exact value of int_{-1}^{1} u^k (1 - u^2)^3 du."""
    if k % 2:
        return Fraction(0)
    # (1-u^2)^3 = 1 - 3u^2 + 3u^4 - u^6
    return sum(
        (c * Fraction(2, k + 2 * j + 1) for j, c in enumerate((1, -3, 3, -1))),
        Fraction(0),
    )


def _solve_exact(a: list[list[Fraction]], b: list[Fraction]) -> list[Fraction]:
    n = len(b)
    rows = [list(r) + [v] for r, v in zip(a, b)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if rows[r][col] != 0), None)
        if pivot is None:
            raise ArithmeticError("singular moment system")
        rows[col], rows[pivot] = rows[pivot], rows[col]
        for r in range(n):
            if r != col and rows[r][col] != 0:
                factor = rows[r][col] / rows[col][col]
                rows[r] = [x - factor * y for x, y in zip(rows[r], rows[col])]
    return [rows[i][n] / rows[i][i] for i in range(n)]


def order_m_coefficients(m: int) -> tuple[Fraction, ...]:
    """Exact power-series coefficients of the order-``m`` triweight kernel."""
    if m < 2 or m % 2:
        raise ValueError(f"order must be an even integer >= 2, got {m}")
    half = m // 2
    # unknowns: coefficients of u^0, u^2, ..., u^(m-2) in q
    a = [[_triweight_moment(2 * j + 2 * i) for i in range(half)] for j in range(half)]
    b = [Fraction(1)] + [Fraction(0)] * (half - 1)
    q = _solve_exact(a, b)
    q_full = [Fraction(0)] * (m - 1)
    for i, c in enumerate(q):
        q_full[2 * i] = c
    base = [Fraction(1), Fraction(0), Fraction(-3), Fraction(0), Fraction(3), Fraction(0), Fraction(-1)]
    out = [Fraction(0)] * (len(q_full) + len(base) - 1)
    for i, qi in enumerate(q_full):
        for j, bj in enumerate(base):
            out[i + j] += qi * bj
    return tuple(out)


@dataclass(frozen=True)
class KernelSpec:
    """Immutable kernel description.

    ``support`` is the half-width outside of which the kernel is treated as
    zero. For the flat-top kernel this is a truncation radius where the
    ``2/(pi c x^2)`` envelope drops below 1e-12.
    """

    kind: str
    order: int
    support: float
    coeffs: tuple[float, ...] = ()
    c_kappa: float = 0.0
    exact_coeffs: tuple[Fraction, ...] = field(default=(), compare=False, repr=False)
    # q in t = u^2 for the factored form q(t) (1 - t)^3
    q_coeffs: tuple[float, ...] = field(default=(), compare=False, repr=False)

    def __call__(self, u):
        return eval_kernel(self, u)

    def deriv(self, u):
        return eval_kernel_deriv(self, u)

    @property
    def has_derivative(self) -> bool:
        return self.kind != "box"

    @property
    def label(self) -> str:
        if self.kind == "order_m":
            return f"K{self.order}"
        if self.kind == "flat_top":
            return f"flat_top(c={self.c_kappa:g})"
        return "box"


def build_order_m(m: int) -> KernelSpec:
    """Order-``m`` kernel ``q(u)(1-u^2)^3`` with verified moment conditions."""
    exact = order_m_coefficients(m)
    q_u, rem = P.polydiv([float(c) for c in exact], [1.0, 0.0, -3.0, 0.0, 3.0, 0.0, -1.0])
    assert np.allclose(rem, 0.0, atol=1e-12)
    spec = KernelSpec(
        kind="order_m",
        order=m,
        support=1.0,
        coeffs=tuple(float(c) for c in exact),
        exact_coeffs=exact,
        q_coeffs=tuple(float(c) for c in q_u[::2]),
    )
    report = check_moments(spec, m)
    if not report.ok(1e-8):
        raise ArithmeticError(f"order-{m} kernel failed moment check: {report.moments}")
    return spec


def build_box() -> KernelSpec:
    return KernelSpec(kind="box", order=2, support=1.0, coeffs=(0.5,))


def build_flat_top(c_kappa: float = 1.0) -> KernelSpec:
    """Infinite-order kernel with trapezoidal Fourier transform.

    Closed form: ``K(x) = (cos(c x) - cos(2 c x)) / (pi c x^2)``, obtained as
    twice the inverse transform of the triangle of half-width ``2c`` minus the
    triangle of half-width ``c``.
    """
    if not c_kappa > 0:
        raise ValueError("c_kappa must be positive")
    radius = math.sqrt(2.0 / (math.pi * c_kappa * _FLAT_TOP_ENVELOPE_FLOOR))
    return KernelSpec(kind="flat_top", order=0, support=radius, c_kappa=float(c_kappa))


def _flat_top(c: float, x: np.ndarray) -> np.ndarray:
    cx = c * x
    small = np.abs(cx) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, x)
    full = (np.cos(c * safe) - np.cos(2.0 * c * safe)) / (math.pi * c * safe * safe)
    series = (c / math.pi) * (1.5 - 0.625 * cx * cx)
    return np.where(small, series, full)


def _flat_top_deriv(c: float, x: np.ndarray) -> np.ndarray:
    cx = c * x
    small = np.abs(cx) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, x)
    num = (2.0 * np.sin(2.0 * c * safe) - np.sin(c * safe)) * c * safe - 2.0 * (
        np.cos(c * safe) - np.cos(2.0 * c * safe)
    )
    full = num / (math.pi * c * safe**3)
    series = -(1.25 * c**3 / math.pi) * x
    return np.where(small, series, full)


def _horner(coeffs, x):
    out = coeffs[-1]
    for c in coeffs[-2::-1]:
        out = out * x + c
    return out


def _order_m_parts(spec: KernelSpec, u: np.ndarray, deriv: bool):
    t = u * u
    r = np.where(t <= 1.0, 1.0 - t, 0.0)
    q = _horner(spec.q_coeffs, t)
    r2 = r * r
    val = q * r2 * r
    if not deriv:
        return val, None
    dq = _horner([k * c for k, c in enumerate(spec.q_coeffs)][1:], t) if len(spec.q_coeffs) > 1 else 0.0
    # d/du q(u^2)(1-u^2)^3 = 2u (1-u^2)^2 [q'(t)(1-u^2) - 3 q(t)]
    return val, 2.0 * u * r2 * (dq * r - 3.0 * q)


def kernel_and_deriv(spec: KernelSpec, u: np.ndarray):
    """``(K(u), K'(u))`` in one pass; order-m kernels share the factored terms."""
    u = np.asarray(u, dtype=float)
    if spec.kind == "order_m" and spec.q_coeffs:
        return _order_m_parts(spec, u, True)
    return np.asarray(eval_kernel(spec, u)), np.asarray(eval_kernel_deriv(spec, u))


def eval_kernel(spec: KernelSpec, u):
    """Evaluate ``K(u)``; accepts scalars or arrays."""
    arr = np.asarray(u, dtype=float)
    if spec.kind == "order_m" and spec.q_coeffs:
        out = _order_m_parts(spec, arr, False)[0]
        return float(out) if out.ndim == 0 else out
    inside = np.abs(arr) <= spec.support
    if spec.kind == "flat_top":
        val = _flat_top(spec.c_kappa, arr)
    elif spec.kind == "box":
        val = np.full_like(arr, 0.5)
    else:
        val = P.polyval(arr, spec.coeffs)
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


def eval_kernel_deriv(spec: KernelSpec, u):
    """Evaluate ``K'(u)``. The box kernel has no usable derivative."""
    if spec.kind == "box":
        raise ValueError("box kernel has no derivative")
    arr = np.asarray(u, dtype=float)
    if spec.kind == "order_m" and spec.q_coeffs:
        out = _order_m_parts(spec, arr, True)[1]
        return float(out) if out.ndim == 0 else out
    inside = np.abs(arr) <= spec.support
    if spec.kind == "flat_top":
        val = _flat_top_deriv(spec.c_kappa, arr)
    else:
        val = P.polyval(arr, P.polyder(spec.coeffs))
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MomentReport:
    label: str
    moments: tuple[float, ...]

    def ok(self, tol: float) -> bool:
        if abs(self.moments[0] - 1.0) > tol:
            return False
        return all(abs(v) <= tol for v in self.moments[1:-1]) if len(self.moments) > 2 else True


def _simpson(fn, lo: float, hi: float, panels: int) -> float:
    x = np.linspace(lo, hi, 2 * panels + 1)
    return float(integrate.simpson(fn(x), x=x))


def check_moments(spec: KernelSpec, m: int, panels: int = 10_000) -> MomentReport:
    """Quadrature moments ``int s^j K(s) ds`` for ``j = 0..m``.

    Bounded kernels use composite Simpson on the support. The flat-top kernel
    is integrated over ``|x| <= 200 / c_kappa`` with a fine grid.
    """
    if spec.kind == "flat_top":
        radius = 200.0 / spec.c_kappa
        panels = max(panels, 200_000)
    else:
        radius = spec.support
    moms = tuple(
        _simpson(lambda s, j=j: s**j * eval_kernel(spec, s), -radius, radius, panels)
        for j in range(m + 1)
    )
    return MomentReport(spec.label, moms)


def polynomial_mass(coeffs) -> float:
    """Exact integral over ``[-1, 1]`` of a power-series polynomial."""
    anti = P.polyint(coeffs)
    return float(P.polyval(1.0, anti) - P.polyval(-1.0, anti))


def flat_top_by_quadrature(c_kappa: float, x: float) -> float:
    """``(1/pi) int_0^{2c} kappa(s) cos(s x) ds`` by adaptive quadrature."""
    flat, _ = integrate.quad(lambda s: math.cos(s * x), 0.0, c_kappa, epsabs=1e-13)
    taper, _ = integrate.quad(
        lambda s: (2.0 - s / c_kappa) * math.cos(s * x), c_kappa, 2.0 * c_kappa, epsabs=1e-13
    )
    return (flat + taper) / math.pi
