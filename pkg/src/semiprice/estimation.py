"""Estimators used by the pricing policies.

The exploration data ``(x~_t, p_t, y_t)`` with ``p_t ~ Unif(0, B)`` support
two fits:

* ``theta`` by least squares of ``B * y_t`` on ``x~_t`` (unbiased because
  ``E[B y_t | x~_t] = x~_t . theta0`` under uniform prices);
* the noise CDF by Nadaraya-Watson regression of ``1 - y_t`` on the residual
  ``w_t = p_t - x~_t . theta``, plus its derivative by the quotient rule.

From these the virtual valuation ``phi(u) = u - (1 - F(u)) / F'(u)`` and the
pricing map ``g(u) = u + phi^{-1}(-u)`` are built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import InsufficientDataError, InversionError, SelectionError
from .kernels import KernelSpec, build_box, build_order_m, eval_kernel, kernel_and_deriv

EPS_F = 1e-8
EPS_D = 1e-6
FD_STEP = 1e-4
NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
GRID_POINTS = 512
GRID_ACCEPT = 0.1
RIDGE_JITTER = 1e-10
DEFAULT_INTERVAL = (-1.0, 1.0)


@dataclass(frozen=True)
class ExplorationBatch:
    """Rows ``(x~, p, y)`` collected during one exploration phase."""

    x_tilde: np.ndarray
    prices: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x_tilde, dtype=float))
        p = np.asarray(self.prices, dtype=float).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (x.shape[0] == p.size == y.size):
            raise ValueError("x_tilde, prices and y must have the same number of rows")
        if np.any((y != 0) & (y != 1)):
            raise ValueError("y must be binary")
        object.__setattr__(self, "x_tilde", x)
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    def residuals(self, theta) -> np.ndarray:
        return self.prices - self.x_tilde @ np.asarray(theta, dtype=float)


@dataclass(frozen=True)
class ThetaEstimate:
    theta_hat: np.ndarray
    gram_cond: float
    n_used: int
    jittered: bool = False


def fit_theta_ls(batch: ExplorationBatch, price_cap: float) -> ThetaEstimate:
    """Least squares of ``price_cap * y`` on ``x~`` via the normal equations."""
    x = batch.x_tilde
    n, k = x.shape
    if n < k:
        raise InsufficientDataError(f"need at least {k} rows to fit theta, got {n}")
    gram = x.T @ x / n
    rhs = x.T @ (price_cap * batch.y) / n
    cond = float(np.linalg.cond(gram))
    jittered = False
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        gram = gram + RIDGE_JITTER * np.eye(k)
        jittered = True
    try:
        theta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        theta = np.linalg.solve(gram + RIDGE_JITTER * np.eye(k), rhs)
        jittered = True
    return ThetaEstimate(theta, cond, n, jittered)


# --------------------------------------------------------------------------
# inversion of phi


class PhiMap:
    """Anything whose virtual valuation can be inverted by :func:`invert_phi`.

    Subclasses implement :meth:`phi_and_dphi`; ``nan`` marks points where
    ``phi`` is undefined.
    """

    search_interval: tuple[float, float] = DEFAULT_INTERVAL

    def phi_and_dphi(self, x: float) -> tuple[float, float]:
        raise NotImplementedError

    def phi(self, x: float) -> float:
        return self.phi_and_dphi(x)[0]

    def phi_many(self, xs: np.ndarray) -> np.ndarray:
        return np.array([self.phi(float(x)) for x in xs])


class CallablePhi(PhiMap):
    """Wraps explicit ``phi`` / ``dphi`` callables."""

    def __init__(self, phi: Callable, dphi: Callable, search_interval=DEFAULT_INTERVAL):
        self._phi = phi
        self._dphi = dphi
        self.search_interval = tuple(search_interval)

    def phi_and_dphi(self, x):
        return float(self._phi(x)), float(self._dphi(x))

    def phi_many(self, xs):
        return np.asarray(self._phi(np.asarray(xs)), dtype=float) * np.ones(len(xs))


def _bisect(link: PhiMap, target: float, a: float, b: float, ra: float) -> tuple[float, float]:
    x, r = a, ra
    for _ in range(200):
        mid = 0.5 * (a + b)
        rm = link.phi(mid) - target
        if not math.isfinite(rm):
            break
        x, r = mid, rm
        if abs(rm) <= NEWTON_TOL or b - a < 1e-15:
            break
        if (rm < 0) == (ra < 0):
            a, ra = mid, rm
        else:
            b = mid
    return x, r


def invert_phi(link: PhiMap, target: float) -> float:
    """Solve ``phi(x) = target`` for ``x`` in the link's search interval.

    Newton runs on ``y`` with ``x(y) = lo + (hi - lo) / (1 + exp(-y))``
    starting at ``y = 0``. If it stalls, a 512-point grid is scanned; the
    first sign change is refined by bisection, otherwise the grid point with
    the smallest residual is returned when that residual is at most 0.1.

    Raises :class:`InversionError` when nothing acceptable is found.
    """
    lo, hi = link.search_interval
    width = hi - lo

    def at(y):
        s = 1.0 / (1.0 + math.exp(-y))
        x = lo + width * s
        return (x, s, *link.phi_and_dphi(x))

    y = 0.0
    x, s, val, dval = at(y)
    for _ in range(NEWTON_MAX_ITER if math.isfinite(val) else 0):
        r = val - target
        if abs(r) <= NEWTON_TOL:
            return x
        jac = dval * width * s * (1.0 - s)
        if not math.isfinite(jac) or abs(jac) < 1e-300:
            break
        step = r / jac
        # halve steps that land where phi is undefined
        for _ in range(40):
            y_new = min(max(y - step, -700.0), 700.0)
            cand = at(y_new)
            if math.isfinite(cand[2]) and math.isfinite(cand[3]):
                break
            step *= 0.5
        else:
            break
        y = y_new
        x, s, val, dval = cand

    grid = np.linspace(lo, hi, GRID_POINTS)
    resid = link.phi_many(grid) - target
    finite = np.isfinite(resid)
    for i in range(GRID_POINTS - 1):
        if finite[i] and finite[i + 1] and (resid[i] == 0 or (resid[i] < 0) != (resid[i + 1] < 0)):
            x, r = _bisect(link, target, grid[i], grid[i + 1], resid[i])
            if abs(r) <= GRID_ACCEPT:
                return x
    if not finite.any():
        raise InversionError(f"phi undefined on the whole search interval [{lo}, {hi}]")
    best = int(np.nanargmin(np.where(finite, np.abs(resid), np.nan)))
    if abs(resid[best]) > GRID_ACCEPT:
        raise InversionError(
            f"no x in [{lo}, {hi}] with |phi(x) - {target:.6g}| <= {GRID_ACCEPT}; "
            f"best residual {abs(resid[best]):.3g} at x={grid[best]:.4g}"
        )
    return float(grid[best])


class GHat(NamedTuple):
    price: float
    fallback: bool


def g_from_phi(link: PhiMap, u: float, price_cap: float) -> GHat:
    """``clip(u + phi^{-1}(-u), 0, B)``; falls back to ``clip(u, 0, B)``."""
    try:
        x = invert_phi(link, -u)
    except InversionError:
        return GHat(min(max(u, 0.0), price_cap), True)
    return GHat(min(max(u + x, 0.0), price_cap), False)


# --------------------------------------------------------------------------
# Nadaraya-Watson link


@dataclass(frozen=True)
class NWSums:
    h: np.ndarray
    f: np.ndarray
    h1: np.ndarray | None
    f1: np.ndarray | None


def _nw_sums(
    w_sorted: np.ndarray, y_sorted: np.ndarray, kernel: KernelSpec, b: float, u: np.ndarray, deriv: bool
) -> NWSums:
    n = w_sorted.size
    reach = kernel.support * b
    if kernel.kind == "box":
        # window counts from prefix sums; K = 1/2 on [-1, 1]
        left = np.searchsorted(w_sorted, u - reach, side="left")
        right = np.searchsorted(w_sorted, u + reach, side="right")
        ones = np.concatenate([[0.0], np.cumsum(y_sorted)])
        return NWSums(
            0.5 * (ones[right] - ones[left]) / (n * b), 0.5 * (right - left) / (n * b), None, None
        )
    lo = np.searchsorted(w_sorted, u.min() - reach, side="left")
    hi = np.searchsorted(w_sorted, u.max() + reach, side="right")
    w = w_sorted[lo:hi]
    yy = y_sorted[lo:hi]
    s = (w[None, :] - u[:, None]) / b
    if not s.size:
        k = k1 = np.zeros((u.size, 0))
    elif deriv:
        k, k1 = kernel_and_deriv(kernel, s)
    else:
        k = eval_kernel(kernel, s)
    # same summation order for h and f so constant responses give exact ratios
    ones = np.ones_like(yy)
    h = k @ yy / (n * b)
    f = k @ ones / (n * b)
    if not deriv:
        return NWSums(h, f, None, None)
    h1 = -(k1 @ yy) / (n * b * b)
    f1 = -(k1 @ ones) / (n * b * b)
    return NWSums(h, f, h1, f1)


@dataclass(frozen=True, eq=False)
class LinkEstimate(PhiMap):
    """Fitted ``(theta, F, F', phi, g)`` bundle for one exploitation phase.

    Residuals ``w_t = p_t - x~_t . theta`` are sorted once so bounded
    kernels only touch the rows inside the bandwidth window.
    """

    theta: ThetaEstimate
    kernel: KernelSpec
    bandwidth: float
    w: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    price_cap: float = math.inf
    search_interval: tuple[float, float] = DEFAULT_INTERVAL
    eps_f: float = EPS_F
    eps_d: float = EPS_D

    @property
    def n(self) -> int:
        return self.w.size

    def sums(self, u, deriv: bool = True) -> NWSums:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return _nw_sums(self.w, self.y, self.kernel, self.bandwidth, u, deriv and self.kernel.has_derivative)

    def _cdf_from(self, s: NWSums) -> np.ndarray:
        return np.clip(1.0 - s.h / np.maximum(s.f, self.eps_f), 0.0, 1.0)

    def _dcdf_from(self, s: NWSums) -> np.ndarray:
        return -(s.h1 * s.f - s.h * s.f1) / np.maximum(s.f * s.f, self.eps_f**2)

    def cdf(self, u):
        out = self._cdf_from(self.sums(u, deriv=False))
        return out if np.ndim(u) else float(out[0])

    def dcdf(self, u):
        out = self._dcdf_from(self.sums(u))
        return out if np.ndim(u) else float(out[0])

    def out_of_data(self, u):
        """True where the design density estimate is at or below ``eps_f``."""
        out = self.sums(u, deriv=False).f <= self.eps_f
        return out if np.ndim(u) else bool(out[0])

    def phi_many(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        s = self.sums(xs)
        F = self._cdf_from(s)
        dF = self._dcdf_from(s)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = xs - (1.0 - F) / dF
        return np.where(np.abs(dF) >= self.eps_d, out, np.nan)

    def phi(self, x: float) -> float:
        return float(self.phi_many(np.array([x]))[0])

    def phi_and_dphi(self, x: float) -> tuple[float, float]:
        pts = np.array([x - FD_STEP, x, x + FD_STEP])
        s = self.sums(pts)
        dF = self._dcdf_from(s)
        F = float(self._cdf_from(s)[1])
        d1 = float(dF[1])
        if abs(d1) < self.eps_d:
            return math.nan, math.nan
        d2 = float(dF[2] - dF[0]) / (2.0 * FD_STEP)
        raw = 1.0 - float(s.h[1]) / max(float(s.f[1]), self.eps_f)
        clipped_slope = d1 if 0.0 < raw < 1.0 else 0.0
        val = x - (1.0 - F) / d1
        dval = 1.0 + clipped_slope / d1 + (1.0 - F) * d2 / (d1 * d1)
        return val, dval

    def g_hat(self, u: float) -> GHat:
        return g_from_phi(self, u, self.price_cap)


def fit_link(
    batch: ExplorationBatch,
    theta: ThetaEstimate,
    kernel: KernelSpec,
    bandwidth: float,
    price_cap: float = math.inf,
    search_interval: Sequence[float] = DEFAULT_INTERVAL,
) -> LinkEstimate:
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if batch.n < 1:
        raise InsufficientDataError("empty exploration batch")
    w = batch.residuals(theta.theta_hat)
    order = np.argsort(w, kind="stable")
    return LinkEstimate(
        theta=theta,
        kernel=kernel,
        bandwidth=float(bandwidth),
        w=w[order],
        y=batch.y[order],
        price_cap=float(price_cap),
        search_interval=(float(search_interval[0]), float(search_interval[1])),
    )


def _ad_hoc_link(batch, theta, kernel, b) -> LinkEstimate:
    theta = np.asarray(theta, dtype=float)
    return fit_link(batch, ThetaEstimate(theta, math.nan, batch.n), kernel, b)


def nw_regress(batch: ExplorationBatch, theta, kernel: KernelSpec, b: float, u):
    """``F^(u) = 1 - h(u) / max(f(u), eps_f)`` clipped to ``[0, 1]``."""
    return _ad_hoc_link(batch, theta, kernel, b).cdf(u)


def nw_derivative(batch: ExplorationBatch, theta, kernel: KernelSpec, b: float, u):
    """Quotient-rule derivative of the Nadaraya-Watson CDF estimate."""
    return _ad_hoc_link(batch, theta, kernel, b).dcdf(u)


def build_phi_hat(link: LinkEstimate, u: float) -> float:
    """``u - (1 - F^(u)) / F^'(u)``; ``nan`` where ``|F^'(u)| < eps_d``."""
    return link.phi(u)


def build_g_hat(link: LinkEstimate, u: float) -> GHat:
    return link.g_hat(u)


class NoisePhi(PhiMap):
    """Exact virtual valuation of a known noise law."""

    def __init__(self, noise, search_interval=DEFAULT_INTERVAL):
        self.noise = noise
        self.search_interval = tuple(search_interval)

    def phi_and_dphi(self, x):
        return float(self.noise.phi(x)), float(self.noise.dphi(x))

    def phi_many(self, xs):
        return np.asarray(self.noise.phi(np.asarray(xs, dtype=float)))


# --------------------------------------------------------------------------
# cross-validated smoothness selection


@dataclass(frozen=True)
class CvSelection:
    m_hat: int
    h_hat: float
    cv_table: dict = field(repr=False)


def cv_kernel(m: int) -> KernelSpec:
    """Kernel used for candidate order ``m``; ``m = 0`` is the Lipschitz branch."""
    return build_box() if m == 0 else build_order_m(m)


def loo_cv_loss(x: np.ndarray, y: np.ndarray, kernel: KernelSpec, h: float, eps: float = EPS_F) -> float:
    """Leave-one-out squared error of NW regression; ``inf`` if any fit is undefined."""
    s = (x[None, :] - x[:, None]) / h
    k = eval_kernel(kernel, s)
    np.fill_diagonal(k, 0.0)
    num = k @ y
    den = k @ np.ones_like(y)
    if np.any(den <= eps):
        return math.inf
    return float(np.mean((y - num / den) ** 2))


_TRIWEIGHT = (1.0, 0.0, -3.0, 0.0, 3.0, 0.0, -1.0)


def _weights_in_t(kernel: KernelSpec, t: np.ndarray, inside: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Kernel values from ``t = s^2`` and the shared triweight base."""
    if kernel.kind == "box":
        return np.where(inside, 0.5, 0.0)
    q_u, _ = P.polydiv(kernel.coeffs, _TRIWEIGHT)
    q_t = q_u[::2]
    if len(q_t) == 1:
        return q_t[0] * base
    return P.polyval(t, q_t) * base


def loo_cv_table(
    x: np.ndarray, y: np.ndarray, candidates: Sequence[int], bandwidths: Sequence[float], eps: float = EPS_F
) -> dict:
    """Leave-one-out losses for every ``(m, h)``; same values as :func:`loo_cv_loss`.

    Squared scaled distances and the ``(1 - s^2)^3`` base are computed once
    per bandwidth and shared by all candidate orders.
    """
    diff2 = (x[None, :] - x[:, None]) ** 2
    ones = np.ones_like(y)
    kernels = {int(m): cv_kernel(int(m)) for m in candidates}
    k0 = {m: float(eval_kernel(k, 0.0)) for m, k in kernels.items()}
    table = {}
    for h in bandwidths:
        h = float(h)
        t = diff2 / (h * h)
        inside = t <= 1.0
        r = np.where(inside, 1.0 - t, 0.0)
        base = r * r * r
        for m, kernel in kernels.items():
            k = _weights_in_t(kernel, t, inside, base)
            num = k @ y - k0[m] * y
            den = k @ ones - k0[m]
            if np.any(den <= eps):
                table[(m, h)] = math.inf
            else:
                table[(m, h)] = float(np.mean((y - num / den) ** 2))
    return table


def cross_validate_m(
    x, y, candidates: Sequence[int] = (0, 2, 4, 6), bandwidths: Sequence[float] | None = None
) -> CvSelection:
    """Pick ``(m, h)`` minimising leave-one-out error; ties go to smaller m, then h."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 20:
        raise SelectionError(f"cross-validation needs at least 20 rows, got {x.size}")
    bandwidths = default_bandwidths() if bandwidths is None else bandwidths
    if any(m not in (0, 2, 4, 6) for m in candidates):
        raise ValueError(f"candidate orders must lie in {{0, 2, 4, 6}}, got {tuple(candidates)}")
    if len(bandwidths) < 3 or any(not h > 0 for h in bandwidths):
        raise ValueError("bandwidth grid needs at least three positive values")
    table = loo_cv_table(x, y, candidates, bandwidths)
    m, h = cv_argmin(table)
    return CvSelection(m, h, table)


CV_TIE_RTOL = 1e-12


def cv_argmin(table: dict) -> tuple[int, float]:
    """Smallest ``(m, h)`` among entries within ``CV_TIE_RTOL`` of the minimum loss."""
    finite = {k: v for k, v in table.items() if math.isfinite(v)}
    if not finite:
        raise SelectionError("no (m, h) candidate produced a defined leave-one-out fit")
    best = min(finite.values())
    return min(k for k, v in finite.items() if v <= best + CV_TIE_RTOL * max(1.0, abs(best)))


def default_bandwidths() -> tuple[float, ...]:
    return tuple(float(v) for v in np.geomspace(0.1, 3.0, 12))
