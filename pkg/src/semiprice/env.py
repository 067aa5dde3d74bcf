"""Synthetic pricing markets with known ground truth.

A market draws covariates ``x_t``, forms ``x~_t = (x_t, 1)`` and a hidden
valuation ``v_t = theta0 . x~_t + z_t`` with bounded noise ``z_t``. A posted
price ``p`` sells iff ``v_t >= p``. Because the noise law is an explicit
polynomial, expected revenue and the revenue-maximising price are available
exactly for regret accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import ConfigError, NumericalError

__all__ = [
    "NoiseModel",
    "CovariateProcess",
    "MarketEnv",
    "MarketOutcome",
    "trunc_poly_noise",
    "uniform_noise",
    "iid_independent",
    "iid_dependent",
    "var_mixing",
    "default_env",
    "sample_covariates",
    "sample_noise",
    "sample_noise_batch",
    "market_step",
    "expected_revenue",
    "oracle_price",
]

ORACLE_GRID = 4096
VAR_BURN_IN = 500


# --------------------------------------------------------------------------
# noise


def _poly_mul(a, b):
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return out


def _poly_eval(c, x: Fraction) -> Fraction:
    acc = Fraction(0)
    for coef in reversed(c):
        acc = acc * x + coef
    return acc


def _antiderivative(c):
    return [Fraction(0)] + [coef / (i + 1) for i, coef in enumerate(c)]


def _derivative(c):
    return [coef * i for i, coef in enumerate(c)][1:] or [Fraction(0)]


@dataclass(frozen=True)
class NoiseModel:
    """Symmetric, compactly supported noise law with polynomial density.

    The density, CDF and density derivative are exact rational polynomials on
    ``[-half_width, half_width]``; float copies are kept for evaluation.
    """

    family: str
    m: int
    half_width: float
    pdf_exact: tuple[Fraction, ...] = field(repr=False)
    cdf_exact: tuple[Fraction, ...] = field(repr=False)
    dpdf_exact: tuple[Fraction, ...] = field(repr=False)

    @property
    def pdf_coeffs(self) -> np.ndarray:
        return np.array([float(c) for c in self.pdf_exact])

    @property
    def label(self) -> str:
        return "uniform" if self.family == "uniform" else f"trunc_poly{self.m}"

    def __post_init__(self):
        # float copies are cached on the instance for the hot evaluation paths
        object.__setattr__(self, "_pdf", np.array([float(c) for c in self.pdf_exact]))
        object.__setattr__(self, "_cdf", np.array([float(c) for c in self.cdf_exact]))
        object.__setattr__(self, "_dpdf", np.array([float(c) for c in self.dpdf_exact]))
        object.__setattr__(self, "_peak", float(_poly_eval(self.pdf_exact, Fraction(0))))

    def pdf(self, u):
        u = np.asarray(u, dtype=float)
        out = np.where(np.abs(u) <= self.half_width, P.polyval(u, self._pdf), 0.0)
        return float(out) if out.ndim == 0 else out

    def dpdf(self, u):
        u = np.asarray(u, dtype=float)
        out = np.where(np.abs(u) < self.half_width, P.polyval(u, self._dpdf), 0.0)
        return float(out) if out.ndim == 0 else out

    def cdf(self, u):
        u = np.asarray(u, dtype=float)
        inner = np.clip(P.polyval(u, self._cdf), 0.0, 1.0)
        out = np.where(u <= -self.half_width, 0.0, np.where(u >= self.half_width, 1.0, inner))
        return float(out) if out.ndim == 0 else out

    @property
    def peak_density(self) -> float:
        return self._peak

    def moment(self, k: int) -> Fraction:
        """Exact ``E[z^k]``."""
        h = Fraction(self.half_width).limit_denominator()
        anti = _antiderivative(_poly_mul(self.pdf_exact, [Fraction(0)] * k + [Fraction(1)]))
        return _poly_eval(anti, h) - _poly_eval(anti, -h)

    def phi(self, u):
        """Virtual valuation ``u - (1 - F(u)) / F'(u)`` (nan where ``f = 0``)."""
        u = np.asarray(u, dtype=float)
        f = self.pdf(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(f > 0, u - (1.0 - self.cdf(u)) / np.where(f > 0, f, 1.0), np.nan)
        return float(out) if out.ndim == 0 else out

    def dphi(self, u):
        u = np.asarray(u, dtype=float)
        f = self.pdf(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            safe = np.where(f > 0, f, 1.0)
            out = np.where(f > 0, 2.0 + (1.0 - self.cdf(u)) * self.dpdf(u) / safe**2, np.nan)
        return float(out) if out.ndim == 0 else out


def trunc_poly_noise(m: int) -> NoiseModel:
    """Density proportional to ``(1/4 - x^2)^(m/2)`` on ``|x| <= 1/2``."""
    if m < 2 or m % 2:
        raise ConfigError(f"trunc_poly noise needs an even m >= 2, got {m}")
    k = m // 2
    quarter = Fraction(1, 4)
    # (1/4 - x^2)^k = sum_j C(k, j) (1/4)^(k-j) (-x^2)^j
    raw = [Fraction(0)] * (2 * k + 1)
    for j in range(k + 1):
        raw[2 * j] = comb(k, j) * quarter ** (k - j) * (-1) ** j
    half = Fraction(1, 2)
    anti = _antiderivative(raw)
    mass = _poly_eval(anti, half) - _poly_eval(anti, -half)
    pdf = [c / mass for c in raw]
    cdf = _antiderivative(pdf)
    cdf[0] -= _poly_eval(cdf, -half)
    return NoiseModel("trunc_poly", m, 0.5, tuple(pdf), tuple(cdf), tuple(_derivative(pdf)))


def uniform_noise() -> NoiseModel:
    """Uniform law on ``[-1/2, 1/2]``."""
    return NoiseModel(
        "uniform", 0, 0.5, (Fraction(1),), (Fraction(1, 2), Fraction(1)), (Fraction(0),)
    )


def sample_noise_batch(noise: NoiseModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` draws by rejection against a flat envelope at the density peak."""
    h = noise.half_width
    if noise.family == "uniform":
        return rng.uniform(-h, h, size=n)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        chunk = int(need * 2.5) + 16
        x = rng.uniform(-h, h, size=chunk)
        accept = rng.uniform(size=chunk) * noise.peak_density <= noise.pdf(x)
        got = x[accept][:need]
        out[filled : filled + got.size] = got
        filled += got.size
    return out


def sample_noise(noise: NoiseModel, rng: np.random.Generator) -> float:
    return float(sample_noise_batch(noise, 1, rng)[0])


# --------------------------------------------------------------------------
# covariates


def _band(d: int, base: float, shift: int) -> np.ndarray:
    idx = np.arange(d)
    return base ** (np.abs(idx[:, None] - idx[None, :]) + shift)


@dataclass(frozen=True)
class CovariateProcess:
    kind: str
    d: int
    m: int
    sigma: np.ndarray | None = field(default=None, compare=False)
    a: np.ndarray | None = field(default=None, compare=False)
    b: np.ndarray | None = field(default=None, compare=False)
    burn_in: int = 0

    def __post_init__(self):
        if self.kind not in ("iid_independent", "iid_dependent", "var_mixing"):
            raise ConfigError(f"unknown covariate kind {self.kind!r}")
        if self.d < 1:
            raise ConfigError("covariate dimension must be >= 1")
        if self.sigma is not None:
            try:
                chol = np.linalg.cholesky(self.sigma)
            except np.linalg.LinAlgError as exc:
                raise ConfigError("covariance matrix is not positive definite") from exc
            object.__setattr__(self, "_sigma_inv", np.linalg.inv(self.sigma))
            object.__setattr__(self, "_chol", chol)

    @property
    def label(self) -> str:
        return self.kind


def iid_independent(d: int = 3, m: int = 2) -> CovariateProcess:
    """Coordinates i.i.d. with density proportional to ``(2/3 - x^2)^(m+1)``."""
    return CovariateProcess("iid_independent", d, m)


def iid_dependent(d: int = 3, m: int = 2, sigma: np.ndarray | None = None) -> CovariateProcess:
    """Joint density proportional to ``(1 - x' S^-1 x)^(m+1)`` on the ellipsoid."""
    sigma = _band(d, 0.2, 0) if sigma is None else np.asarray(sigma, dtype=float)
    return CovariateProcess("iid_dependent", d, m, sigma=sigma)


def var_mixing(
    d: int = 3,
    m: int = 2,
    sigma: np.ndarray | None = None,
    a: np.ndarray | None = None,
    b: np.ndarray | None = None,
    burn_in: int = VAR_BURN_IN,
) -> CovariateProcess:
    """VAR(2) recursion ``x_t = A x_{t-1} + B x_{t-2} + xi_t``."""
    sigma = _band(d, 0.2, 0) if sigma is None else np.asarray(sigma, dtype=float)
    a = _band(d, 0.4, 1) if a is None else np.asarray(a, dtype=float)
    b = _band(d, 0.1, 1) if b is None else np.asarray(b, dtype=float)
    return CovariateProcess("var_mixing", d, m, sigma=sigma, a=a, b=b, burn_in=burn_in)


def _sample_iid_independent(proc: CovariateProcess, n: int, rng) -> np.ndarray:
    r = math.sqrt(2.0 / 3.0)
    total = n * proc.d
    out = np.empty(total)
    filled = 0
    while filled < total:
        need = total - filled
        chunk = int(need * 2.5) + 16
        x = rng.uniform(-r, r, size=chunk)
        accept = rng.uniform(size=chunk) <= (1.0 - x * x / (r * r)) ** (proc.m + 1)
        got = x[accept][:need]
        out[filled : filled + got.size] = got
        filled += got.size
    return out.reshape(n, proc.d)


def _sample_ellipsoid(proc: CovariateProcess, n: int, rng) -> np.ndarray:
    box = np.sqrt(np.diag(proc.sigma))
    inv = proc._sigma_inv
    out = np.empty((n, proc.d))
    filled = 0
    while filled < n:
        need = n - filled
        chunk = int(need * 20) + 64
        x = rng.uniform(-1.0, 1.0, size=(chunk, proc.d)) * box
        q = np.einsum("ij,jk,ik->i", x, inv, x)
        weight = np.where(q < 1.0, np.clip(1.0 - q, 0.0, 1.0) ** (proc.m + 1), 0.0)
        accept = rng.uniform(size=chunk) <= weight
        got = x[accept][:need]
        out[filled : filled + got.shape[0]] = got
        filled += got.shape[0]
    return out


def sample_covariates(proc: CovariateProcess, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` covariate vectors (rows); VAR output starts after the burn-in."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if proc.kind == "iid_independent":
        return _sample_iid_independent(proc, n, rng)
    if proc.kind == "iid_dependent":
        return _sample_ellipsoid(proc, n, rng)
    shocks = _sample_ellipsoid(proc, n + proc.burn_in, rng)
    x_prev2 = np.zeros(proc.d)
    x_prev = np.zeros(proc.d)
    out = np.empty((n, proc.d))
    a, b = proc.a, proc.b
    for t in range(n + proc.burn_in):
        x = a @ x_prev + b @ x_prev2 + shocks[t]
        x_prev2, x_prev = x_prev, x
        if t >= proc.burn_in:
            out[t - proc.burn_in] = x
    return out


# --------------------------------------------------------------------------
# market


@dataclass(frozen=True)
class MarketOutcome:
    y: int
    realized_revenue: float
    v: float


@dataclass(frozen=True)
class MarketEnv:
    """Ground-truth market. ``theta0`` is ``(beta0..., alpha0)``."""

    theta0: np.ndarray = field(compare=False)
    noise: NoiseModel
    covariates: CovariateProcess
    price_cap: float

    def __post_init__(self):
        theta = np.asarray(self.theta0, dtype=float)
        if theta.shape != (self.covariates.d + 1,):
            raise ConfigError(
                f"theta0 has length {theta.size}, expected d+1 = {self.covariates.d + 1}"
            )
        if not self.price_cap > 0:
            raise ConfigError("price_cap must be positive")
        object.__setattr__(self, "theta0", theta)

    @property
    def d(self) -> int:
        return self.covariates.d

    def augment(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        ones = np.ones(x.shape[:-1] + (1,))
        return np.concatenate([x, ones], axis=-1)

    def mean_value(self, x_tilde) -> np.ndarray | float:
        return np.asarray(x_tilde, dtype=float) @ self.theta0

    def revenue_at(self, u, p):
        """Expected revenue ``p (1 - F(p - u))`` given mean valuation ``u``."""
        p = np.asarray(p, dtype=float)
        out = p * (1.0 - self.noise.cdf(p - np.asarray(u, dtype=float)))
        return float(out) if out.ndim == 0 else out

    def oracle_prices(self, u) -> np.ndarray:
        """Vectorised :func:`oracle_price` over mean valuations ``u``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return np.concatenate([_oracle_chunk(self, u[i : i + 256]) for i in range(0, u.size, 256)])


def default_env(
    noise: NoiseModel | None = None,
    covariates: CovariateProcess | None = None,
    alpha0: float = 3.0,
    beta0=None,
    price_cap: float = 6.0,
) -> MarketEnv:
    """Defaults: ``d = 3``, ``alpha0 = 3``, ``beta0 = sqrt(2/3) * 1``, ``B = 6``."""
    covariates = covariates or iid_independent(3, 2)
    noise = noise or trunc_poly_noise(2)
    d = covariates.d
    beta = np.full(d, math.sqrt(2.0 / 3.0)) if beta0 is None else np.asarray(beta0, dtype=float)
    return MarketEnv(np.append(beta, alpha0), noise, covariates, price_cap)


def market_outcome(env: MarketEnv, x_tilde, p: float, z: float) -> MarketOutcome:
    v = float(np.dot(env.theta0, x_tilde)) + z
    y = int(v >= p)
    return MarketOutcome(y, p * y, v)


def market_step(env: MarketEnv, x_tilde, p: float, rng: np.random.Generator) -> MarketOutcome:
    """One sale attempt at price ``p`` with a fresh noise draw."""
    return market_outcome(env, x_tilde, p, sample_noise(env.noise, rng))


def expected_revenue(env: MarketEnv, x_tilde, p: float) -> float:
    return env.revenue_at(env.mean_value(x_tilde), p)


def _oracle_chunk(env: MarketEnv, u: np.ndarray) -> np.ndarray:
    noise = env.noise
    cap = env.price_cap
    grid = np.linspace(0.0, cap, ORACLE_GRID)
    cell = grid[1] - grid[0]
    rev = grid[None, :] * (1.0 - noise.cdf(grid[None, :] - u[:, None]))
    _check_unimodal(rev, u)
    idx = np.argmax(rev, axis=1)
    rows = np.arange(u.size)
    best_p = grid[idx]
    best_rev = rev[rows, idx]

    lo = np.maximum(best_p - cell, 0.0)
    hi = np.minimum(best_p + cell, cap)
    # Newton on the first-order condition 1 - F(p - u) - p f(p - u) = 0
    p = best_p.copy()
    for _ in range(30):
        w = p - u
        foc = 1.0 - noise.cdf(w) - p * noise.pdf(w)
        slope = -2.0 * noise.pdf(w) - p * noise.dpdf(w)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(slope < 0, foc / slope, 0.0)
        p_new = np.clip(p - step, lo, hi)
        if np.all(np.abs(p_new - p) <= 1e-15 * np.maximum(1.0, np.abs(p))):
            p = p_new
            break
        p = p_new
    candidates = [p, np.clip(u - noise.half_width, 0.0, cap), np.clip(u + noise.half_width, 0.0, cap)]
    out_p = best_p
    out_rev = best_rev
    for cand in candidates:
        in_cell = np.abs(cand - best_p) <= cell
        cand_rev = env.revenue_at(u, cand)
        take = in_cell & (cand_rev > out_rev)
        out_p = np.where(take, cand, out_p)
        out_rev = np.where(take, cand_rev, out_rev)
    return out_p


def _check_unimodal(rev: np.ndarray, u: np.ndarray) -> None:
    # revenue is increasing below the support and zero above it; more than one
    # strict interior peak means the virtual valuation is not monotone
    tol = 1e-12
    left = rev[:, 1:-1] - rev[:, :-2]
    right = rev[:, 1:-1] - rev[:, 2:]
    peaks = (left > tol) & (right > tol)
    counts = peaks.sum(axis=1)
    if np.any(counts > 1):
        bad = int(np.argmax(counts > 1))
        raise NumericalError(
            f"revenue curve has {int(counts[bad])} local maxima at u={u[bad]:.6g}; "
            "oracle price is not bracketed"
        )


def oracle_price(env: MarketEnv, x_tilde) -> float:
    """Revenue-maximising price for features ``x_tilde`` under the true law."""
    return float(env.oracle_prices(env.mean_value(x_tilde))[0])
