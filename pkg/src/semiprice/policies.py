"""Online pricing policies.

Every policy exposes ``next_price(x_tilde) -> PriceDecision`` followed by
``observe(y)``. The episodic policies split time into episodes of length
``ell_k = 2^(k-1) ell0``; the first ``a_k`` rounds of an episode post
uniform random prices, the estimators are refit once on that batch, and the
rest of the episode prices with the fitted model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .env import MarketEnv
from .errors import InsufficientDataError, SelectionError
from .estimation import (
    DEFAULT_INTERVAL,
    ExplorationBatch,
    LinkEstimate,
    PhiMap,
    ThetaEstimate,
    cross_validate_m,
    cv_kernel,
    default_bandwidths,
    fit_link,
    fit_theta_ls,
    g_from_phi,
)
from .kernels import build_box, build_flat_top, build_order_m

EXPLORATION = "exploration"
EXPLOITATION = "exploitation"
FALLBACK = "fallback"

LIPSCHITZ_GRID = 1024
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _ceil(x: float) -> int:
    # guard against 97.00000000001 style round-off on exact powers
    r = round(x)
    return int(r) if abs(x - r) < 1e-9 else math.ceil(x)


def exploration_length(ell: int, d: int, mode: str, m: int = 2) -> int:
    """``a_k`` for an episode of length ``ell``, capped at ``ell``."""
    base = ell * d
    if mode == "finite":
        a = _ceil(base ** ((2 * m + 1) / (4 * m - 1)))
    elif mode == "supersmooth":
        a = _ceil(math.sqrt(base))
    elif mode == "lipschitz":
        a = _ceil(base**0.75)
    else:
        raise ValueError(f"unknown schedule mode {mode!r}")
    return min(a, ell)


@dataclass(frozen=True)
class EpisodeSchedule:
    ell0: int
    d: int
    mode: str = "finite"
    m: int = 2

    def length(self, k: int) -> int:
        return self.ell0 * 2 ** (k - 1)

    def exploration(self, k: int) -> int:
        return exploration_length(self.length(k), self.d, self.mode, self.m)


@dataclass(frozen=True)
class PriceDecision:
    price: float
    provenance: str
    episode: int
    index: int

    @property
    def phase(self) -> str:
        return EXPLORATION if self.provenance == EXPLORATION else EXPLOITATION


@dataclass
class EpisodeRecord:
    episode: int
    length: int
    explore: int
    m: int
    mode: str
    bandwidth: float = math.nan
    fit_ok: bool = False
    fallbacks: int = 0
    theta_hat: tuple = ()


class Policy:
    name = "policy"

    def next_price(self, x_tilde) -> PriceDecision:
        raise NotImplementedError

    def observe(self, y: int) -> None:
        raise NotImplementedError

    @property
    def episodes(self) -> list[EpisodeRecord]:
        return []


class EpisodicPolicy(Policy):
    """Shared explore-then-commit bookkeeping for the episodic policies.

    Subclasses decide the schedule of each episode (:meth:`_plan_episode`),
    fit at the end of exploration (:meth:`_fit`) and price the exploitation
    rounds (:meth:`_exploit`).
    """

    def __init__(self, d: int, price_cap: float, ell0: int, rng: np.random.Generator):
        if ell0 < 1:
            raise ValueError("ell0 must be >= 1")
        self.d = d
        self.price_cap = float(price_cap)
        self.ell0 = int(ell0)
        self.rng = rng
        self.theta_hat = np.zeros(d + 1)
        self._records: list[EpisodeRecord] = []
        self._xs: list[np.ndarray] = []
        self._ps: list[float] = []
        self._ys: list[float] = []
        self._pending: tuple | None = None
        self._start_episode(1)

    @property
    def episodes(self) -> list[EpisodeRecord]:
        return self._records

    @property
    def episode(self) -> int:
        return self._k

    @property
    def exploring(self) -> bool:
        return self._t < self._a

    def _plan_episode(self, k: int) -> tuple[str, int]:
        """Return ``(mode, m)`` for episode ``k``."""
        raise NotImplementedError

    def _start_episode(self, k: int) -> None:
        self._k = k
        self._t = 0
        mode, m = self._plan_episode(k)
        ell = self.ell0 * 2 ** (k - 1)
        self._ell = ell
        self._a = exploration_length(ell, self.d, mode, m)
        self._mode, self._m = mode, m
        self._xs, self._ps, self._ys = [], [], []
        self._records.append(EpisodeRecord(k, ell, self._a, m, mode))
        if self._a == 0:
            self._fit_batch()

    def batch(self) -> ExplorationBatch:
        x = np.array(self._xs).reshape(len(self._xs), self.d + 1)
        return ExplorationBatch(x, np.array(self._ps), np.array(self._ys))

    def next_price(self, x_tilde) -> PriceDecision:
        x_tilde = np.asarray(x_tilde, dtype=float)
        index = self._t
        if self.exploring:
            p = float(self.rng.uniform(0.0, self.price_cap))
            self._pending = (x_tilde, p, True)
            return PriceDecision(p, EXPLORATION, self._k, index)
        p, provenance = self._exploit(x_tilde)
        if provenance == FALLBACK:
            self._records[-1].fallbacks += 1
        self._pending = (x_tilde, p, False)
        return PriceDecision(p, provenance, self._k, index)

    def observe(self, y: int) -> None:
        if self._pending is None:
            raise RuntimeError("observe() called without a preceding next_price()")
        x_tilde, p, explored = self._pending
        self._pending = None
        if explored:
            self._xs.append(x_tilde)
            self._ps.append(p)
            self._ys.append(float(y))
        self._t += 1
        if explored and self._t == self._a:
            self._fit_batch()
        if self._t >= self._ell:
            self._start_episode(self._k + 1)

    def _fit_batch(self) -> None:
        record = self._records[-1]
        try:
            batch = self.batch()
            theta = fit_theta_ls(batch, self.price_cap)
        except InsufficientDataError:
            self._on_fit_failure()
            return
        self.theta_hat = theta.theta_hat
        record.theta_hat = tuple(float(v) for v in theta.theta_hat)
        record.fit_ok = self._fit(batch, theta)

    def _on_fit_failure(self) -> None:
        pass

    def _fit(self, batch: ExplorationBatch, theta: ThetaEstimate) -> bool:
        raise NotImplementedError

    def _exploit(self, x_tilde) -> tuple[float, str]:
        raise NotImplementedError

    def _clip(self, p: float) -> float:
        return min(max(p, 0.0), self.price_cap)


class SemiParametricPolicy(EpisodicPolicy):
    """Kernel-estimated link with three per-episode branches.

    ``finite``: order-m kernel, ``a_k = ceil((ell d)^((2m+1)/(4m-1)))``,
    bandwidth ``c_b |I_k|^(-1/(2m+1))``, price ``clip(g^(x~ . theta^))``.

    ``supersmooth``: flat-top kernel, ``a_k = ceil(sqrt(ell d))``, bandwidth
    ``c_kappa (d_phi / log |I_k|)^(1/alpha)``.

    ``lipschitz``: box kernel, ``a_k = ceil((ell d)^(3/4))``, bandwidth
    ``c_b |I_k|^(-1/3)``, price maximises ``p (1 - F^(p - u))`` on a grid.
    """

    name = "semi_param"

    def __init__(
        self,
        d: int,
        price_cap: float,
        rng: np.random.Generator,
        ell0: int = 200,
        m: int = 2,
        mode: str = "finite",
        c_b: float = 3.0,
        alpha: float = 1.0,
        d_phi: float = 1.0,
        c_kappa: float = 1.0,
        search_interval: Sequence[float] = DEFAULT_INTERVAL,
    ):
        if mode not in ("finite", "supersmooth", "lipschitz"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "finite" and (m < 2 or m % 2):
            raise ValueError("finite mode needs an even m >= 2")
        self.mode = mode
        self.m = m
        self.c_b = c_b
        self.alpha = alpha
        self.d_phi = d_phi
        self.c_kappa = c_kappa
        self.search_interval = tuple(search_interval)
        self.link: LinkEstimate | None = None
        super().__init__(d, price_cap, ell0, rng)

    def _plan_episode(self, k: int) -> tuple[str, int]:
        self.link = None
        return self.mode, (0 if self.mode == "lipschitz" else self.m)

    def kernel_and_bandwidth(self, mode: str, m: int, n: int):
        if mode == "finite":
            return build_order_m(m), self.c_b * n ** (-1.0 / (2 * m + 1))
        if mode == "supersmooth":
            return build_flat_top(self.c_kappa), self.c_kappa * (self.d_phi / math.log(max(n, 3))) ** (
                1.0 / self.alpha
            )
        return build_box(), self.c_b * n ** (-1.0 / 3.0)

    def _fit(self, batch: ExplorationBatch, theta: ThetaEstimate) -> bool:
        kernel, b = self.kernel_and_bandwidth(self._mode, self._m, batch.n)
        self._records[-1].bandwidth = b
        self.link = fit_link(batch, theta, kernel, b, self.price_cap, self.search_interval)
        return True

    def _exploit(self, x_tilde) -> tuple[float, str]:
        u = float(x_tilde @ self.theta_hat)
        if self.link is None:
            return self._clip(u), FALLBACK
        if self._mode == "lipschitz":
            return lipschitz_price(self.link, u, self.price_cap), EXPLOITATION
        price, failed = self.link.g_hat(u)
        return price, (FALLBACK if failed else EXPLOITATION)


def lipschitz_price(link: LinkEstimate, u: float, price_cap: float) -> float:
    """Maximise ``p (1 - F^(p - u))`` over ``[0, B]``: grid, then golden section."""
    grid = np.linspace(0.0, price_cap, LIPSCHITZ_GRID)
    rev = grid * (1.0 - np.asarray(link.cdf(grid - u)))
    i = int(np.argmax(rev))
    best_p, best_rev = float(grid[i]), float(rev[i])
    a = float(grid[max(i - 1, 0)])
    b = float(grid[min(i + 1, LIPSCHITZ_GRID - 1)])

    def objective(p):
        return p * (1.0 - link.cdf(p - u))

    c = b - _GOLDEN * (b - a)
    e = a + _GOLDEN * (b - a)
    fc, fe = objective(c), objective(e)
    for _ in range(40):
        if fc >= fe:
            b, e, fe = e, c, fc
            c = b - _GOLDEN * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, e, fe
            e = a + _GOLDEN * (b - a)
            fe = objective(e)
    for p, r in ((c, fc), (e, fe)):
        if r > best_rev:
            best_p, best_rev = p, r
    return best_p


def lipschitz_policy(d, price_cap, rng, ell0=200, c_b=3.0, **kw) -> SemiParametricPolicy:
    pol = SemiParametricPolicy(d, price_cap, rng, ell0=ell0, mode="lipschitz", c_b=c_b, **kw)
    pol.name = "lipschitz"
    return pol


class AdaptivePolicy(SemiParametricPolicy):
    """Chooses the smoothness order before each episode by cross-validation.

    Episode 1 uses ``m = 2``. Before episode ``k >= 2`` the previous
    exploration phase's residuals ``w_t(theta^_{k-1})`` and sales ``y_t`` are
    cross-validated over ``candidates x bandwidths``; ``m = 0`` selects the
    Lipschitz branch. A failed selection keeps the previous order.
    """

    name = "adaptive"

    def __init__(
        self,
        d: int,
        price_cap: float,
        rng: np.random.Generator,
        candidates: Sequence[int] = (0, 2, 4, 6),
        bandwidths: Sequence[float] | None = None,
        **kw,
    ):
        self.candidates = tuple(int(m) for m in candidates)
        self.bandwidths = tuple(bandwidths) if bandwidths is not None else default_bandwidths()
        self.m_history: list[int] = []
        self._m_hat = 2
        self._last_w: np.ndarray | None = None
        self._last_y: np.ndarray | None = None
        super().__init__(d, price_cap, rng, mode="finite", m=2, **kw)

    def _plan_episode(self, k: int) -> tuple[str, int]:
        self.link = None
        if k >= 2 and self._last_w is not None:
            try:
                self._m_hat = cross_validate_m(self._last_w, self._last_y, self.candidates, self.bandwidths).m_hat
            except SelectionError:
                pass
        self.m_history.append(self._m_hat)
        return ("lipschitz", 0) if self._m_hat == 0 else ("finite", self._m_hat)

    def _fit(self, batch, theta) -> bool:
        self._last_w = batch.residuals(theta.theta_hat)
        self._last_y = batch.y.copy()
        return super()._fit(batch, theta)


class GaussianPhi(PhiMap):
    """Virtual valuation of ``N(0, sigma^2)`` noise.

    ``phi(u) = u - sigma * M(u / sigma)`` with the Mills ratio
    ``M(z) = (1 - Phi(z)) / phi(z)``, so ``phi'(u) = 2 - z M(z)``.
    """

    def __init__(self, sigma: float, search_interval=DEFAULT_INTERVAL):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self.search_interval = tuple(search_interval)

    def _mills(self, z):
        return np.exp(stats.norm.logsf(z) - stats.norm.logpdf(z))

    def phi_many(self, xs):
        xs = np.asarray(xs, dtype=float)
        return xs - self.sigma * self._mills(xs / self.sigma)

    def phi_and_dphi(self, x):
        z = x / self.sigma
        mills = float(self._mills(z))
        return x - self.sigma * mills, 2.0 - z * mills


class RMLP2Policy(EpisodicPolicy):
    """Parametric-link baseline assuming Gaussian noise with known ``sigma``.

    Same episode schedule as the order-2 semi-parametric policy and the same
    least-squares ``theta^``; exploitation posts ``g_sigma(x~ . theta^)``.
    """

    name = "rmlp2"

    def __init__(self, d, price_cap, rng, ell0=200, sigma=0.25, search_interval=DEFAULT_INTERVAL):
        self.link = GaussianPhi(sigma, search_interval)
        self._fitted = False
        super().__init__(d, price_cap, ell0, rng)

    def _plan_episode(self, k):
        self._fitted = False
        return "finite", 2

    def _fit(self, batch, theta) -> bool:
        self._fitted = True
        return True

    def _exploit(self, x_tilde):
        u = float(x_tilde @ self.theta_hat)
        if not self._fitted:
            return self._clip(u), FALLBACK
        price, failed = g_from_phi(self.link, u, self.price_cap)
        return price, (FALLBACK if failed else EXPLOITATION)


def bandit_arm_count(horizon: int) -> int:
    """``ceil((T / log T)^(1/4))`` arms, natural log."""
    if horizon < 2:
        return 1
    return max(1, _ceil((horizon / math.log(horizon)) ** 0.25))


class KLBanditPolicy(Policy):
    """UCB1 over a uniform price grid; ignores covariates.

    Arm ``i`` posts ``B * i / K`` for ``i = 1..K``; rewards are ``p y / B``.
    """

    name = "kl_bandit"

    def __init__(self, price_cap: float, horizon: int):
        self.price_cap = float(price_cap)
        self.k = bandit_arm_count(horizon)
        self.prices = self.price_cap * np.arange(1, self.k + 1) / self.k
        self.pulls = np.zeros(self.k)
        self.reward_sum = np.zeros(self.k)
        self.t = 0
        self._arm: int | None = None

    def next_price(self, x_tilde) -> PriceDecision:
        if self.t < self.k:
            arm = self.t
            provenance = EXPLORATION
        else:
            means = self.reward_sum / self.pulls
            bonus = np.sqrt(2.0 * math.log(self.t) / self.pulls)
            arm = int(np.argmax(means + bonus))
            provenance = EXPLOITATION
        self._arm = arm
        return PriceDecision(float(self.prices[arm]), provenance, 0, self.t)

    def observe(self, y: int) -> None:
        arm = self._arm
        self.pulls[arm] += 1
        self.reward_sum[arm] += self.prices[arm] * y / self.price_cap
        self.t += 1
        self._arm = None


class OraclePolicy(Policy):
    """Posts the true revenue-maximising price (test and reference use only)."""

    name = "oracle"

    def __init__(self, env: MarketEnv):
        self.env = env
        self.t = 0

    def next_price(self, x_tilde) -> PriceDecision:
        u = float(np.asarray(x_tilde, dtype=float) @ self.env.theta0)
        return PriceDecision(float(self.env.oracle_prices(u)[0]), EXPLOITATION, 0, self.t)

    def observe(self, y: int) -> None:
        self.t += 1


def semi_param_policy(d, price_cap, rng, **kw) -> SemiParametricPolicy:
    return SemiParametricPolicy(d, price_cap, rng, **kw)


def adaptive_policy(d, price_cap, rng, **kw) -> AdaptivePolicy:
    return AdaptivePolicy(d, price_cap, rng, **kw)


def rmlp2_policy(d, price_cap, rng, **kw) -> RMLP2Policy:
    return RMLP2Policy(d, price_cap, rng, **kw)


def kl_bandit_policy(price_cap, horizon) -> KLBanditPolicy:
    return KLBanditPolicy(price_cap, horizon)


def oracle_policy(env: MarketEnv) -> OraclePolicy:
    return OraclePolicy(env)
