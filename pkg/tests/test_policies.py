from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from semiprice import policies as P
from semiprice.env import (
    default_env,
    iid_independent,
    oracle_price,
    sample_covariates,
    sample_noise_batch,
    trunc_poly_noise,
    uniform_noise,
)
from semiprice.estimation import ExplorationBatch, cross_validate_m, default_bandwidths, fit_theta_ls
from semiprice.harness import market_path
from semiprice.rng import stream


def drive(policy, env, horizon, seed):
    """Run ``policy`` on the seeded market and return its decisions."""
    path = market_path(env, horizon, seed)
    out = []
    for t in range(horizon):
        dec = policy.next_price(path.x_tilde[t])
        policy.observe(int(path.v[t] >= dec.price))
        out.append(dec)
    return out


# --- schedule ---------------------------------------------------------------


def test_first_two_exploration_lengths_order_two():
    # oracle: direct evaluation of the exponent formula
    assert math.ceil(600 ** (5 / 7)) == 97
    assert math.ceil(1200 ** (5 / 7)) == 159
    sched = P.EpisodeSchedule(200, 3, "finite", 2)
    assert (sched.exploration(1), sched.exploration(2)) == (97, 159)


def test_supersmooth_and_lipschitz_first_lengths():
    assert P.EpisodeSchedule(200, 3, "supersmooth").exploration(1) == math.ceil(math.sqrt(600)) == 25
    assert P.EpisodeSchedule(200, 3, "lipschitz").exploration(1) == math.ceil(600**0.75) == 122


def test_exploration_capped_at_episode_length():
    # (1 * 3)^(5/7) > 1 would exceed ell = 1
    assert P.exploration_length(1, 3, "finite", 2) == 1
    assert P.exploration_length(2, 50, "lipschitz") == 2


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 500),
    st.integers(1, 8),
    st.sampled_from([("finite", 2), ("finite", 4), ("finite", 6), ("supersmooth", 2), ("lipschitz", 0)]),
    st.integers(1, 8),
)
def test_exploration_never_exceeds_length(ell0, d, mode_m, k):
    mode, m = mode_m
    sched = P.EpisodeSchedule(ell0, d, mode, m)
    assert 1 <= sched.exploration(k) <= sched.length(k)


@pytest.mark.parametrize("m", [2, 4, 6])
def test_schedule_ratio_law(m):
    sched = P.EpisodeSchedule(200, 3, "finite", m)
    rate = 2 ** ((2 * m + 1) / (4 * m - 1))
    for k in range(1, 7):
        a, b = sched.exploration(k), sched.exploration(k + 1)
        assert abs(b - rate * a) <= rate + 1


def test_unknown_schedule_mode_rejected():
    with pytest.raises(ValueError):
        P.exploration_length(10, 3, "bogus")


# --- semi-parametric policy ----------------------------------------------------


@pytest.fixture(scope="module")
def env():
    return default_env()


@pytest.fixture(scope="module")
def semi_run(env):
    pol = P.semi_param_policy(3, 6.0, stream(11, "policy"), m=2)
    return pol, drive(pol, env, 1400, 11)


def test_phase_accounting(semi_run):
    pol, decisions = semi_run
    # 1400 = 200 + 400 + 800 covers episodes 1..3 exactly
    for k, rec in enumerate(pol.episodes[:3], start=1):
        mine = [d for d in decisions if d.episode == k]
        assert len(mine) == rec.length == 200 * 2 ** (k - 1)
        n_explore = sum(d.provenance == P.EXPLORATION for d in mine)
        assert n_explore == rec.explore == P.EpisodeSchedule(200, 3).exploration(k)
        # exploration comes first, then the committed phase
        assert all(d.provenance == P.EXPLORATION for d in mine[:n_explore])
        assert all(d.provenance != P.EXPLORATION for d in mine[n_explore:])
        assert [d.index for d in mine] == list(range(rec.length))


def test_prices_within_cap(semi_run):
    _, decisions = semi_run
    prices = np.array([d.price for d in decisions])
    assert prices.min() >= 0.0 and prices.max() <= 6.0


def test_policy_is_deterministic(env, semi_run):
    _, decisions = semi_run
    again = drive(P.semi_param_policy(3, 6.0, stream(11, "policy"), m=2), env, 1400, 11)
    assert again == decisions


def test_link_fixed_within_exploitation(env):
    pol = P.semi_param_policy(3, 6.0, stream(2, "policy"), m=2)
    path = market_path(env, 600, 2)
    seen: dict[int, set] = {}
    for t in range(600):
        dec = pol.next_price(path.x_tilde[t])
        if dec.provenance != P.EXPLORATION:
            seen.setdefault(dec.episode, set()).add(id(pol.link))
            assert pol.link is not None
        pol.observe(int(path.v[t] >= dec.price))
    assert set(seen) == {1, 2}
    assert all(len(ids) == 1 for ids in seen.values())


def test_observe_without_price_raises():
    pol = P.semi_param_policy(3, 6.0, np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        pol.observe(1)


@pytest.mark.parametrize("m", [0, 3, 1])
def test_semi_param_rejects_bad_order(m):
    with pytest.raises(ValueError):
        P.semi_param_policy(3, 6.0, np.random.default_rng(0), m=m)


def test_finite_bandwidth_rule():
    pol = P.semi_param_policy(3, 6.0, np.random.default_rng(0), m=4, c_b=3.0)
    _, b = pol.kernel_and_bandwidth("finite", 4, 500)
    assert b == pytest.approx(3.0 * 500 ** (-1 / 9), rel=1e-14)


def test_supersmooth_bandwidth_rule():
    pol = P.semi_param_policy(3, 6.0, np.random.default_rng(0), mode="supersmooth", alpha=2.0, d_phi=1.5, c_kappa=0.8)
    kernel, b = pol.kernel_and_bandwidth("supersmooth", 2, 400)
    assert kernel.kind == "flat_top"
    assert b == pytest.approx(0.8 * (1.5 / math.log(400)) ** 0.5, rel=1e-14)


# --- lipschitz --------------------------------------------------------------------


def test_lipschitz_zero_cdf_prices_at_cap():
    link = SimpleNamespace(cdf=lambda x: np.zeros_like(np.asarray(x, dtype=float)))
    assert P.lipschitz_price(link, 1.0, 6.0) == 6.0


def test_lipschitz_true_uniform_cdf_matches_closed_form():
    # revenue p (1 - (p - u + 1/2)) on the support peaks at p = (u + 1/2) / 2
    noise = uniform_noise()
    link = SimpleNamespace(cdf=noise.cdf)
    cell = 6.0 / (P.LIPSCHITZ_GRID - 1)
    assert abs(P.lipschitz_price(link, 1.0, 6.0) - 0.75) <= cell


def test_lipschitz_policy_schedule_and_kernel():
    pol = P.lipschitz_policy(3, 6.0, np.random.default_rng(0))
    assert pol.episodes[0].explore == 122
    assert pol.episodes[0].mode == "lipschitz"
    kernel, b = pol.kernel_and_bandwidth("lipschitz", 0, 1000)
    assert kernel.kind == "box" and b == pytest.approx(0.3, rel=1e-12)


# --- adaptive --------------------------------------------------------------------


def test_adaptive_first_episode_uses_order_two(env):
    pol = P.adaptive_policy(3, 6.0, np.random.default_rng(0))
    assert pol.m_history == [2]
    assert pol.episodes[0].explore == 97


def test_adaptive_singleton_candidates_match_semi_param(env):
    a = P.adaptive_policy(3, 6.0, stream(4, "policy"), candidates=(2,))
    s = P.semi_param_policy(3, 6.0, stream(4, "policy"), m=2)
    assert drive(a, env, 700, 4) == drive(s, env, 700, 4)
    assert a.m_history == [2, 2, 2]


def _cv_sample(seed: int, n: int = 2000):
    env = default_env(noise=trunc_poly_noise(6), covariates=iid_independent(3, 6))
    rng = np.random.default_rng(seed)
    x_tilde = env.augment(sample_covariates(env.covariates, n, rng))
    v = x_tilde @ env.theta0 + sample_noise_batch(env.noise, n, rng)
    p = rng.uniform(0.0, env.price_cap, n)
    batch = ExplorationBatch(x_tilde, p, (v >= p).astype(float))
    theta = fit_theta_ls(batch, env.price_cap)
    return batch.residuals(theta.theta_hat), batch.y


@pytest.mark.slow
def test_adaptive_cv_prefers_smooth_orders_on_smooth_data():
    picks = [cross_validate_m(*_cv_sample(s), (0, 2, 4, 6), default_bandwidths()).m_hat for s in range(10)]
    assert sum(m >= 2 for m in picks) >= 8, picks


# --- rmlp2 ------------------------------------------------------------------------


def test_gaussian_phi_at_zero():
    assert P.GaussianPhi(1.0).phi(0.0) == pytest.approx(-math.sqrt(math.pi / 2), abs=1e-12)
    assert -math.sqrt(math.pi / 2) == pytest.approx(-1.2533, abs=1e-4)


def test_gaussian_phi_matches_scipy_formula():
    sigma = 0.25
    xs = np.linspace(-1.0, 1.0, 41)
    ref = xs - sigma * stats.norm.sf(xs / sigma) / stats.norm.pdf(xs / sigma)
    np.testing.assert_allclose(P.GaussianPhi(sigma).phi_many(xs), ref, rtol=1e-12, atol=1e-12)


def test_gaussian_phi_monotone():
    sigma = 0.25
    xs = np.linspace(-4 * sigma, 4 * sigma, 2001)
    assert np.all(np.diff(P.GaussianPhi(sigma).phi_many(xs)) > 0)


def test_gaussian_phi_derivative_by_finite_difference():
    phi = P.GaussianPhi(0.4)
    for x in (-0.8, -0.1, 0.0, 0.5, 1.2):
        h = 1e-6
        fd = (phi.phi(x + h) - phi.phi(x - h)) / (2 * h)
        assert phi.phi_and_dphi(x)[1] == pytest.approx(fd, abs=1e-6)


def test_gaussian_phi_rejects_bad_sigma():
    with pytest.raises(ValueError):
        P.GaussianPhi(0.0)


def _gaussian_revenue(p, u, sigma):
    return p * stats.norm.sf((p - u) / sigma)


def _gaussian_oracle(u, sigma, cap=6.0):
    # independent oracle: bounded scalar search on the true Gaussian revenue
    res = optimize.minimize_scalar(
        lambda p: -_gaussian_revenue(p, u, sigma), bounds=(0.0, cap), method="bounded", options={"xatol": 1e-10}
    )
    return res.x


def test_rmlp_matched_scale_beats_misspecified_on_gaussian_market():
    # Gaussian market with sigma0 = 0.25; the committed price is evaluated at
    # the true index so only the link differs between the two configurations.
    sigma0, theta0 = 0.25, np.append(np.full(3, math.sqrt(2 / 3)), 3.0)
    matched, wrong = P.GaussianPhi(sigma0), P.GaussianPhi(1.0)
    wins = 0
    for seed in range(10):
        x = sample_covariates(iid_independent(3, 2), 40, np.random.default_rng(seed))
        u = np.c_[x, np.ones(len(x))] @ theta0
        regret = {}
        for name, link in (("matched", matched), ("wrong", wrong)):
            r = []
            for ui in u:
                p_star = _gaussian_oracle(ui, sigma0)
                price, _ = P.g_from_phi(link, float(ui), 6.0)
                r.append(_gaussian_revenue(p_star, ui, sigma0) - _gaussian_revenue(price, ui, sigma0))
            regret[name] = np.mean(r)
        assert regret["matched"] >= -1e-9
        wins += regret["matched"] < regret["wrong"]
    assert wins >= 8


# --- kl bandit --------------------------------------------------------------------


def test_arm_count_at_twelve_thousand():
    expected = math.ceil((12000 / math.log(12000)) ** 0.25)
    assert P.bandit_arm_count(12000) == expected == 6


def test_first_rounds_play_arms_in_order():
    pol = P.kl_bandit_policy(6.0, 12000)
    played = []
    for _ in range(pol.k):
        dec = pol.next_price(None)
        played.append(dec.price)
        pol.observe(0)
    np.testing.assert_allclose(played, 6.0 * np.arange(1, pol.k + 1) / pol.k)


def test_bandit_concentrates_on_best_arm():
    env = default_env(beta0=np.zeros(3))
    horizon = 50_000
    pol = P.kl_bandit_policy(6.0, horizon)
    rev = env.revenue_at(np.full(pol.k, 3.0), pol.prices)
    best = int(np.argmax(rev))
    assert pol.prices[best] == pytest.approx(8 / 3)
    z = sample_noise_batch(env.noise, horizon, np.random.default_rng(5))
    for t in range(horizon):
        dec = pol.next_price(None)
        pol.observe(int(3.0 + z[t] >= dec.price))
    assert pol.pulls[best] / horizon >= 0.8


# --- oracle -----------------------------------------------------------------------


def test_oracle_policy_posts_oracle_price(env):
    pol = P.oracle_policy(env)
    path = market_path(env, 50, 3)
    for t in range(50):
        p = pol.next_price(path.x_tilde[t]).price
        assert p == oracle_price(env, path.x_tilde[t])
        assert p == pytest.approx(path.oracle_price[t], abs=1e-12)
        pol.observe(1)


def test_oracle_uniform_closed_form_interior():
    # interior optimum (u + 1/2) / 2 lies in the support when -1/2 <= u <= 3/2
    env = default_env(noise=uniform_noise(), alpha0=0.5)
    pol = P.oracle_policy(env)
    path = market_path(env, 200, 8)
    assert np.all((path.u > -0.5) & (path.u < 1.5))
    for t in range(200):
        p = pol.next_price(path.x_tilde[t]).price
        assert p == pytest.approx(path.u[t] / 2 + 0.25, abs=1e-9)
        pol.observe(0)


def test_oracle_uniform_kink_regime():
    # above u = 3/2 the revenue peaks at the lower support edge u - 1/2
    env = default_env(noise=uniform_noise())
    path = market_path(env, 200, 8)
    assert np.all(path.u > 1.5)
    np.testing.assert_allclose(path.oracle_price, path.u - 0.5, atol=1e-9)
