"""Trajectories, replication over seeds, summary statistics and slope fits.

Per replication seed ``s`` the market path (covariates, noise, oracle prices)
is drawn once from the ``covariates`` and ``noise`` streams and shared by all
policies, so policy comparisons are paired. Every policy receives its own
generator on the ``policy`` stream of the same seed.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import (
    PolicyConfig,
    RunConfig,
    benchmark_slope,
    build_env,
    build_policy,
    default_log_power,
)
from .env import MarketEnv, sample_covariates, sample_noise_batch
from .policies import EXPLORATION, FALLBACK, Policy
from .rng import stream

REGRET_TOL = 1e-9

REPLICATION_COLUMNS = (
    "policy", "rep", "checkpoint", "episode", "phase", "price", "oracle_price",
    "exp_regret_cum", "real_regret_cum", "fallback_count",
)
SUMMARY_COLUMNS = ("policy", "checkpoint", "mean", "stderr", "reg_tilde", "slope", "benchmark", "log_power")
EPISODE_COLUMNS = ("policy", "rep", "episode", "start", "length", "explore", "m", "mode", "bandwidth", "fit_ok", "fallbacks")


@dataclass(frozen=True)
class MarketPath:
    """Pre-drawn market randomness for one replication."""

    x_tilde: np.ndarray
    u: np.ndarray
    z: np.ndarray
    oracle_price: np.ndarray
    oracle_revenue: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.u + self.z

    @property
    def horizon(self) -> int:
        return len(self.u)


def market_path(env: MarketEnv, horizon: int, seed: int) -> MarketPath:
    x = sample_covariates(env.covariates, horizon, stream(seed, "covariates"))
    x_tilde = env.augment(x)
    z = sample_noise_batch(env.noise, horizon, stream(seed, "noise"))
    u = x_tilde @ env.theta0
    p_star = env.oracle_prices(u)
    return MarketPath(x_tilde, u, z, p_star, env.revenue_at(u, p_star))


@dataclass
class RegretTrace:
    """Per-step record of one policy run."""

    episode: np.ndarray
    provenance: list[str]
    price: np.ndarray
    oracle_price: np.ndarray
    y: np.ndarray
    exp_regret: np.ndarray
    real_regret: np.ndarray
    v: np.ndarray
    episodes: list = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.price)

    @property
    def phase(self) -> np.ndarray:
        return np.array([EXPLORATION if p == EXPLORATION else "exploitation" for p in self.provenance])

    @property
    def fallback(self) -> np.ndarray:
        return np.array([p == FALLBACK for p in self.provenance])

    @property
    def exploration_steps(self) -> int:
        return sum(p == EXPLORATION for p in self.provenance)

    @property
    def cum_expected(self) -> np.ndarray:
        return np.cumsum(self.exp_regret)

    @property
    def cum_realized(self) -> np.ndarray:
        return np.cumsum(self.real_regret)

    @property
    def cum_fallbacks(self) -> np.ndarray:
        return np.cumsum(self.fallback)

    @property
    def value_range(self) -> tuple[float, float]:
        """Observed range of ``v_t``; a diagnostic for the support assumption."""
        return float(self.v.min()), float(self.v.max())


def run_trajectory(
    env: MarketEnv, policy: Policy, horizon: int, seed: int, path: MarketPath | None = None
) -> RegretTrace:
    """Run ``policy`` for ``horizon`` steps on the market drawn from ``seed``."""
    if path is None:
        path = market_path(env, horizon, seed)
    elif path.horizon < horizon:
        raise ValueError("market path shorter than horizon")
    v = path.v[:horizon]
    price = np.empty(horizon)
    episode = np.empty(horizon, dtype=int)
    y = np.empty(horizon, dtype=int)
    provenance: list[str] = []
    for t in range(horizon):
        dec = policy.next_price(path.x_tilde[t])
        sale = int(v[t] >= dec.price)
        policy.observe(sale)
        price[t] = dec.price
        episode[t] = dec.episode
        y[t] = sale
        provenance.append(dec.provenance)
    u = path.u[:horizon]
    p_star = path.oracle_price[:horizon]
    exp_regret = path.oracle_revenue[:horizon] - env.revenue_at(u, price)
    real_regret = p_star * (v >= p_star) - price * y
    return RegretTrace(
        episode=episode,
        provenance=provenance,
        price=price,
        oracle_price=p_star.copy(),
        y=y,
        exp_regret=exp_regret,
        real_regret=real_regret,
        v=v.copy(),
        episodes=_episodes_within(policy, horizon),
    )


def _episodes_within(policy: Policy, horizon: int) -> list:
    out, start = [], 1
    for rec in policy.episodes:
        if start > horizon:
            break
        out.append((start, rec))
        start += rec.length
    return out


# --- statistics -----------------------------------------------------------


def reg_tilde(checkpoints: Sequence[int], regret: Sequence[float], log_power: float = 2.0) -> np.ndarray:
    """``log reg(T) - p log log T`` shifted so the first checkpoint is zero.

    Entries are nan where ``log log T`` is undefined or the regret is
    indistinguishable from zero (below ``REGRET_TOL`` per step).
    """
    vals = [
        math.log(r) - log_power * math.log(math.log(t)) if r > REGRET_TOL * t and t > 1 else math.nan
        for t, r in zip(checkpoints, regret)
    ]
    arr = np.array(vals, dtype=float)
    return arr - arr[0] if len(arr) else arr


def slope_from_tilde(checkpoints: Sequence[int], tilde: Sequence[float]) -> float:
    """OLS slope of transformed regret against ``log T - log T_1``."""
    if len(checkpoints) < 2:
        raise ValueError("slope fit needs at least two checkpoints")
    x = np.log(np.asarray(checkpoints, dtype=float))
    x = x - x[0]
    y = np.asarray(tilde, dtype=float)
    if np.ptp(x) == 0:
        raise ValueError("degenerate checkpoints: all abscissae equal")
    if not np.all(np.isfinite(y)):
        return math.nan
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def slope_fit(checkpoints: Sequence[int], regret: Sequence[float], log_power: float = 2.0) -> float:
    return slope_from_tilde(checkpoints, reg_tilde(checkpoints, regret, log_power))


@dataclass(frozen=True)
class SummaryRow:
    policy: str
    checkpoint: int
    mean: float
    stderr: float
    reg_tilde: float
    slope: float
    benchmark: float
    log_power: float


@dataclass(frozen=True)
class SummaryStats:
    rows: tuple[SummaryRow, ...]

    def policies(self) -> list[str]:
        return sorted({r.policy for r in self.rows})

    def for_policy(self, policy: str) -> list[SummaryRow]:
        return [r for r in self.rows if r.policy == policy]

    def slope(self, policy: str) -> float:
        rows = self.for_policy(policy)
        return rows[0].slope if rows else math.nan

    def mean(self, policy: str, checkpoint: int) -> float:
        return next(r.mean for r in self.rows if r.policy == policy and r.checkpoint == checkpoint)


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("no values")
    mean = float(math.fsum(arr) / arr.size)
    if arr.size == 1:
        return mean, 0.0
    return mean, float(np.std(arr, ddof=1) / math.sqrt(arr.size))


def summarize_policy(
    policy: str,
    checkpoints: Sequence[int],
    per_rep: dict[int, Sequence[float]],
    log_power: float = 2.0,
    benchmark: float | None = None,
) -> list[SummaryRow]:
    """Aggregate per-replication checkpoint regrets for one policy.

    ``per_rep`` maps replication index to its cumulative regrets at the
    checkpoints; iteration is by sorted index so completion order is moot.
    """
    reps = sorted(per_rep)
    table = np.array([per_rep[r] for r in reps], dtype=float).reshape(len(reps), len(checkpoints))
    stats = [mean_stderr(table[:, j]) for j in range(len(checkpoints))]
    means = [s[0] for s in stats]
    tilde = reg_tilde(checkpoints, means, log_power)
    slope = slope_from_tilde(checkpoints, tilde) if len(checkpoints) >= 2 else math.nan
    bench = math.nan if benchmark is None else float(benchmark)
    return [
        SummaryRow(policy, int(c), m, se, float(rt), slope, bench, float(log_power))
        for c, (m, se), rt in zip(checkpoints, stats, tilde)
    ]


# --- replication ----------------------------------------------------------


@dataclass(frozen=True)
class ReplicationResult:
    rows: tuple[tuple, ...]
    episode_rows: tuple[tuple, ...]
    summary: SummaryStats


def _checkpoint_rows(label: str, rep: int, trace: RegretTrace, checkpoints: Sequence[int]) -> list[tuple]:
    cum_e, cum_r, cum_f = trace.cum_expected, trace.cum_realized, trace.cum_fallbacks
    phase = trace.phase
    rows = []
    for c in checkpoints:
        i = c - 1
        rows.append((
            label, rep, int(c), int(trace.episode[i]), str(phase[i]), float(trace.price[i]),
            float(trace.oracle_price[i]), float(cum_e[i]), float(cum_r[i]), int(cum_f[i]),
        ))
    return rows


def _episode_rows(label: str, rep: int, trace: RegretTrace) -> list[tuple]:
    return [
        (label, rep, rec.episode, start, rec.length, rec.explore, rec.m, rec.mode,
         float(rec.bandwidth), bool(rec.fit_ok), rec.fallbacks)
        for start, rec in trace.episodes
    ]


def run_replication(cfg: RunConfig, rep: int) -> tuple[list[tuple], list[tuple]]:
    """All configured policies on the market of replication ``rep`` (1-based)."""
    env = build_env(cfg)
    seed = cfg.seed + rep
    path = market_path(env, cfg.horizon, seed)
    rows, eps = [], []
    for spec in cfg.policies:
        policy = build_policy(spec, env, stream(seed, "policy"), cfg.horizon)
        trace = run_trajectory(env, policy, cfg.horizon, seed, path)
        rows += _checkpoint_rows(spec.label, rep, trace, cfg.checkpoints)
        eps += _episode_rows(spec.label, rep, trace)
    return rows, eps


def _run_replication_json(cfg_json: str, rep: int):
    return run_replication(RunConfig.model_validate_json(cfg_json), rep)


def resolve_workers(requested: int | None, reps: int) -> int:
    cap = os.cpu_count() or 1
    env_cap = os.environ.get("SEMIPRICE_THREADS")
    if env_cap:
        try:
            cap = max(1, int(env_cap))
        except ValueError:
            pass
    n = cap if requested is None else min(requested, cap)
    return max(1, min(n, reps))


def policy_log_power(cfg: RunConfig, spec: PolicyConfig) -> float:
    return cfg.log_power if cfg.log_power is not None else default_log_power(spec)


def replicate(cfg: RunConfig, workers: int | None = None) -> ReplicationResult:
    """Run replications ``1..R`` (seeds ``base+1..base+R``) and aggregate."""
    reps = list(range(1, cfg.replications + 1))
    n_workers = resolve_workers(workers if workers is not None else cfg.workers, len(reps))
    if n_workers == 1:
        results = {r: run_replication(cfg, r) for r in reps}
    else:
        cfg_json = cfg.model_dump_json()
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = {r: pool.submit(_run_replication_json, cfg_json, r) for r in reps}
            results = {r: f.result() for r, f in futures.items()}
    rows = sorted((row for r in reps for row in results[r][0]), key=lambda x: (x[0], x[1], x[2]))
    ep_rows = sorted((row for r in reps for row in results[r][1]), key=lambda x: (x[0], x[1], x[2]))
    return ReplicationResult(tuple(rows), tuple(ep_rows), summarize(cfg, rows))


def summarize(cfg: RunConfig, rows: Sequence[tuple]) -> SummaryStats:
    out: list[SummaryRow] = []
    for spec in sorted(cfg.policies, key=lambda s: s.label):
        per_rep: dict[int, list[float]] = {}
        for row in rows:
            if row[0] == spec.label:
                per_rep.setdefault(row[1], []).append(row[7])
        out += summarize_policy(
            spec.label, cfg.checkpoints, per_rep, policy_log_power(cfg, spec), benchmark_slope(spec)
        )
    return SummaryStats(tuple(out))


# --- persistence ----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(columns: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def summary_csv(stats: SummaryStats) -> str:
    rows = sorted(
        ((r.policy, r.checkpoint, r.mean, r.stderr, r.reg_tilde, r.slope, r.benchmark, r.log_power) for r in stats.rows),
        key=lambda x: (x[0], x[1]),
    )
    return _csv_text(SUMMARY_COLUMNS, rows)


def write_outputs(result: ReplicationResult, cfg: RunConfig, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "replications": (out / "replications.csv", _csv_text(REPLICATION_COLUMNS, result.rows)),
        "summary": (out / "summary.csv", summary_csv(result.summary)),
        "episodes": (out / "episodes.csv", _csv_text(EPISODE_COLUMNS, result.episode_rows)),
        "config": (out / "config.resolved.json", cfg.resolved_json()),
    }
    for path, text in files.values():
        path.write_text(text)
    return {k: v[0] for k, v in files.items()}


def read_summary(path: str | Path) -> SummaryStats:
    """Parse a ``summary.csv`` written by :func:`write_outputs`."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SUMMARY_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        rows = tuple(
            SummaryRow(
                r["policy"], int(r["checkpoint"]), float(r["mean"]), float(r["stderr"]),
                float(r["reg_tilde"]), float(r["slope"]), float(r["benchmark"]), float(r["log_power"]),
            )
            for r in reader
        )
    return SummaryStats(rows)
