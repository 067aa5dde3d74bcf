"""Command-line front end: ``semiprice {simulate,compare,kernel-check,slope,plot}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from html import escape
from pathlib import Path
from typing import Sequence

from . import kernels
from .config import RunConfig, parse_config
from .errors import ConfigError
from .harness import SummaryStats, read_summary, replicate, slope_from_tilde, write_outputs

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

COMPARE_POLICIES = ("semi_param", "adaptive", "rmlp2", "kl_bandit")


class CliError(Exception):
    """Runtime failure reported with exit status 1."""


# --- config loading -------------------------------------------------------


def _read_json(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _select_policies(data: dict, names: Sequence[str]) -> list[dict]:
    known = {p.get("label") or p.get("name"): p for p in data.get("policies", []) if isinstance(p, dict)}
    by_name = {}
    for p in data.get("policies", []):
        if isinstance(p, dict):
            by_name.setdefault(p.get("name"), p)
    return [known.get(n) or by_name.get(n) or {"name": n} for n in names]


def resolve_config(args: argparse.Namespace, policies: Sequence[str] | None = None) -> RunConfig:
    data = _read_json(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.reps is not None:
        data["replications"] = args.reps
    if args.horizon is not None:
        data["horizon"] = args.horizon
        if isinstance(data.get("checkpoints"), list):
            kept = [c for c in data["checkpoints"] if isinstance(c, int) and c <= args.horizon]
            data["checkpoints"] = kept or [args.horizon]
    names = policies
    if args.policies:
        names = [n.strip() for n in args.policies.split(",") if n.strip()]
    if names is not None:
        data["policies"] = _select_policies(data, names)
    if getattr(args, "workers", None) is not None:
        data["workers"] = args.workers
    return parse_config(data)


# --- commands -------------------------------------------------------------


def _run(cfg: RunConfig, out: str) -> SummaryStats:
    if not cfg.policies:
        raise CliError("empty policy list: nothing to simulate")
    result = replicate(cfg)
    write_outputs(result, cfg, out)
    return result.summary


def _print_summary(stats: SummaryStats, stream) -> None:
    print(f"{'policy':<14}{'T':>8}{'mean':>14}{'stderr':>12}{'reg_tilde':>12}", file=stream)
    for r in sorted(stats.rows, key=lambda r: (r.policy, r.checkpoint)):
        print(f"{r.policy:<14}{r.checkpoint:>8}{r.mean:>14.4f}{r.stderr:>12.4f}{r.reg_tilde:>12.4f}", file=stream)
    for p in stats.policies():
        print(f"slope[{p}] = {stats.slope(p):.4f}", file=stream)


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    stats = _run(cfg, args.out)
    _print_summary(stats, sys.stdout)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = resolve_config(args, policies=COMPARE_POLICIES)
    stats = _run(cfg, args.out)
    last = cfg.checkpoints[-1]
    print(f"cumulative expected regret at T={last} (R={cfg.replications}, shared seeds)")
    for p in stats.policies():
        row = next(r for r in stats.for_policy(p) if r.checkpoint == last)
        print(f"  {p:<12}{row.mean:>12.3f} +/- {row.stderr:.3f}")
    return EXIT_OK


def kernel_report(orders: Sequence[int], c_kappa: float, tol: float = 1e-8) -> tuple[list[tuple], bool]:
    """Rows ``(label, mass, max |moment j|, ok)`` and an overall pass flag."""
    rows, ok = [], True
    for m in orders:
        spec = kernels.build_order_m(m)
        rep = kernels.check_moments(spec, m)
        worst = max((abs(v) for v in rep.moments[1:m]), default=0.0)
        passed = rep.ok(tol)
        ok &= passed
        rows.append((spec.label, rep.moments[0], worst, "ok" if passed else "FAIL"))
    flat = kernels.build_flat_top(c_kappa)
    mass = kernels.check_moments(flat, 0).moments[0]
    flat_ok = abs(mass - 1.0) <= 1e-4
    ok &= flat_ok
    rows.append((flat.label, mass, math.nan, "ok" if flat_ok else "FAIL"))
    rows.append(("K2 printed constant 35/12", kernels.polynomial_mass(kernels.PRINTED_K2_COEFFS), math.nan, "info"))
    return rows, ok


def cmd_kernel_check(args) -> int:
    try:
        orders = [int(v) for v in args.orders.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--orders must be a comma-separated list of integers, got {args.orders!r}") from None
    try:
        rows, ok = kernel_report(orders, args.flat_top_c)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"{'kernel':<28}{'mass':>20}{'max|moment j|':>16}  status")
    for label, mass, worst, status in rows:
        w = "-" if math.isnan(worst) else f"{worst:.3e}"
        print(f"{label:<28}{mass:>20.12f}{w:>16}  {status}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _load_summary(path: str) -> SummaryStats:
    try:
        return read_summary(path)
    except FileNotFoundError:
        raise CliError(f"summary not found: {path}") from None
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read summary {path}: {exc}") from None


def refit_slopes(stats: SummaryStats) -> dict[str, float]:
    out = {}
    for p in stats.policies():
        rows = sorted(stats.for_policy(p), key=lambda r: r.checkpoint)
        cps = [r.checkpoint for r in rows]
        out[p] = slope_from_tilde(cps, [r.reg_tilde for r in rows]) if len(cps) >= 2 else math.nan
    return out


def cmd_slope(args) -> int:
    stats = _load_summary(args.summary)
    if not stats.rows:
        raise CliError("summary has no policies")
    slopes = refit_slopes(stats)
    for p, s in slopes.items():
        if args.policy and p != args.policy:
            continue
        print(f"{p},{s!r}")
    if args.policy and args.policy not in slopes:
        raise CliError(f"policy {args.policy!r} not in summary")
    return EXIT_OK


def cmd_plot(args) -> int:
    stats = _load_summary(args.summary)
    if not stats.policies():
        raise CliError("summary has no policies to plot")
    out = Path(args.out) if args.out else Path(args.summary).with_suffix(".svg")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(stats, m=args.m))
    print(out)
    return EXIT_OK


# --- SVG ------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
_W, _H, _PAD = 640, 420, 60


def benchmark_for(m: int) -> float:
    return (2 * m + 1) / (4 * m - 1)


def render_svg(stats: SummaryStats, m: int | None = None) -> str:
    """Plot of reg~(T) against log T, one line per policy.

    Each line carries a band of +/- one standard error (delta method on the
    log scale). A dashed benchmark line through the first point has slope
    ``(2m+1)/(4m-1)`` when ``m`` is given, else the benchmark stored in the
    summary. With a single checkpoint only points are drawn.
    """
    series = {}
    for p in stats.policies():
        rows = sorted(stats.for_policy(p), key=lambda r: r.checkpoint)
        pts = [
            (math.log(r.checkpoint), r.reg_tilde, r.stderr / r.mean if r.mean > 0 else 0.0)
            for r in rows
            if math.isfinite(r.reg_tilde)
        ]
        if pts:
            series[p] = (pts, rows[0].benchmark)
    all_pts = [pt for pts, _ in series.values() for pt in pts]
    xs = [p[0] for p in all_pts] or [0.0, 1.0]
    ys = [v for p in all_pts for v in (p[1] - p[2], p[1] + p[2])] or [0.0, 1.0]
    single = len({round(x, 12) for x in xs}) < 2
    bench = benchmark_for(m) if m is not None else next(
        (b for _, b in series.values() if math.isfinite(b)), None
    )
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if bench is not None and not single:
        ys += [0.0, bench * (x1 - x0)]
    y0, y1 = min(ys), max(ys)
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad_y = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad_y, y1 + pad_y

    def sx(x):
        return _PAD + (x - x0) / (x1 - x0) * (_W - 2 * _PAD)

    def sy(y):
        return _H - _PAD - (y - y0) / (y1 - y0) * (_H - 2 * _PAD)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<text x="{_W / 2:.1f}" y="{_H - 15}" text-anchor="middle" font-size="13">log T</text>',
        f'<text x="15" y="{_H / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 15 {_H / 2:.1f})">reg~(T)</text>',
    ]
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        parts.append(f'<text x="{sx(xv):.1f}" y="{_H - _PAD + 16}" text-anchor="middle" font-size="10">{xv:.2f}</text>')
        parts.append(f'<text x="{_PAD - 6}" y="{sy(yv) + 3:.1f}" text-anchor="end" font-size="10">{yv:.2f}</text>')
    for idx, (policy, (pts, _)) in enumerate(series.items()):
        color = _COLORS[idx % len(_COLORS)]
        name = escape(policy)
        if not single and len(pts) >= 2:
            upper = " ".join(f"{sx(x):.2f},{sy(y + e):.2f}" for x, y, e in pts)
            lower = " ".join(f"{sx(x):.2f},{sy(y - e):.2f}" for x, y, e in reversed(pts))
            parts.append(f'<polygon class="band" points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
            line = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y, _ in pts)
            parts.append(f'<polyline class="series" data-policy="{name}" points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y, _ in pts:
            parts.append(f'<circle class="point" data-policy="{name}" cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{_W - _PAD - 5}" y="{_PAD + 15 * (idx + 1)}" text-anchor="end" font-size="11" fill="{color}">{name}</text>')
    if bench is not None and not single:
        parts.append(
            f'<line class="benchmark" data-slope="{bench!r}" x1="{sx(x0):.2f}" y1="{sy(0.0):.2f}" '
            f'x2="{sx(x1):.2f}" y2="{sy(bench * (x1 - x0)):.2f}" stroke="black" stroke-dasharray="6,4"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- entry point ----------------------------------------------------------


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--policies", metavar="a,b,c")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiprice", description="Semi-parametric dynamic pricing simulations.")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", help="replicate the configured policies")
    _run_args(sim)
    sim.set_defaults(func=cmd_simulate)
    cmp_ = sub.add_parser("compare", help="semi_param, adaptive, rmlp2 and kl_bandit on shared seeds")
    _run_args(cmp_)
    cmp_.set_defaults(func=cmd_compare)
    kc = sub.add_parser("kernel-check", help="moment conditions of the built kernels")
    kc.add_argument("--orders", default="2,4,6")
    kc.add_argument("--flat-top-c", type=float, default=1.0)
    kc.set_defaults(func=cmd_kernel_check)
    sl = sub.add_parser("slope", help="refit slopes from a summary.csv")
    sl.add_argument("--summary", required=True, metavar="PATH")
    sl.add_argument("--policy")
    sl.set_defaults(func=cmd_slope)
    pl = sub.add_parser("plot", help="SVG of reg~(T) against log T")
    pl.add_argument("--summary", required=True, metavar="PATH")
    pl.add_argument("--out", metavar="FILE")
    pl.add_argument("--m", type=int, help="order for the benchmark slope line")
    pl.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliError, OSError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
