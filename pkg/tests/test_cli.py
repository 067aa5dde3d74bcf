from __future__ import annotations

import csv
import json
import re

import pytest

from semiprice import cli
from semiprice.harness import SUMMARY_COLUMNS

REFERENCE_CONFIG = {
    "price_cap": 6.0,
    "horizon": 6300,
    "checkpoints": [1500, 2000, 3100, 4000, 5000, 6300],
    "replications": 1,
    "seed": 0,
    "env": {
        "alpha0": 3.0,
        "noise": {"family": "trunc_poly", "m": 2},
        "covariates": {"kind": "iid_independent", "d": 3, "m": 2},
    },
    "policies": [{"name": "semi_param", "m": 2, "ell0": 200, "c_b": 3.0}],
}

SMALL = {
    "price_cap": 6.0,
    "horizon": 700,
    "checkpoints": [300, 500, 700],
    "replications": 2,
    "seed": 3,
    "policies": [{"name": "semi_param", "m": 2}],
}


def write_config(tmp_path, data, name="run.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- simulate ---------------------------------------------------------------


def test_oracle_config_has_zero_regret(tmp_path, capsys):
    cfg = dict(SMALL, policies=[{"name": "oracle"}])
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", write_config(tmp_path, cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "summary.csv")
    assert len(rows) == 3
    assert all(abs(float(r["mean"])) <= 1e-6 for r in rows)


def test_reference_config_records_first_exploration_length(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["simulate", "--config", write_config(tmp_path, REFERENCE_CONFIG), "--out", str(out)]) == 0
    episodes = read_csv(out / "episodes.csv")
    first = next(r for r in episodes if r["episode"] == "1")
    assert (first["length"], first["explore"]) == ("200", "97")
    assert [r["explore"] for r in episodes][:5] == ["97", "159", "260", "427", "700"]
    assert len(read_csv(out / "replications.csv")) == 6


def test_missing_price_cap_is_config_error(tmp_path, capsys):
    cfg = {k: v for k, v in SMALL.items() if k != "price_cap"}
    code = cli.main(["simulate", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "price_cap" in capsys.readouterr().err


def test_unknown_key_is_config_error(tmp_path, capsys):
    cfg = dict(SMALL, policies=[{"name": "semi_param", "bandwith": 0.3}])
    code = cli.main(["simulate", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "bandwith" in capsys.readouterr().err


def test_malformed_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "price_cap": 6.0,\n  "horizon": 700,,\n}\n')
    assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert re.search(r"line 3", capsys.readouterr().err)


def test_missing_config_file(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_bad_checkpoints_rejected(tmp_path):
    cfg = dict(SMALL, checkpoints=[500, 300])
    assert cli.main(["simulate", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    cfg = dict(SMALL, checkpoints=[300, 800])
    assert cli.main(["simulate", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2


def test_overrides_applied(tmp_path):
    out = tmp_path / "out"
    args = ["simulate", "--config", write_config(tmp_path, SMALL), "--out", str(out)]
    assert cli.main(args + ["--seed", "9", "--reps", "1", "--horizon", "400", "--policies", "kl_bandit,oracle"]) == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert (resolved["seed"], resolved["replications"], resolved["horizon"]) == (9, 1, 400)
    assert resolved["checkpoints"] == [300]
    assert [p["name"] for p in resolved["policies"]] == ["kl_bandit", "oracle"]


def test_empty_policy_list_is_runtime_error(tmp_path, capsys):
    cfg = dict(SMALL, policies=[])
    assert cli.main(["simulate", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 1
    assert "empty policy list" in capsys.readouterr().err


def test_config_echo_rerun_is_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--config", write_config(tmp_path, SMALL), "--out", str(a)]) == 0
    assert cli.main(["simulate", "--config", str(a / "config.resolved.json"), "--out", str(b)]) == 0
    for name in ("replications.csv", "summary.csv", "episodes.csv", "config.resolved.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    echoed = json.loads((a / "config.resolved.json").read_text())
    # defaults are expanded in the echo
    assert echoed["policies"][0]["ell0"] == 200 and echoed["env"]["alpha0"] == 3.0


# --- compare ----------------------------------------------------------------


@pytest.fixture(scope="module")
def compare_out(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("compare")
    out = tmp / "out"
    assert cli.main(["compare", "--config", write_config(tmp, SMALL), "--out", str(out)]) == 0
    return out


def test_compare_row_counts(compare_out):
    rows = read_csv(compare_out / "replications.csv")
    by_policy = {}
    for r in rows:
        by_policy.setdefault(r["policy"], 0)
        by_policy[r["policy"]] += 1
    assert sorted(by_policy) == sorted(cli.COMPARE_POLICIES)
    assert all(n == 2 * 3 for n in by_policy.values())


def test_compare_sorted_deterministically(compare_out):
    rows = read_csv(compare_out / "replications.csv")
    keys = [(r["policy"], int(r["rep"]), int(r["checkpoint"])) for r in rows]
    assert keys == sorted(keys)
    summary = read_csv(compare_out / "summary.csv")
    skeys = [(r["policy"], int(r["checkpoint"])) for r in summary]
    assert skeys == sorted(skeys)


def test_compare_logs_adaptive_order_history(compare_out):
    eps = [r for r in read_csv(compare_out / "episodes.csv") if r["policy"] == "adaptive"]
    assert eps
    for rep in {r["rep"] for r in eps}:
        history = [int(r["m"]) for r in eps if r["rep"] == rep]
        assert history[0] == 2
        assert all(m in (0, 2, 4, 6) for m in history)


# --- kernel-check -------------------------------------------------------------


def test_kernel_check_passes_and_reports_constants(capsys):
    assert cli.main(["kernel-check"]) == 0
    out = capsys.readouterr().out
    assert "flat_top" in out
    line = next(l for l in out.splitlines() if "35/12" in l)
    assert float(line.split()[4]) == pytest.approx(8 / 3, abs=1e-10)


def test_kernel_report_rows():
    rows, ok = cli.kernel_report([2, 4, 6], 1.0)
    assert ok
    assert [r[3] for r in rows[:3]] == ["ok", "ok", "ok"]
    assert abs(rows[3][1] - 1.0) <= 1e-4


def test_kernel_check_rejects_odd_order():
    assert cli.main(["kernel-check", "--orders", "3"]) == 2


# --- slope and plot -------------------------------------------------------------


@pytest.fixture(scope="module")
def sim_out(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sim")
    out = tmp / "out"
    cfg = dict(SMALL, policies=[{"name": "semi_param", "m": 2}, {"name": "kl_bandit"}])
    assert cli.main(["simulate", "--config", write_config(tmp, cfg), "--out", str(out)]) == 0
    return out


def test_slope_round_trip_is_exact(sim_out, capsys):
    capsys.readouterr()
    assert cli.main(["slope", "--summary", str(sim_out / "summary.csv")]) == 0
    printed = dict(line.split(",") for line in capsys.readouterr().out.split())
    for row in read_csv(sim_out / "summary.csv"):
        assert float(printed[row["policy"]]) == float(row["slope"])


def test_slope_unknown_policy(sim_out):
    assert cli.main(["slope", "--summary", str(sim_out / "summary.csv"), "--policy", "nope"]) == 1


def test_plot_benchmark_line(sim_out, tmp_path):
    svg_path = tmp_path / "fig.svg"
    assert cli.main(["plot", "--summary", str(sim_out / "summary.csv"), "--out", str(svg_path), "--m", "2"]) == 0
    svg = svg_path.read_text()
    slope = float(re.search(r'class="benchmark" data-slope="([^"]+)"', svg).group(1))
    assert slope == 5 / 7
    assert 'stroke-dasharray' in svg
    assert svg.count('class="series"') == 2
    assert svg.count('class="band"') == 2


def test_plot_single_checkpoint_has_points_only(tmp_path):
    path = tmp_path / "summary.csv"
    path.write_text(",".join(SUMMARY_COLUMNS) + "\nsemi_param,700,12.5,1.0,0.0,nan,0.7142857142857143,2.0\n")
    svg_path = tmp_path / "one.svg"
    assert cli.main(["plot", "--summary", str(path), "--out", str(svg_path)]) == 0
    svg = svg_path.read_text()
    assert svg.count('class="point"') == 1
    assert 'class="series"' not in svg and 'class="benchmark"' not in svg


def test_plot_empty_summary_fails(tmp_path, capsys):
    path = tmp_path / "summary.csv"
    path.write_text(",".join(SUMMARY_COLUMNS) + "\n")
    assert cli.main(["plot", "--summary", str(path)]) == 1
    assert "no policies" in capsys.readouterr().err


def test_plot_missing_summary_fails(tmp_path):
    assert cli.main(["plot", "--summary", str(tmp_path / "absent.csv")]) == 1


def test_benchmark_formula():
    assert [cli.benchmark_for(m) for m in (2, 4, 6)] == [5 / 7, 9 / 15, 13 / 23]
