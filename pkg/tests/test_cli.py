"""CLI tests: config parsing, run/analyze flows, exit codes."""

import os

import pytest

from ringnet import cli
from ringnet.cli import EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, ConfigError
from ringnet.metrics import write_snapshot
from ringnet.topology import synthetic_snapshot

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


SCENARIO = """
[scenario]
measurement_interval = 2.0
pair_budget = 200
phase = bootstrap n=10 spacing=0.4
phase = wait t=10

[sim]
latency = constant 0.01

[overlay]
k_shortcuts = 2
"""


def manifest_text(scenario_name, extra=""):
    return f"""
[run]
scenario = {scenario_name}
seeds = 1 2
output = out
mode = sim

[thresholds]
routability_floor = 0.99
missing_edges_max = 0
{extra}
"""


# ----------------------------------------------------------------------
# config parsing


def test_parse_config_keeps_lines_and_repeats(tmp_path):
    path = write(tmp_path / "c.cfg", "[a]\nx = 1\nx = 2\n# comment\n[b]\ny = 3\n")
    sections = cli.parse_config(path)
    assert sections["a"] == [(2, "x", "1"), (3, "x", "2")]
    assert sections["b"] == [(6, "y", "3")]


def test_parse_config_errors_carry_line_numbers(tmp_path):
    path = write(tmp_path / "c.cfg", "[a]\nnonsense\n")
    with pytest.raises(ConfigError) as err:
        cli.parse_config(path)
    assert ":2:" in str(err.value)


def test_unknown_scenario_key_is_rejected(tmp_path):
    path = write(tmp_path / "s.cfg", "[scenario]\nphase = wait t=1\nbogus = 1\n")
    with pytest.raises(ConfigError) as err:
        cli.load_scenario(path)
    assert "bogus" in str(err.value) and ":3:" in str(err.value)


def test_unknown_phase_and_arguments_are_rejected(tmp_path):
    path = write(tmp_path / "s.cfg", "[scenario]\nphase = warp n=1\n")
    with pytest.raises(ConfigError):
        cli.load_scenario(path)
    path = write(tmp_path / "s2.cfg", "[scenario]\nphase = wait seconds=1\n")
    with pytest.raises(ConfigError):
        cli.load_scenario(path)


def test_shipped_scenarios_parse():
    for name in ("smoke.cfg", "churn.cfg", "merge.cfg", "join_fail.cfg"):
        scenario, sim_config, overlay = cli.load_scenario(
            os.path.join(REPO, "scenarios", name))
        assert scenario.phases


def test_load_scenario_builds_expected_objects(tmp_path):
    path = write(tmp_path / "s.cfg", """
[scenario]
measurement_interval = 1.5
phase = bootstrap n=4 spacing=0.2
phase = churn duration=10 p_leave=0.01
[sim]
latency = uniform 0.01 0.02
loss_rate = 0.1
[overlay]
near_per_side = 3
status_interval = off
""")
    scenario, sim_config, overlay = cli.load_scenario(path)
    assert scenario.measurement_interval == 1.5
    assert len(scenario.phases) == 2
    assert sim_config.loss_rate == 0.1
    assert overlay.near_per_side == 3
    assert overlay.status_interval is None


# ----------------------------------------------------------------------
# run command


def test_cmd_run_writes_artifacts_and_passes(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    write(tmp_path / "s.cfg", SCENARIO)
    manifest = write(tmp_path / "m.cfg", manifest_text("s.cfg"))
    assert cli.main(["run", manifest]) == EXIT_OK
    out = capsys.readouterr().out
    assert "seed 1: PASS" in out and "seed 2: PASS" in out
    for seed in (1, 2):
        csv_path = tmp_path / "out" / f"seed-{seed}" / "trace.csv"
        text = csv_path.read_text()
        assert text.startswith("simulated_time_s,live_nodes,routability,"
                               "ring_correct_fraction,missing_edges,mean_hops")
        snaps = [p for p in os.listdir(tmp_path / "out" / f"seed-{seed}")
                 if p.endswith(".snap")]
        assert snaps


def test_cmd_run_is_deterministic_per_seed(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    write(tmp_path / "s.cfg", SCENARIO)
    first = write(tmp_path / "m1.cfg", manifest_text("s.cfg").replace(
        "output = out", "output = out1"))
    second = write(tmp_path / "m2.cfg", manifest_text("s.cfg").replace(
        "output = out", "output = out2"))
    assert cli.main(["run", first]) == EXIT_OK
    assert cli.main(["run", second]) == EXIT_OK
    for seed in (1, 2):
        a = (tmp_path / "out1" / f"seed-{seed}" / "trace.csv").read_bytes()
        b = (tmp_path / "out2" / f"seed-{seed}" / "trace.csv").read_bytes()
        assert a == b


def test_cmd_run_threshold_failure_exits_one(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    write(tmp_path / "s.cfg", SCENARIO)
    manifest = write(tmp_path / "m.cfg",
                     manifest_text("s.cfg", extra="ks_ceiling = 0.05\n"))
    # Ten nodes have far fewer than 50 shortcut edges, so the KS check
    # reports unavailable, which counts as a threshold failure.
    assert cli.main(["run", manifest]) == EXIT_THRESHOLD
    assert "FAIL" in capsys.readouterr().out


def test_cmd_run_unknown_key_exits_two(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    write(tmp_path / "s.cfg", SCENARIO)
    manifest = write(tmp_path / "m.cfg",
                     manifest_text("s.cfg", extra="surprise = 1\n"))
    assert cli.main(["run", manifest]) == EXIT_USAGE
    assert "unknown key" in capsys.readouterr().err


def test_cmd_run_missing_manifest_exits_two(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "nope.cfg")]) == EXIT_USAGE


# ----------------------------------------------------------------------
# analyze command


def test_cmd_analyze_reports_perfect_fixture(tmp_path, capsys):
    snap = synthetic_snapshot(64, k=2, seed=3)
    path = str(tmp_path / "topo.snap")
    write_snapshot(snap, path)
    assert cli.main(["analyze", path]) == EXIT_OK
    out = capsys.readouterr().out
    assert "routability: 1.000000" in out
    assert "ring_correct_fraction: 1.000000" in out
    assert "missing_edges: 0" in out
    assert os.path.exists(path + ".dot")


def test_cmd_analyze_split_fixture_reports_fraction(tmp_path, capsys):
    from ringnet.metrics import NEAR_LABEL, TopologySnapshot
    from ringnet.topology import ring_addresses
    from random import Random
    ring = ring_addresses(12, Random(2))
    half_a, half_b = ring[:6], ring[6:]
    edges = []
    for part in (half_a, half_b):
        for i in range(len(part)):
            for step in (1, 2):
                j = i + step
                if j < len(part):
                    x, y = part[i], part[j]
                    edges.append((min(x, y), max(x, y), NEAR_LABEL))
    snap = TopologySnapshot(0.0, tuple(ring), tuple(edges))
    path = str(tmp_path / "split.snap")
    write_snapshot(snap, path)
    assert cli.main(["analyze", path]) == EXIT_OK
    out = capsys.readouterr().out
    # 2 * 6*5 routable of 12*11 ordered pairs at most.
    assert "routability: 0." in out


def test_cmd_analyze_empty_file_exits_two(tmp_path, capsys):
    path = tmp_path / "empty.snap"
    path.write_text("")
    assert cli.main(["analyze", str(path)]) == EXIT_USAGE
    assert "malformed" in capsys.readouterr().err


def test_demo_real_rejects_silly_sizes(capsys):
    assert cli.main(["demo-real", "-n", "0"]) == EXIT_USAGE
    assert cli.main(["demo-real", "-n", "65"]) == EXIT_USAGE


def test_demo_real_single_node(capsys):
    assert cli.main(["demo-real", "-n", "1", "--budget", "5"]) == EXIT_OK
    assert "ring_correct=1.0000" in capsys.readouterr().out
