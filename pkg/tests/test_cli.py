import json
import subprocess
import sys

import pytest

from tdoanet.cli import main
from tdoanet.gain import GainSet


@pytest.fixture
def short_json(tmp_path, scenario_dir):
    d = json.loads((scenario_dir / "ring10_ncv.json").read_text())
    d.update(steps=150, trials=2)
    p = tmp_path / "short.json"
    p.write_text(json.dumps(d))
    return p, d


def _write(tmp_path, d, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def test_check_observability(scenario_dir, capsys):
    assert main(["check-observability", str(scenario_dir / "ring10_ncv.json")]) == 0
    out = capsys.readouterr().out
    assert "structurally observable: True" in out and "numerical rank: 60/60" in out
    assert "link redundancy q: 1" in out


def test_check_observability_fails_on_disconnected_graph(tmp_path, short_json, capsys):
    _, d = short_json
    d["graph"] = {"kind": "custom", "edges": [[j, i] for j in range(10) for i in range(10)
                                              if abs(i - j) == 1 and {i, j} != {4, 5}]}
    assert main(["check-observability", str(_write(tmp_path, d))]) == 3
    assert "network strongly connected: False" in capsys.readouterr().out


def test_design_then_mc_with_gain_file(tmp_path, short_json, capsys):
    p, _ = short_json
    k = tmp_path / "k.json"
    assert main(["design-gain", str(p), "-o", str(k)]) == 0
    assert GainSet.load(k).rho_closed_loop < 1
    out_csv = tmp_path / "out.csv"
    gp = tmp_path / "plot.gp"
    assert main(["mc", str(p), "--gain", str(k), "--csv", str(out_csv), "--gnuplot-script", str(gp)]) == 0
    err = capsys.readouterr().err
    assert "warning" not in err
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "step,trial,sensor,metric,value" and len(lines) == 1 + 1 + 150
    assert str(out_csv) in gp.read_text()


def test_simulate_without_gain_warns_and_writes_stdout(short_json, capsys):
    p, _ = short_json
    assert main(["simulate", str(p), "--per-sensor"]) == 0
    cap = capsys.readouterr()
    assert "no gain file given" in cap.err
    assert len(cap.out.splitlines()) == 1 + 1 + 150 * 11


def test_delay_sweep_and_compare_kf(tmp_path, scenario_dir, capsys):
    assert main(["delay-sweep", str(scenario_dir / "ring10_ncv.json"), "--tau-max", "2"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1 + 12
    d = json.loads((scenario_dir / "nca7_kf.json").read_text())
    d.update(steps=50, trials=2, kf={"meas_std": [0.1], "process_std": [1.0]})
    assert main(["compare-kf", str(_write(tmp_path, d))]) == 0
    assert "steady_msee_linear_R0.1_Q1.0" in capsys.readouterr().out


def test_config_errors_exit_2(tmp_path, short_json, capsys):
    p, d = short_json
    bad = dict(d, colour="red")
    assert main(["mc", str(_write(tmp_path, bad))]) == 2
    assert "unknown field" in capsys.readouterr().err
    assert main(["link-removal", str(p), "--link", "0-9"]) == 2
    assert main(["link-removal", str(p), "--link", "0,5"]) == 2
    assert main(["delay-sweep", str(p), "--tau-max", "-1"]) == 2
    k = tmp_path / "k.json"
    k.write_text(json.dumps({"format": "tdoanet.gainset", "version": 1, "n": 1, "N": 6,
                             "rho_closed_loop": 0.5, "blocks": [[[0.0] * 6] * 6]}))
    assert main(["mc", str(p), "--gain", str(k)]) == 2
    with pytest.raises(SystemExit) as info:
        main(["mc"])
    assert info.value.code == 2


def test_link_removal_disconnecting_exits_3(tmp_path, short_json, capsys):
    _, d = short_json
    d["graph"] = {"kind": "line"}
    assert main(["link-removal", str(_write(tmp_path, d)), "--link", "4,5"]) == 3
    assert "observability lost" in capsys.readouterr().err


def test_module_entry_point(scenario_dir):
    r = subprocess.run(
        [sys.executable, "-m", "tdoanet", "check-observability", str(scenario_dir / "ring10_ncv.json")],
        capture_output=True, text=True, check=False,
    )
    assert r.returncode == 0 and "60/60" in r.stdout
