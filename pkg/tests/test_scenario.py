import json

import numpy as np
import pytest

from tdoanet.errors import ConfigError
from tdoanet.scenario import SCHEMA_VERSION, Scenario, derive_rng, load_scenario, scenario_from_dict


def test_shipped_scenarios_load(scenario_dir):
    names = sorted(p.stem for p in scenario_dir.glob("*.json"))
    assert "ring10_ncv" in names and "nca7_kf" in names
    for p in scenario_dir.glob("*.json"):
        sc = load_scenario(p)
        assert sc.schema_version == SCHEMA_VERSION and sc.name == p.stem


def test_json_roundtrip(scenario_dir):
    sc = load_scenario(scenario_dir / "ring10_ncv_fault.json")
    back = scenario_from_dict(json.loads(json.dumps(sc.to_dict())))
    assert back == sc
    assert back.faults[0].sensor == 3 and back.detector.enabled


def test_defaults_fill_missing_sections():
    sc = scenario_from_dict({"schema_version": 1})
    assert sc == Scenario()


@pytest.mark.parametrize(
    "doc, where",
    [
        ({"schema_version": 1, "stepz": 10}, "stepz"),
        ({"schema_version": 1, "model": {"kind": "NCV", "dt": 0.1}}, "model"),
        ({"schema_version": 1, "faults": [{"sensor": 1, "onset": 2, "vector": [1], "size": 3}]}, "faults[0]"),
        ({"schema_version": 1, "steps": "10"}, "steps"),
        ({"schema_version": 1, "steps": True}, "steps"),
        ({"schema_version": 1, "detector": {"enabled": 1}}, "detector.enabled"),
        ({"schema_version": 1, "geometry": {"box": 10}}, "geometry.box"),
        ({"schema_version": 1, "faults": {"sensor": 1}}, "faults"),
        ({"schema_version": 1, "model": []}, "model"),
        ({"schema_version": 1, "faults": [{"sensor": 1}]}, "faults[0]"),
    ],
)
def test_strict_parsing_names_the_field(doc, where):
    with pytest.raises(ConfigError, match=where.replace("[", r"\[").replace("]", r"\]")):
        scenario_from_dict(doc)


@pytest.mark.parametrize(
    "doc",
    [
        {},
        {"schema_version": 2},
        {"schema_version": 1, "trials": 0},
        {"schema_version": 1, "meas_noise_std": -0.1},
        {"schema_version": 1, "delays": {"kind": "sometimes"}},
        {"schema_version": 1, "detector": {"dof": "guess"}},
    ],
)
def test_invalid_values(doc):
    with pytest.raises(ConfigError):
        scenario_from_dict(doc)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_scenario(bad)


def test_derived_streams_are_keyed_not_sequential():
    a = derive_rng(7, "noise", 3).standard_normal(5)
    np.testing.assert_array_equal(a, derive_rng(7, "noise", 3).standard_normal(5))
    others = [derive_rng(7, "noise", 4), derive_rng(7, "init", 3), derive_rng(8, "noise", 3)]
    for o in others:
        assert not np.allclose(a, o.standard_normal(5))
