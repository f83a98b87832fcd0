import json

import pytest

from ctlab import cli
from ctlab.config import bundled_config, load_config, parse_config, parse_time
from ctlab.report import SCHEMA_VERSION, ReportError, RunReport, read_report, timing_path, write_report
from ctlab.world import ConfigError

TRIANGLE = bundled_config("isolation_triangle.toml")


def minimal(**over):
    data = {"seed": 1, "attack": {"kind": "deanon", "seeds": 1}}
    data.update(over)
    return data


def test_seed_is_mandatory():
    with pytest.raises(ConfigError, match="seed"):
        parse_config({"attack": {"kind": "deanon"}})
    with pytest.raises(ConfigError, match="seed"):
        parse_config(minimal(seed=-3))
    with pytest.raises(ConfigError, match="seed"):
        parse_config(minimal(seed="7"))


def test_table6_names_verbatim():
    cfg = parse_config(minimal(table6={"Population": 500, "Infection Rate": "2%",
                                       "# of tags": 600, "# of infected tags": 5,
                                       "Frequency(WiFi Probing)": [20, 30], "r_bt": 8}))
    t = cfg.table6
    assert (t.population, t.infection_rate, t.tags, t.infected_tags) == (500, 0.02, 600, 5)
    assert t.wifi_frequency == (20.0, 30.0) and t.r_bt == 8.0


def test_unknown_table6_key_named():
    with pytest.raises(ConfigError, match=r"table6\.Populace"):
        parse_config(minimal(table6={"Populace": 5}))


def test_ranges_enforced_unless_unsafe():
    with pytest.raises(ConfigError, match="table6"):
        parse_config(minimal(table6={"Speed": [0.1, 40]}))
    cfg = parse_config(minimal(table6={"Speed": [0.1, 40], "unsafe": True}))
    assert cfg.table6.speed == (0.1, 40.0)


def test_time_parse():
    assert parse_time("16:00-18:00, 2 days") == ((57600.0, 64800.0), (144000.0, 151200.0))
    assert parse_time("09:30-10:00") == ((34200.0, 36000.0),)
    with pytest.raises(ConfigError):
        parse_time("18:00-16:00")
    with pytest.raises(ConfigError):
        parse_time("noon")


def test_world_device_errors_named():
    world = {"device": [{"name": "a", "pos": [0, 0]}, {"name": "b", "pos": [1, 0], "bt_rate": 50}]}
    with pytest.raises(ConfigError, match=r"world\.device\[1\]\.bt_rate"):
        parse_config({"seed": 0, "world": world, "attack": {"kind": "simulate"}})
    world["unsafe"] = True
    parse_config({"seed": 0, "world": world, "attack": {"kind": "simulate"}})
    with pytest.raises(ConfigError, match=r"world\.device\[0\]\.colour"):
        parse_config({"seed": 0, "world": {"device": [{"name": "a", "pos": [0, 0], "colour": 1}]},
                      "attack": {"kind": "simulate"}})


def test_attack_block_errors():
    with pytest.raises(ConfigError, match="attack.kind"):
        parse_config({"seed": 0, "attack": {"kind": "teleport"}})
    with pytest.raises(ConfigError, match="attack.bogus"):
        parse_config({"seed": 0, "attack": {"kind": "deanon", "bogus": 1}})
    with pytest.raises(ConfigError, match="attack.attackers"):
        raw = load_config(TRIANGLE).raw
        raw = {**raw, "attack": {**raw["attack"], "attackers": ["Z"]}}
        parse_config(raw)
    with pytest.raises(ConfigError, match="attack.pools"):
        raw = load_config(TRIANGLE).raw
        parse_config({**raw, "attack": {**raw["attack"], "pools": 1}})
    with pytest.raises(ConfigError, match="attack.values"):
        parse_config({"seed": 0, "attack": {"kind": "deanon", "sweep": "speed"}})


def test_scenario_hash_tracks_seed():
    a = parse_config(minimal())
    b = parse_config(minimal(seed=2))
    assert a.scenario_hash() != b.scenario_hash()
    assert a.scenario_hash() == parse_config(minimal()).scenario_hash()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 3")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_report_roundtrip(tmp_path):
    rep = RunReport("isolation", "t", "ab" * 32, 3, {"rounds": 1, "identified": ["C"]})
    text = rep.to_json()
    assert RunReport.from_json(text).to_json() == text
    path = write_report(rep, tmp_path / "r.json", wall_clock=0.25)
    assert read_report(path) == rep
    assert json.loads(timing_path(path).read_text()) == {"wall_clock_s": 0.25}
    assert json.loads(text)["schema_version"] == SCHEMA_VERSION


def test_report_rejects_other_schema():
    data = json.loads(RunReport("x", "", "", 0).to_json())
    data["schema_version"] = 99
    with pytest.raises(ReportError):
        RunReport.from_json(json.dumps(data))


def test_cli_run_writes_report(tmp_path, capsys):
    out = tmp_path / "t5.json"
    assert cli.main(["run", str(TRIANGLE), "--report", str(out)]) == 0
    rep = read_report(out)
    assert rep.metrics["identified"] == ["C"]
    assert timing_path(out).exists()
    assert "wall" not in out.read_text()


def test_cli_isolate_flags(tmp_path):
    out = tmp_path / "i.json"
    assert cli.main(["isolate", "--pools", "2", "--report", str(out)]) == 0
    m = read_report(out).metrics
    assert m["pools"] == 2 and m["identified"] == ["C"] and m["rounds"] == 2


def test_cli_report_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.REPORT_DIR_ENV, str(tmp_path))
    assert cli.main(["isolate"]) == 0
    (path,) = [p for p in tmp_path.iterdir() if not p.name.endswith(".timing.json")]
    assert path.name.startswith("isolation-")


def test_cli_stdout_when_no_destination(capsys, monkeypatch):
    monkeypatch.delenv(cli.REPORT_DIR_ENV, raising=False)
    assert cli.main(["pollute", "--sites", "2", "--seed", "4", "--duration", "20"]) == 0
    rep = RunReport.from_json(capsys.readouterr().out)
    assert rep.metrics["false_notifications"] == 1


def test_cli_config_error_exit_code(tmp_path, capsys):
    out = tmp_path / "never.json"
    assert cli.main(["deanon", "--report", str(out)]) == 2
    assert "seed" in capsys.readouterr().err
    assert cli.main(["pollute", "--sites", "2", "--extender-range", "500", "--seed", "1",
                     "--report", str(out)]) == 2
    assert not out.exists()


def test_cli_runtime_failure_leaves_no_report(tmp_path, capsys):
    out = tmp_path / "never.json"
    code = cli.main(["coverage", "--seed", "0", "--poi", str(tmp_path / "missing.csv"),
                     "--city", "X", "--population", "10", "--report", str(out)])
    assert code == 3
    assert not out.exists() and not timing_path(out).exists()


def test_cli_kind_mismatch(tmp_path):
    assert cli.main(["pollute", "--scenario", str(TRIANGLE)]) == 2


def test_cli_coverage_matrix(tmp_path):
    matrix = tmp_path / "m.csv"
    out = tmp_path / "c.json"
    assert cli.main(["coverage", "--seed", "0", "--overlap-grid", "0,0.3", "--radius-grid", "5",
                     "--matrix", str(matrix), "--report", str(out)]) == 0
    lines = matrix.read_text().splitlines()
    assert lines[0] == "p\\r_km,5"
    assert len(lines) == 3
    assert abs(read_report(out).metrics["coverage"][1][0] - 0.25) < 0.03


def test_cli_sweep_curve(tmp_path):
    curve = tmp_path / "curve.csv"
    scen = tmp_path / "s.toml"
    scen.write_text('seed = 0\n[table6]\n"Population" = 1000\n"# of tags" = 1200\n'
                    '"# of infected tags" = 8\nsensors = 2000\n[attack]\nkind = "deanon"\n')
    assert cli.main(["sweep", "--scenario", str(scen), "--sweep", "wifi_frequency",
                     "--values", "15,75", "--seeds", "1", "--curve", str(curve),
                     "--report", str(tmp_path / "s.json")]) == 0
    assert curve.read_text().splitlines()[0] == "param_value,mean_rate,stddev"
