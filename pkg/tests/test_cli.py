import json
import re
import subprocess
import sys
from pathlib import Path

import jsonschema
import pytest
import yaml

from magtube import cli

THREE = """
fields: {B0: [0.0, 0.0, 1.0], s0: 2.3}
potential: {eps: 0.05}
geometry:
  curve: {kind: hairpin, bend_curvature: 1.8, ramp: 0.3, run: 0.3, extent: 12}
  section: {shape: disk, size: 0.5}
operators: {h: 0.25, plane_half_width: 3.0, sub: 2, z_margin: 1.0}
eigsolve: {tol: 1.0e-6}
experiments:
  run: [theorem1, theorem2, lemma]
  theorem1: {lengths: [10, 12], k_values: [8, 16], weyl_hz: 0.1}
  theorem2: {fields: [0, 4, 16], require_margin: 1.0, lemma_fields: [40, 80, 160, 320, 640]}
  lemma: {fields: [40, 80, 160, 320, 640], radii: [1.0, 1.4], N: 200}
"""


def _write(tmp_path, text, name="s.yaml"):
    p = Path(tmp_path) / name
    p.write_text(text)
    return str(p)


def _schema(name):
    return cli._schema(name)


def test_minimal_scenario_gets_defaults():
    sc = cli.scenario_from_dict({"fields": {"B0": [0.3, -0.2, 1.0]}, "potential": {"depth": 10}})
    assert sc.section("operators", "h") == 0.1
    assert sc.section("experiments", "run") == ["threshold"]
    assert re.fullmatch(r"[0-9a-f]{64}", sc.hash)


def test_unknown_key_is_named(tmp_path, capsys):
    p = _write(tmp_path, "fields: {B0: [0, 0, 1]}\npotential: {depth: 10}\nvortex: 1\n")
    assert cli.main(["run", "--config", p, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "vortex" in capsys.readouterr().err


def test_nested_unknown_key_and_bad_value():
    with pytest.raises(cli.ConfigError, match="geometry.curve.spin"):
        cli.scenario_from_dict({"fields": {"B0": [0, 0, 1]}, "potential": {"depth": 1},
                                "geometry": {"curve": {"spin": 2}}})
    with pytest.raises(cli.ConfigError, match="invalid value"):
        cli.scenario_from_dict({"fields": {"B0": [0, 0]}, "potential": {"depth": 1}})
    with pytest.raises(cli.ConfigError, match="exactly one"):
        cli.scenario_from_dict({"fields": {"B0": [0, 0, 1]}, "potential": {}})
    with pytest.raises(cli.ConfigError, match="inner < outer"):
        cli.scenario_from_dict({"fields": {"B0": [0, 0, 1], "inner": 1.9, "outer": 1.5},
                                "potential": {"depth": 1}})


def test_assumption_violation_message(tmp_path, capsys):
    text = """
fields: {B0: [0, 0, 1], s0: 1.0}
potential: {eps: 0.05}
geometry:
  curve: {kind: hairpin, bend_curvature: 1.8, ramp: 0.3, run: 0.3, extent: 10}
  section: {shape: disk, size: 0.5}
experiments: {run: [theorem2]}
"""
    rc = cli.main(["run", "--config", _write(tmp_path, text), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert rc == cli.EXIT_CONFIG
    assert cli.ASSUMPTION1 in err and "theorem2" in err


def test_non_injective_tube_rejected():
    with pytest.raises(cli.ConfigError, match="injective"):
        cli.scenario_from_dict({
            "fields": {"B0": [0, 0, 1], "s0": 3.0}, "potential": {"depth": 5},
            "geometry": {"curve": {"kind": "arc", "bend_curvature": 2.4, "ramp": 0.2,
                                   "run": 0.3, "extent": 6},
                         "section": {"shape": "disk", "size": 0.5}},
            "experiments": {"run": ["bracketing"]}})


def test_missing_and_malformed_file(tmp_path):
    assert cli.main(["dry-run", "--config", str(tmp_path / "nope.yaml")]) == cli.EXIT_CONFIG
    p = _write(tmp_path, "fields: [unclosed\n")
    assert cli.main(["dry-run", "--config", p]) == cli.EXIT_CONFIG


def test_dry_run_prints_plan(tmp_path, capsys):
    p = _write(tmp_path, THREE)
    for argv in (["dry-run", "--config", p], ["run", "--dry-run", "--config", p]):
        assert cli.main(argv) == cli.EXIT_OK
        out = capsys.readouterr().out
        doc = yaml.safe_load(out)
        assert re.fullmatch(r"[0-9a-f]{64}", doc["scenario_hash"])
        assert doc["estimate"]["tube_nodes"] > 0 and doc["estimate"]["runtime_s"] > 0
    assert not (tmp_path / "runs").exists()


def test_resolved_config_roundtrip(tmp_path):
    sc = cli.parse_scenario(_write(tmp_path, THREE))
    again = cli.parse_scenario(_write(tmp_path, sc.dump(), "resolved.yaml"))
    assert again.hash == sc.hash


def test_seed_override_changes_hash(tmp_path):
    p = _write(tmp_path, "fields: {B0: [0, 0, 1]}\npotential: {depth: 10}\n")
    a, b = cli.parse_scenario(p), cli.parse_scenario(p, seed=5)
    assert a.hash != b.hash and b.config["seed"] == 5
    assert a.seed_for("x") != a.seed_for("y")


def test_output_dir_not_part_of_hash():
    base = {"fields": {"B0": [0, 0, 1]}, "potential": {"depth": 10}}
    a = cli.scenario_from_dict(base)
    b = cli.scenario_from_dict({**base, "output": {"dir": "elsewhere"}})
    assert a.hash == b.hash


@pytest.fixture(scope="module")
def three_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("three")
    p = _write(d, THREE)
    out = d / "out"
    rc = cli.main(["run", "--config", p, "--out", str(out)])
    sc = cli.parse_scenario(p)
    return rc, sc, out, p


def test_three_experiments_write_summaries(three_run):
    rc, sc, out, _ = three_run
    assert rc == cli.EXIT_OK
    run_dir = out / sc.short
    summaries = sorted(run_dir.glob("*.json"))
    names = {s.name.split("_")[0] for s in summaries}
    assert names == {"theorem1", "theorem2", "lemma"}
    for s in summaries:
        doc = json.loads(s.read_text())
        jsonschema.validate(doc, _schema("summary"))
        assert doc["scenario_hash"] == sc.hash and doc["passed"] is True
        assert s.with_suffix(".csv").is_file()
    report = (run_dir / "report.md").read_text()
    assert report.count("## ") == 3 and "PASS" in report
    assert not (run_dir / "errors.json").exists()
    assert cli.parse_scenario(run_dir / "resolved.yaml").hash == sc.hash


def test_rerun_hits_cache_identically(three_run):
    rc, sc, out, p = three_run
    run_dir = out / sc.short

    def snapshot():
        docs = {}
        for f in sorted(run_dir.glob("*.json")):
            d = json.loads(f.read_text())
            d.pop("timestamp")
            docs[f.name] = d
        csvs = {f.name: f.read_bytes() for f in sorted(run_dir.glob("*.csv"))}
        return docs, csvs

    before = snapshot()
    assert cli.main(["run", "--config", p, "--out", str(out)]) == cli.EXIT_OK
    assert snapshot() == before
    assert "cached: yes" in (run_dir / "report.md").read_text()


def test_export_reemits_csv(three_run):
    _, sc, out, p = three_run
    run_dir = out / sc.short
    for f in run_dir.glob("*.csv"):
        f.unlink()
    assert cli.main(["export", "--config", p, "--out", str(out)]) == cli.EXIT_OK
    assert len(list(run_dir.glob("*.csv"))) == 3


def test_export_without_cache(tmp_path):
    p = _write(tmp_path, "fields: {B0: [0, 0, 1]}\npotential: {depth: 10}\n")
    assert cli.main(["export", "--config", p, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


def test_numerical_failure_writes_manifest(tmp_path):
    # a straight tube has no bound state below e, so the sweep cannot start
    text = """
fields: {B0: [0, 0, 1], s0: 1.0}
potential: {depth: 12}
geometry: {curve: {kind: straight, extent: 6}, section: {shape: disk, size: 0.5}}
operators: {h: 0.25, plane_half_width: 2.5, z_margin: 0.5}
experiments:
  run: [theorem2, lemma]
  theorem2: {fields: [0, 4], lemma_fields: [40, 80, 160, 320, 640]}
  lemma: {fields: [40, 80, 160, 320, 640], radii: [1.0], N: 200}
"""
    out = tmp_path / "o"
    rc = cli.main(["run", "--config", _write(tmp_path, text), "--out", str(out)])
    assert rc == cli.EXIT_NUMERIC
    man = json.loads(next(out.glob("*/errors.json")).read_text())
    jsonschema.validate(man, _schema("errors"))
    assert man["completed"] == ["lemma"]
    assert man["errors"][0]["experiment"] == "theorem2"
    assert man["errors"][0]["type"] == "NoInitialBoundState"


def test_cache_clean(three_run, tmp_path):
    out = tmp_path / "o"
    (out / "cache" / "x").mkdir(parents=True)
    assert cli.main(["cache", "clean", "--out", str(out)]) == cli.EXIT_OK
    assert not (out / "cache").exists()


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "magtube.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "dry-run" in r.stdout
    r = subprocess.run([sys.executable, "-m", "magtube.cli", "run"], capture_output=True,
                       text=True)
    assert r.returncode == 2


def test_cached_tube_matches_cold(tmp_path):
    from magtube import geometry as geo
    from magtube.eigsolve import SolveRequest, lowest_eigs
    from magtube.operators import assemble_h3d, grid3, well_potential

    sc = cli.scenario_from_dict({"fields": {"B0": [0.2, 0.1, 1.0], "s0": 0.6},
                                 "potential": {"depth": 12}})
    cache = cli.Cache(tmp_path, sc)
    frame = geo.build_curve(geo.CurveSpec(kind="bump", amplitude=0.4, half_width=0.6, extent=6))
    sec = geo.disk_section(0.5)
    V = well_potential(12.0, sec)
    g = grid3(1.4, -1.4, 1.4, 0.2)
    gauge = cli.landau_gauge(cli.make_field((0.2, 0.1, 1.0), 0.6))
    vals = []
    for expect_hit in (False, True):
        data, hit = cli._tube_cached(cache, "t", frame, sec, V, g, 0.6, 2, [gauge])
        assert hit is expect_hit
        op = assemble_h3d(data, gauge)
        vals.append(lowest_eigs(SolveRequest(op, k=2, tol=1e-10, seed=1)).eigenvalues)
    assert vals[0].tobytes() == vals[1].tobytes()
