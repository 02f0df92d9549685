import json
import subprocess
import sys
from pathlib import Path

import pytest

from stimkit.cli import main
from stimkit.config import from_mapping, load, parse_text
from stimkit.exceptions import ConfigError, DataError, DependencyError

SMALL = """
seed = 7
simulate = true
simulate.n_consumers = 800
simulate.n_establishments = 120
forest.n_trees = 100
forest.k_folds = 3
tree.n_cuts = 6
"""

ARTIFACTS = ["matched.csv", "balance.csv", "did.csv", "did_summary.json", "bunching.csv", "effects.csv",
             "blp.csv", "importance.csv", "ale.csv", "decomposition.csv", "gains.csv", "incidence.json",
             "welfare.json", "rate.csv", "tree.json", "hybrid.csv"]


def _files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.cfg"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def run_a(small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    assert main(["all", "--config", str(small_cfg), "--out", str(out), "--quiet"]) == 0
    return out


# ---------------------------------------------------------------- config


def test_parse_text():
    assert parse_text("a = 1  # note\n\n b.c=x y\n") == {"a": "1", "b.c": "x y"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_text("a = 1\nnonsense\n")
    with pytest.raises(ConfigError):
        parse_text(" = 3")


def test_seed_required_when_simulating():
    with pytest.raises(ConfigError, match="seed"):
        from_mapping({"simulate": "true"})
    assert from_mapping({"simulate": "true"}, seed_override=3).seed == 3


def test_exactly_one_data_source():
    with pytest.raises(ConfigError, match="exactly one"):
        from_mapping({"simulate": "true", "data.dir": "x", "seed": "1"})
    with pytest.raises(ConfigError, match="no data source"):
        from_mapping({"simulate": "false"})
    cfg = from_mapping({"data.dir": "somewhere"})
    assert not cfg.simulate and cfg.data_dir == "somewhere"


@pytest.mark.parametrize("key", ["forest.bogus", "simulate.bogus", "simulate.effect.cubic.x", "whatever"])
def test_unknown_key(key):
    with pytest.raises(ConfigError, match="unknown key"):
        from_mapping({"seed": "1", key: "1"})


@pytest.mark.parametrize("key,value", [("forest.n_trees", "many"), ("policy.lambdas", "0.2"),
                                       ("sme.percentile", "100"), ("ale.scheme", "other"),
                                       ("match.covariates", "age,shoe_size"), ("simulate", "maybe")])
def test_bad_values(key, value):
    with pytest.raises(ConfigError):
        from_mapping({"seed": "1", key: value})


def test_values_reach_config():
    cfg = from_mapping(parse_text(SMALL + "simulate.effect.linear.wealth = 2\npolicy.lambdas = 0.5, 1\n"))
    assert cfg.sim.n_consumers == 800 and cfg.forest_trees == 100 and cfg.lambdas == (0.5, 1.0)
    assert cfg.sim.effect.linear == {"wealth": 2.0}


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load(tmp_path / "nope.cfg")


# ---------------------------------------------------------------- CLI


def test_version_entry_point():
    out = subprocess.run([sys.executable, "-m", "stimkit.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("stimkit ")


def test_dependency_error(small_cfg, tmp_path, capsys):
    code = main(["forest", "--config", str(small_cfg), "--out", str(tmp_path)])
    assert code == DependencyError.exit_code == 2
    err = capsys.readouterr().err
    assert "stimkit match" in err and "error" in err


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed = 1\nforest.nope = 3\n")
    assert main(["match", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "unknown key forest.nope" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path):
    cfg = tmp_path / "data.cfg"
    cfg.write_text(f"data.dir = {tmp_path / 'missing'}\n")
    assert main(["match", "--config", str(cfg), "--out", str(tmp_path / "o")]) == DataError.exit_code


def test_all_writes_artifacts(run_a):
    for name in ARTIFACTS:
        assert (run_a / name).is_file(), name
    manifest = json.loads((run_a / "manifest.json").read_text())
    assert manifest["seed"] == 7
    assert set(manifest["steps"]) >= {"match", "did", "forest", "ale", "incidence", "welfare", "target",
                                      "tree", "hybrid"}
    assert {"config", "versions", "inputs_sha256"} <= set(manifest)
    hybrid = (run_a / "hybrid.csv").read_text().splitlines()[0]
    assert hybrid.split(",")[1:] == ["consumers_treated", "government_budget", "consumer_oop",
                                     "funds_for_smes", "total_stimulus"]
    welfare = json.loads((run_a / "welfare.json").read_text())
    assert welfare["mvpf"] == pytest.approx(
        (welfare["consumer_gain"] + welfare["producer_gain"]) / welfare["gov_cost"])


def test_byte_identical_rerun(run_a, small_cfg, tmp_path):
    assert main(["all", "--config", str(small_cfg), "--out", str(tmp_path), "--quiet"]) == 0
    assert _files(tmp_path) == _files(run_a)


def test_manifest_round_trip(run_a, tmp_path):
    target = tmp_path / "again"
    assert main(["all", "--config", str(run_a / "manifest.json"), "--out", str(target), "--quiet"]) == 0
    assert _files(target) == _files(run_a)


def test_single_step_rerun_and_flag_order(run_a, small_cfg, tmp_path, capsys):
    import shutil
    work = tmp_path / "w"
    shutil.copytree(run_a, work)
    (work / "tree.json").unlink()
    assert main(["--out", str(work), "tree", "--config", str(small_cfg)]) == 0
    assert "tree.json" in capsys.readouterr().out
    assert (work / "tree.json").read_bytes() == (run_a / "tree.json").read_bytes()


def test_data_dir_mode(run_a, tmp_path):
    cfg = tmp_path / "data.cfg"
    cfg.write_text(f"data.dir = {run_a / 'data'}\nforest.n_trees = 50\nforest.k_folds = 3\n")
    out = tmp_path / "o"
    assert main(["match", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    assert (out / "matched.csv").read_bytes() == (run_a / "matched.csv").read_bytes()
