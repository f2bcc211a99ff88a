import json
import shutil

import numpy as np
import pytest

from robsuite import suite as suite_mod
from robsuite.cli import main
from robsuite.errors import ConfigError, IntegrityError, StageError
from robsuite.pipeline import STAGES, Pipeline, load_config

MEMBER = {"epochs": 6, "triplets": 512}
TINY = {
    "dataset": {"identities": 8, "pairs": 128},
    "zoo": {"accuracy_floor": 0.6, "dummy": "II", "n_tuning": 2,
            "members": [{"layer_widths": [32, 16], **MEMBER},
                        {"smoothing_kernel": 3, "layer_widths": [32, 16], "noise_aug_sigma": 0.1, **MEMBER},
                        {"layer_widths": [48, 16], "activation": "tanh", **MEMBER},
                        {"smoothing_kernel": 5, "layer_widths": [32, 16], "noise_aug_sigma": 0.2, **MEMBER}]},
    "schemes": {name: {"enabled": False} for name in ("l2_small", "l2_large", "linf_large", "patch",
                                                      "radial_large")},
    "gen": {"steps": 15},
    "reference": {"steps": 15},
    "ga": {"generations": 30, "population": 16},
    "experiments": {"seeds": [0], "adaptive_system": "I", "adaptive_epochs": 2},
}


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("run")
    assert main(["pipeline", "--config", str(config_path), "--out", str(out)]) == 0
    return out


def test_pipeline_builds_a_verified_suite(run_dir):
    for name in STAGES:
        assert (run_dir / "stages" / f"{name}.json").exists()
    st = suite_mod.load(run_dir / "assemble")
    assert st.scheme_names == ["linf_small", "illum", "radial_small"]
    assert suite_mod.verify(st) == []
    zoo = json.loads((run_dir / "zoo" / "zoo.json").read_text())
    assert zoo["dummy"] not in zoo["tuning"] + zoo["testing"]
    assert len(zoo["tuning"]) == 2 and len(zoo["testing"]) == 1


def test_rerun_skips_completed_stages(run_dir, config_path):
    before = (run_dir / "assemble" / "manifest.json").read_bytes()
    p = Pipeline(load_config(config_path), run_dir)
    assert set(p.run().values()) == {"skipped"}
    assert (run_dir / "assemble" / "manifest.json").read_bytes() == before


def test_seed_override_rebuilds_only_downstream(run_dir, config_path, tmp_path):
    p = Pipeline(load_config(config_path, {"suite": {"seed": 5}}), run_dir)
    base = Pipeline(load_config(config_path), run_dir)
    assert p.stage_hash("pools") == base.stage_hash("pools")
    assert p.stage_hash("select") != base.stage_hash("select")


def test_evaluate_and_verify_commands(run_dir, capsys, tmp_path):
    system = run_dir / "zoo" / "I"
    suite_dir = run_dir / "assemble"
    assert main(["evaluate", str(system), str(suite_dir), "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["backward_count"] == 0 and set(rep["per_scheme"]) == {"linf_small", "illum", "radial_small"}
    assert main(["evaluate", str(system), str(suite_dir), "--out", str(tmp_path / "r.csv"), "--format", "csv"]) == 0
    assert (tmp_path / "r.csv").read_text().startswith("system_id,scheme,robustness,time_s")
    capsys.readouterr()
    assert main(["verify", str(suite_dir), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["violations"] == []


def test_experiments_command(run_dir, config_path):
    args = ["experiments", "rq1", "--config", str(config_path), "--out", str(run_dir)]
    assert main(args) == 0
    result = json.loads((run_dir / "experiments" / "rq1.json").read_text())
    assert set(result["schemes"]) == {"linf_small", "illum", "radial_small"}
    assert main(["experiments", "speedup", "--config", str(config_path), "--out", str(run_dir)]) == 0


def test_exit_code_for_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[nonsense]\nx = 1\n")
    assert main(["pipeline", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    broken = tmp_path / "broken.toml"
    broken.write_text("[dataset\n")
    assert main(["pipeline", "--config", str(broken), "--out", str(tmp_path / "o")]) == 2
    assert main(["pipeline", "--out", str(tmp_path / "o"), "--jobs", "0"]) == 2
    with pytest.raises(ConfigError):
        load_config(None, {"ga": {"objective": "sideways"}})


def test_exit_code_for_stage_failure(tmp_path, config_path, capsys):
    cfg = json.loads(config_path.read_text())
    cfg["zoo"]["accuracy_floor"] = 1.01
    path = tmp_path / "strict.json"
    path.write_text(json.dumps(cfg))
    assert main(["pipeline", "--config", str(path), "--out", str(tmp_path / "o")]) == 4
    assert "[zoo]" in capsys.readouterr().err
    with pytest.raises(StageError) as info:
        Pipeline(load_config(path), tmp_path / "o").run()
    assert info.value.stage == "zoo"


def test_exit_code_for_integrity_errors(run_dir, config_path, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    blob = copy / "assemble" / "perturbed" / "illum.rbt"
    data = bytearray(blob.read_bytes())
    data[-1] ^= 0x01
    blob.write_bytes(bytes(data))
    assert main(["verify", str(copy / "assemble")]) == 3
    assert main(["pipeline", "--config", str(config_path), "--out", str(copy)]) == 3
    with pytest.raises(IntegrityError):
        Pipeline(load_config(config_path), copy).run()


def test_objective_and_literal_flags_change_stage_hashes(config_path):
    base = Pipeline(load_config(config_path), "unused")
    lit = Pipeline(load_config(config_path, {"ga": {"objective": "literal"}}), "unused")
    eq4 = Pipeline(load_config(config_path, {"reference": {"literal_eq4": True}}), "unused")
    assert lit.stage_hash("select") != base.stage_hash("select")
    assert lit.stage_hash("references") == base.stage_hash("references")
    assert eq4.stage_hash("references") != base.stage_hash("references")


def test_selection_respects_cardinality(run_dir, config_path):
    p = Pipeline(load_config(config_path), run_dir)
    for scheme in p.schemes:
        sel = p.load_selection(scheme.name)
        pool = p.load_pool(scheme.name)
        assert sel["cfg"]["k_min"] <= len(sel["z"]) <= sel["cfg"]["k_max"]
        assert np.all(np.asarray(sel["z"]) < len(pool))
