import json

import pytest

from forge import cli, container

SMALL = """
[synth]
cells_per_stage = 2
n_bench_donors = 2
G = 16
code_dim = 4
nuisance_dim = 4

[head]
dim = 4
steps = 50
operator = "single"
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "forge.toml"
    p.write_text(SMALL)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def digests(root):
    return {p.name: container.digest(p.read_bytes()) for p in sorted(root.iterdir())
            if p.is_file() and not p.name.startswith("manifest_")}


# ---------------------------------------------------------------------------
# exit codes


@pytest.mark.parametrize("body, field", [
    ("[synth]\ncolour = 3\n", "synth.colour"),
    ("[synth]\nG = \"big\"\n", "synth.G"),
    ("[nonsense]\nx = 1\n", "nonsense"),
])
def test_invalid_config_exits_2_and_names_field(tmp_path, capsys, body, field):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(body)
    assert run("synth", "--out", tmp_path / "ws", "--config", cfg) == 2
    assert field in capsys.readouterr().err


def test_missing_required_key_is_named(tmp_path, config, capsys):
    assert run("synth", "--out", tmp_path, "--config", config) == 0
    assert run("audit", "intervene", "--out", tmp_path, "--config", config) == 2
    assert "audit.from_group" in capsys.readouterr().err


def test_infeasible_synth_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[synth]\nn_donors = 1\n")
    assert run("synth", "--out", tmp_path, "--config", cfg) == 2


def test_unreadable_config_exits_2(tmp_path):
    assert run("synth", "--out", tmp_path, "--config", tmp_path / "absent.toml") == 2
    (tmp_path / "broken.toml").write_text("[synth\n")
    assert run("synth", "--out", tmp_path, "--config", tmp_path / "broken.toml") == 2


def test_missing_artifact_exits_1(tmp_path, config, capsys):
    assert run("head", "train", "--out", tmp_path, "--config", config) == 1
    assert "missing workspace artifact" in capsys.readouterr().err


def test_usage_error_exits_2(tmp_path):
    assert run("op", "explode", "--out", tmp_path) == 2


# ---------------------------------------------------------------------------
# seeds and determinism


def test_env_seed_matches_flag_and_changes_output(tmp_path, config, monkeypatch):
    assert run("synth", "--out", tmp_path / "base", "--config", config) == 0
    assert run("synth", "--out", tmp_path / "flag", "--config", config, "--seed", 5) == 0
    monkeypatch.setenv("FORGE_SEED", "5")
    assert run("synth", "--out", tmp_path / "env", "--config", config) == 0
    assert digests(tmp_path / "env") == digests(tmp_path / "flag")
    assert digests(tmp_path / "env")["tensor.fgc"] != digests(tmp_path / "base")["tensor.fgc"]


def test_bad_env_seed_exits_2(tmp_path, config, monkeypatch):
    monkeypatch.setenv("FORGE_SEED", "lots")
    assert run("synth", "--out", tmp_path, "--config", config) == 2


def test_manifest_records_inputs_outputs_and_version(tmp_path, config):
    assert run("synth", "--out", tmp_path, "--config", config) == 0
    assert run("op", "single", "--out", tmp_path, "--config", config, "--layer", 1, "--head", 2, "--name", "single") == 0
    m = json.loads((tmp_path / "manifest_op_single_single.json").read_text())
    assert m["inputs"]["tensor.fgc"] == digests(tmp_path)["tensor.fgc"]
    assert set(m["outputs"]) == {"op_single.fgc"}
    assert m["toolkit_version"] and m["config"]["synth"]["G"] == 16


def test_rerun_reproduces_and_detects_tampering(tmp_path, config):
    assert run("synth", "--out", tmp_path, "--config", config) == 0
    assert run("op", "single", "--out", tmp_path, "--config", config, "--layer", 1, "--head", 2, "--name", "single") == 0
    assert run("head", "train", "--out", tmp_path, "--config", config) == 0
    for m in sorted(tmp_path.glob("manifest_*.json")):
        assert run("rerun", m) == 0, m.name
    blob = bytearray((tmp_path / "tensor.fgc").read_bytes())
    blob[-1] ^= 1
    (tmp_path / "tensor.fgc").write_bytes(bytes(blob))
    assert run("rerun", tmp_path / "manifest_op_single_single.json") == 1


def test_rerun_flags_changed_outputs(tmp_path, config, monkeypatch):
    assert run("synth", "--out", tmp_path, "--config", config) == 0
    m = tmp_path / "manifest_synth.json"
    data = json.loads(m.read_text())
    data["outputs"]["tensor.fgc"] = "0" * 64
    m.write_text(json.dumps(data))
    assert run("rerun", m) == 1
