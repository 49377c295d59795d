import pytest

from meshgait.config import RunConfig, load_config, parse_assignments, parse_text
from meshgait.errors import ConfigError


def test_defaults_validate():
    cfg = load_config()
    assert cfg == RunConfig()


def test_grammar(tmp_path):
    text = """
    # comment
    seed = 3          ; trailing comment
    [model]
    backbone = tiny
    loss.margin = 0.3
    enable_mesh_branch = no
    [ ]
    batch.P = 4
    optim.milestones = 100, 200
    """
    path = tmp_path / "run.txt"
    path.write_text(text)
    cfg = load_config(path)
    assert cfg.seed == 3 and cfg.model.backbone == "tiny" and cfg.model.loss.margin == 0.3
    assert cfg.model.enable_mesh_branch is False
    assert cfg.batch.P == 4 and cfg.optim.milestones == (100, 200)


def test_to_text_roundtrip(tmp_path):
    cfg = load_config(overrides={"model.fusion": "add", "optim.milestones": "5,9", "model.heatmap_dims": "16,16,16"})
    path = tmp_path / "c.txt"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg


def test_overrides_beat_file_and_env_beats_all(tmp_path, monkeypatch):
    path = tmp_path / "c.txt"
    path.write_text("seed = 1\nmax_steps = 5\n")
    assert load_config(path, {"max_steps": "7"}).max_steps == 7
    monkeypatch.setenv("MESHGAIT_SEED", "42")
    assert load_config(path, {"seed": "2"}).seed == 42


@pytest.mark.parametrize(
    "overrides",
    [
        {"nope": "1"},
        {"model.nope": "1"},
        {"seed.x": "1"},
        {"model": "1"},
        {"max_steps": "ten"},
        {"model.enable_mesh_branch": "maybe"},
        {"model.loss.triplet": "0", "model.loss.ce": "0", "model.loss.joint": "0", "model.loss.mesh": "0"},
        {"batch.K": "1"},
        {"optim.name": "rmsprop"},
        {"eval.protocol": "x"},
    ],
)
def test_invalid_configs(overrides):
    with pytest.raises(ConfigError):
        load_config(overrides=overrides)


def test_parse_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_text("just words")
    with pytest.raises(ConfigError):
        parse_text(" = 3")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt")
    with pytest.raises(ConfigError):
        parse_assignments(["novalue"])
    assert parse_assignments(["a.b = 1"]) == {"a.b": "1"}


def test_shipped_config_loads():
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "configs" / "tiny_synthetic.txt")
    assert cfg.model.backbone == "tiny" and cfg.max_steps == 500
