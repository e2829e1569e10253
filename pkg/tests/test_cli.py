import json

import numpy as np
import pytest

from mvedit import cli
from mvedit.config import ConfigError, RunConfig, config_from_dict, dump_config, load_config
from mvedit.diffusion import NumericalError
from mvedit.scene import read_png

TINY = {
    "guidance": {"num_steps": 10},
    "consistency": {"patch_size": 8},
    "scene": {"texture_size": 32, "n_views": 3},
    "experiment": {"sessions": 2, "sweep_sessions": 1, "lambda_sweep": [0.0, 1.0]},
}


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    err = capsys.readouterr().err.strip()
    return code, err


def test_config_round_trip(tmp_path):
    cfg = config_from_dict(TINY)
    assert cfg.guidance.num_steps == 10 and cfg.experiment.lambda_sweep == (0.0, 1.0)
    assert config_from_dict(cfg.to_dict()) == cfg
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert config_from_dict({}) == RunConfig()


@pytest.mark.parametrize("doc, match", [
    ({"guidance": {"lamda": 1}}, "guidance: unknown key"),
    ({"matching": {"filter": {"cap": 3}}}, "matching.filter: unknown key"),
    ({"bogus": 1}, "unknown key"),
    ({"engine": "turbo"}, "engine"),
    ({"guidance": {"n_b": -1}}, "n_b"),
    ({"guidance": {"n_g": 5000}}, "exceed"),
    ({"guidance": 3}, "expected an object"),
])
def test_config_rejections(doc, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")


@pytest.fixture
def workdir(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps(TINY))
    code, _ = run(["gen-scene", "--views", 3, "--spread", 0.1, "--seed", 4, "--texture-size", 32,
                   "--out", tmp_path / "scene"], capsys)
    assert code == 0
    code, _ = run(["match", "--scene", tmp_path / "scene", "--mode", "oracle", "--grid-step", 1,
                   "--out", tmp_path / "matches"], capsys)
    assert code == 0
    return tmp_path


def test_pipeline_and_resolved_configs(workdir, capsys):
    w = workdir
    assert len(list((w / "matches").glob("*.txt"))) == 3
    for sub in ("scene", "matches"):
        assert (w / sub / "config.json").exists()
    assert json.loads((w / "scene" / "config.json").read_text())["scene"]["n_views"] == 3
    code, _ = run(["edit", "--scene", w / "scene", "--matches", w / "matches", "--config", w / "cfg.json",
                   "--out", w / "guided"], capsys)
    assert code == 0
    code, _ = run(["eval", "--scene", w / "scene", "--edited", w / "guided", "--matches", w / "matches",
                   "--config", w / "cfg.json", "--report", w / "guided" / "report.json"], capsys)
    assert code == 0
    report = json.loads((w / "guided" / "report.json").read_text())
    assert report["config"]["heldout"] == "every:5"
    assert set(report["per_pair"]) == {"0-1", "0-2", "1-2"}
    assert (w / "guided" / "config.json").exists() and (w / "guided" / "session.json").exists()


def test_baseline_rerun_bit_identical(workdir, capsys):
    w = workdir
    outs = []
    for name in ("b1", "b2"):
        code, _ = run(["edit", "--scene", w / "scene", "--matches", w / "matches", "--config", w / "cfg.json",
                       "--baseline", "--seed", 9, "--out", w / name], capsys)
        assert code == 0
        outs.append(w / name)
    for v in range(3):
        assert (outs[0] / "edited" / f"{v}.png").read_bytes() == (outs[1] / "edited" / f"{v}.png").read_bytes()
    assert (outs[0] / "session.json").read_text() == (outs[1] / "session.json").read_text()
    cfg = json.loads((outs[0] / "config.json").read_text())
    assert cfg["guidance"]["lambda_guidance"] == 0.0 and cfg["guidance"]["n_b"] == 0 and cfg["seed"] == 9


def test_eval_identical_sets_zero_l1(tmp_path, capsys):
    code, _ = run(["gen-scene", "--views", 3, "--spread", 0.0, "--texture-size", 16, "--out", tmp_path / "s"], capsys)
    assert code == 0
    run(["match", "--scene", tmp_path / "s", "--out", tmp_path / "m"], capsys)
    (tmp_path / "e").mkdir()
    for v in range(3):
        (tmp_path / "e" / f"{v}.png").write_bytes((tmp_path / "s" / f"view_{v:03d}.png").read_bytes())
    code, _ = run(["eval", "--scene", tmp_path / "s", "--edited", tmp_path / "e", "--matches", tmp_path / "m",
                   "--report", tmp_path / "r.json"], capsys)
    assert code == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["matched_l1"] == 0.0 and report["heldout_psnr"] == "inf"


def test_match_file_mode(workdir, capsys):
    w = workdir
    code, _ = run(["match", "--scene", w / "scene", "--mode", "file", "--input", w / "matches",
                   "--certainty-min", 0.5, "--max-matches", 10, "--out", w / "m2"], capsys)
    assert code == 0
    lines = (w / "m2" / "0_1.txt").read_text().splitlines()
    assert lines[0].startswith("# matches view_a=0 view_b=1") and len(lines) == 11


def test_error_exit_codes(workdir, capsys, monkeypatch):
    w = workdir
    code, err = run(["edit", "--nope"], capsys)
    assert code == 2 and json.loads(err)["error"] == "usage"
    code, err = run(["edit", "--scene", w / "missing", "--matches", w / "matches", "--out", w / "x"], capsys)
    assert code == 3 and json.loads(err)["type"] == "SceneIOError"
    (w / "bad.json").write_text(json.dumps({"guidance": {"lamda": 1}}))
    code, err = run(["edit", "--scene", w / "scene", "--matches", w / "matches", "--config", w / "bad.json",
                     "--out", w / "x"], capsys)
    assert code == 2 and "lamda" in json.loads(err)["message"]
    code, err = run(["eval", "--scene", w / "scene", "--edited", w / "scene", "--matches", w / "matches",
                     "--report", w / "r.json"], capsys)
    assert code == 3 and json.loads(err)["type"] == "MissingViewError"
    code, err = run(["match", "--scene", w / "scene", "--mode", "file", "--out", w / "m3"], capsys)
    assert code == 2

    def explode(*a, **k):
        raise NumericalError("non-finite guidance gradient at t=10 (grad norm=nan)")

    monkeypatch.setattr("mvedit.scheduler.sample", explode)
    code, err = run(["edit", "--scene", w / "scene", "--matches", w / "matches", "--out", w / "x"], capsys)
    line = json.loads(err)
    assert code == 4 and line["error"] == "numerical" and "view 0" in line["message"]
    assert len(err.splitlines()) == 1


def test_edited_images_are_valid(workdir, capsys):
    w = workdir
    run(["edit", "--scene", w / "scene", "--matches", w / "matches", "--config", w / "cfg.json",
         "--engine", "onestep", "--out", w / "one"], capsys)
    img = read_png(w / "one" / "edited" / "0.png")
    assert img.shape == (32, 32, 3) and np.all((img >= 0) & (img <= 1))
    assert json.loads((w / "one" / "config.json").read_text())["engine"] == "onestep"
