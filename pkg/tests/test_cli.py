import json
import subprocess
import sys

import numpy as np
import pytest

from difftex import cli, pipeline
from difftex.errors import OptimizationError
from difftex.scene_io import SceneConfig, read_image
from difftex.synth import SynthSpec, generate_synthetic_scene, write_synthetic_scene


@pytest.fixture
def tiny_scene(tmp_path):
    spec = SynthSpec(geometry="quad", size=(2.0, 1.0), gt_resolution=256, rig="hemisphere", count=3,
                     radius=5.0, image_size=(120, 90), fronto=True, seed=5)
    cfg = write_synthetic_scene(generate_synthetic_scene(spec), tmp_path / "scene")
    return tmp_path / "scene" / "scene.json", cfg


def _texture(scene, out, *extra):
    return cli.main(["texture", "--scene", str(scene), "--out", str(out), "--max-iterations", "3", *extra])


def test_texture_synth_eval_round_trip(tiny_scene, tmp_path, capsys):
    scene, _ = tiny_scene
    out = tmp_path / "out"
    assert _texture(scene, out) == 0
    assert (out / "model.obj").is_file() and (out / "textures" / "polygon_000.png").is_file()
    report = json.loads((out / "report.json").read_text())
    assert len(report["polygons"]) == 1
    assert report["polygons"][0]["stages"][0]["iterations"] == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["settings"]["max_iterations"] == 3 and manifest["threads"] == 1
    assert cli.main(["eval", "--recon", str(out), "--gt", str(scene.parent)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0 <= metrics["error_p95"] < 0.5
    assert "error_p95" in capsys.readouterr().out


def test_missing_photo_directory_exits_2_and_names_it(tiny_scene, tmp_path, capsys):
    scene, cfg = tiny_scene
    d = cfg.to_json()
    d["photo_dir"] = "missing_photos"
    bad = scene.parent / "bad.json"
    bad.write_text(json.dumps(d))
    assert _texture(bad, tmp_path / "out") == 2
    assert "missing_photos" in capsys.readouterr().err


def test_invalid_config_exits_2(tiny_scene, tmp_path, capsys):
    scene, _ = tiny_scene
    assert _texture(scene, tmp_path / "out", "--max-res", "300") == 2
    assert "target_resolution" in capsys.readouterr().err


def test_missing_scene_file_exits_2(tmp_path):
    assert _texture(tmp_path / "nope.json", tmp_path / "out") == 2


def test_eval_of_missing_recon_exits_2(tmp_path, capsys):
    assert cli.main(["eval", "--recon", str(tmp_path / "none"), "--gt", str(tmp_path)]) == 2
    assert "none" in capsys.readouterr().err


def test_optimizer_failure_exits_1(tiny_scene, tmp_path, monkeypatch, capsys):
    scene, _ = tiny_scene

    def boom(inp, settings):
        raise OptimizationError("non-finite gradient", polygon=inp.polygon.index)

    monkeypatch.setattr(pipeline, "optimize_polygon", boom)
    assert _texture(scene, tmp_path / "out") == 1
    err = capsys.readouterr().err
    assert "[optimizer]" in err and "polygon 0" in err


def test_unexpected_failure_exits_1(tiny_scene, tmp_path, monkeypatch):
    scene, _ = tiny_scene
    monkeypatch.setattr(pipeline, "optimize_polygon", lambda inp, s: 1 / 0)
    assert _texture(scene, tmp_path / "out") == 1


def test_synth_subcommand_writes_a_loadable_scene(tmp_path):
    assert cli.main(["synth", "--spec", "corner-biased", "--out", str(tmp_path)]) == 0
    cfg = SceneConfig.load(tmp_path / "scene.json")
    assert cfg.target_resolution == 256
    assert len(list((tmp_path / "gt").glob("polygon_*.png"))) == 2
    assert cli.main(["synth", "--spec", "nope", "--out", str(tmp_path / "x")]) == 2


def test_thread_count_comes_from_the_environment(tiny_scene, tmp_path, monkeypatch):
    scene, _ = tiny_scene
    monkeypatch.setenv("DIFFTEX_THREADS", "3")
    assert _texture(scene, tmp_path / "a") == 0
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["threads"] == 3
    assert _texture(scene, tmp_path / "b", "--threads", "2") == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["threads"] == 2
    monkeypatch.setenv("DIFFTEX_THREADS", "many")
    assert _texture(scene, tmp_path / "c") == 2


def test_coefficient_flags_reach_the_optimizer(tiny_scene, tmp_path):
    scene, _ = tiny_scene
    assert _texture(scene, tmp_path / "o", "--alpha", "0", "--beta", "0", "--omega", "4",
                    "--lr", "0.01", "--tau-w", "0.9", "--lambda-s", "0.25", "--seed", "9") == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    s = m["settings"]
    assert (s["alpha"], s["beta"], s["omega"], s["lr"], s["tau_w"], s["lambda_s"]) == (0, 0, 4, 0.01, 0.9, 0.25)
    assert m["seed"] == 9


def test_module_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "difftex", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "difftex" in out.stdout


def test_thread_counts_give_identical_textures(tiny_scene, tmp_path):
    scene, _ = tiny_scene
    assert _texture(scene, tmp_path / "t1", "--threads", "1") == 0
    assert _texture(scene, tmp_path / "t8", "--threads", "8") == 0
    a = read_image(tmp_path / "t1" / "textures" / "polygon_000.png")
    b = read_image(tmp_path / "t8" / "textures" / "polygon_000.png")
    assert np.array_equal(a, b)
