import json
import math
import subprocess
import sys

import numpy as np
import pytest

from drhuman import cli
from drhuman.render import Camera, rasterize
from drhuman.trainer import (SCENE_FOV, SCENE_HEIGHT, SCENE_RADIUS, SCENE_TARGET, Avatar,
                             load_dataset, load_png)
from drhuman.body import load_model

TINY = {"image_size": 32, "n_views": 4, "holdout_views": 2, "mesh_epochs": 2, "mesh_batch": 2,
        "blocks": 1, "layers": 2, "width": 8, "pretrain_steps": 3, "texture_epochs": 1,
        "texture_batch": 2, "atlas_size": 16}


def write_config(path, **extra):
    path.write_text(json.dumps({**TINY, **extra}))
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """synth -> fit-mesh -> fit-texture in a scratch directory."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json", out_dir="synth")
    assert cli.main(["synth", "--config", str(cfg)]) == 0
    cfg = write_config(root / "mesh.json", data_dir="synth/data", out_dir="mesh")
    assert cli.main(["fit-mesh", "--config", str(cfg)]) == 0
    cfg = write_config(root / "tex.json", data_dir="synth/data", refiner_path="mesh/refiner.drh",
                       out_dir="tex")
    assert cli.main(["fit-texture", "--config", str(cfg)]) == 0
    return root


def orbit_camera(degrees, size=32):
    a = math.radians(degrees)
    eye = [SCENE_RADIUS * math.sin(a), SCENE_HEIGHT, SCENE_RADIUS * math.cos(a)]
    return Camera.look_at(eye, SCENE_TARGET, size=(size, size), fov_deg=SCENE_FOV)


class TestConfig:
    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"nonsense": 1}))
        assert cli.main(["synth", "--config", str(cfg)]) == cli.EXIT_CONFIG
        assert "nonsense" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert cli.main(["synth", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG

    def test_bad_json(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{")
        assert cli.main(["synth", "--config", str(cfg)]) == cli.EXIT_CONFIG

    def test_flags_override(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", seed=3)
        run, train = cli.load_config(cfg, {"seed": 5, "no_clamp": True})
        assert train.seed == 5 and train.no_clamp
        assert run.out_dir == str(tmp_path / "out")

    def test_relative_paths(self, tmp_path):
        run, _ = cli.load_config(write_config(tmp_path / "c.json", data_dir="d"))
        assert run.data_dir == str(tmp_path / "d")

    def test_missing_path_key(self, tmp_path):
        cfg = write_config(tmp_path / "c.json")
        assert cli.main(["fit-mesh", "--config", str(cfg)]) == cli.EXIT_CONFIG

    def test_missing_data(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.json", data_dir="absent")
        assert cli.main(["fit-mesh", "--config", str(cfg)]) == cli.EXIT_DATA
        assert "absent" in capsys.readouterr().err


class TestPipeline:
    def test_synth_layout(self, workdir):
        s = workdir / "synth"
        for name in ("model.json", "truth.obj", "truth_texture.png", "scene.json",
                     "data/poses.json", "data/cameras.json", "holdout/frames/1000.png"):
            assert (s / name).exists(), name
        assert len(load_dataset(s / "data")) == 4

    def test_fit_outputs(self, workdir):
        assert (workdir / "mesh" / "refiner.drh").exists()
        lines = (workdir / "mesh" / "mesh_log.jsonl").read_text().splitlines()
        assert all(json.loads(l)["stage"] == "mesh" for l in lines)
        assert (workdir / "tex" / "avatar.drh").exists()

    def test_eval_identical(self, workdir, tmp_path, capsys):
        cfg = write_config(tmp_path / "e.json", data_dir=str(workdir / "synth/data"),
                           pred_dir=str(workdir / "synth/data"), out_dir=str(tmp_path))
        assert cli.main(["eval", "--config", str(cfg)]) == 0
        assert cli.LPIPS_NOTICE in capsys.readouterr().out
        m = json.loads((tmp_path / "metrics.json").read_text())
        assert m["n_frames"] == 4
        for f in m["frames"]:
            assert abs(f["ssim"] - 1) < 1e-9 and f["mse"] == 0 and f["iou"] == 1
        for key in ("ssim", "mse", "iou"):
            assert abs(m["mean"][key] - np.mean([f[key] for f in m["frames"]])) < 1e-12

    def test_render_then_eval(self, workdir, tmp_path):
        cfg = write_config(tmp_path / "r.json", data_dir=str(workdir / "synth/holdout"),
                           avatar_path=str(workdir / "tex/avatar.drh"), out_dir=str(tmp_path),
                           pred_dir=str(tmp_path / "render"))
        assert cli.main(["render", "--config", str(cfg)]) == 0
        assert cli.main(["eval", "--config", str(cfg)]) == 0
        m = json.loads((tmp_path / "metrics.json").read_text())
        assert m["n_frames"] == 2 and 0 <= m["mean"]["iou"] <= 1

    def test_eval_no_overlap(self, workdir, tmp_path):
        cfg = write_config(tmp_path / "e.json", data_dir=str(workdir / "synth/data"),
                           pred_dir=str(workdir / "synth/holdout"), out_dir=str(tmp_path))
        assert cli.main(["eval", "--config", str(cfg)]) == cli.EXIT_DATA

    def test_corrupt_avatar(self, workdir, tmp_path):
        bad = tmp_path / "bad.drh"
        bad.write_bytes(b"garbage")
        cfg = write_config(tmp_path / "r.json", data_dir=str(workdir / "synth/data"),
                           avatar_path=str(bad), out_dir=str(tmp_path))
        assert cli.main(["render", "--config", str(cfg)]) == cli.EXIT_DATA


class TestReenact:
    def _run(self, workdir, tmp_path, poses, cams):
        (tmp_path / "poses.json").write_text(json.dumps({"poses": [p.tolist() for p in poses]}))
        (tmp_path / "cams.json").write_text(json.dumps({"cameras": [c.to_dict() for c in cams]}))
        cfg = write_config(tmp_path / "re.json", avatar_path=str(workdir / "tex/avatar.drh"),
                           poses_path="poses.json", cameras_path="cams.json",
                           out_dir=str(tmp_path))
        return cli.main(["reenact", "--config", str(cfg)])

    def test_training_pose_bit_exact(self, workdir, tmp_path):
        data = load_dataset(workdir / "synth/data")
        assert self._run(workdir, tmp_path, [data[1].theta], [data[1].camera]) == 0
        rcfg = write_config(tmp_path / "r.json", data_dir=str(workdir / "synth/data"),
                            avatar_path=str(workdir / "tex/avatar.drh"), out_dir=str(tmp_path))
        assert cli.main(["render", "--config", str(rcfg)]) == 0
        a = (tmp_path / "reenact" / "c00_f0000.png").read_bytes()
        b = (tmp_path / "render" / "frames" / "0001.png").read_bytes()
        assert a == b

    def test_novel_camera_coverage(self, workdir, tmp_path):
        data = load_dataset(workdir / "synth/data")
        cam = orbit_camera(45.0)
        assert self._run(workdir, tmp_path, [data[0].theta], [cam]) == 0
        avatar = Avatar.load(workdir / "tex/avatar.drh", load_model(workdir / "tex/model.json"))
        frame = avatar.render(data[0].theta, cam)
        coverage = rasterize(frame.refined, cam).mask
        assert np.array_equal(frame.mask[0], coverage)
        img = load_png(tmp_path / "reenact" / "c00_f0000.png")
        assert not np.any(img[:, coverage == 0])

    def test_report(self, workdir, tmp_path):
        rng = np.random.default_rng(0)
        poses = [np.concatenate([np.zeros(3), rng.normal(scale=0.2, size=69)]) for _ in range(3)]
        assert self._run(workdir, tmp_path, poses, [orbit_camera(30), orbit_camera(200)]) == 0
        rep = json.loads((tmp_path / "reenact.json").read_text())
        assert len(rep["frames"]) == 6
        assert all(not r["violations"] for r in rep["frames"])

    def test_bad_pose_file(self, workdir, tmp_path):
        (tmp_path / "poses.json").write_text(json.dumps({"poses": [[0.0] * 5]}))
        (tmp_path / "cams.json").write_text(json.dumps([orbit_camera(0).to_dict()]))
        cfg = write_config(tmp_path / "re.json", avatar_path=str(workdir / "tex/avatar.drh"),
                           poses_path="poses.json", cameras_path="cams.json",
                           out_dir=str(tmp_path))
        assert cli.main(["reenact", "--config", str(cfg)]) == cli.EXIT_DATA

    def test_check_frame_flags_violations(self, workdir):
        data = load_dataset(workdir / "synth/data")
        avatar = Avatar.load(workdir / "tex/avatar.drh", load_model(workdir / "tex/model.json"))
        frame = avatar.render(data[0].theta, data[0].camera)
        assert cli.check_frame(avatar, frame) == []
        frame.visibility[0, 0, 0] = 0.5
        frame.image[0, 0, 0] = 1.5
        assert len(cli.check_frame(avatar, frame)) == 2


def test_gradcheck_single_seed(tmp_path):
    cfg = write_config(tmp_path / "g.json", gradcheck_seeds=1, out_dir=str(tmp_path))
    assert cli.main(["gradcheck", "--config", str(cfg)]) == 0
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert rep["passed"] and len(rep["checks"]) == 6


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "drhuman.cli", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for flag in ("--config", "--seed", "--no-refinement", "--no-clamp", "--saturating", "--out"):
        assert flag in out
