import json
import os

import numpy as np
import pytest

import cli
from cli import build_parser, main
from errors import PipelineDiverged
from image_io import load_rig, read_pfm


@pytest.fixture(scope="module")
def rendered(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["render", "--scene", "sphere", "--size", "24", "--out", str(out)]) == 0
    return out


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "fast.toml"
    path.write_text("[pipeline]\nmax_global_iters = 2\nkeypoints = 80\n")
    return str(path)


class TestCli:

    def test_render_layout(self, rendered):
        names = sorted(os.listdir(rendered / "images"))
        assert names == [f"light_{j:02d}.pfm" for j in range(5)]
        for name in ("normals.pfm", "positions.pfm", "recon_mask.png", "smooth_mask.png",
                     "hairy_mask.png", "plane.json"):
            assert (rendered / "proxy" / name).exists()
        assert (rendered / "truth" / "depth.pfm").exists()
        assert load_rig(str(rendered / "rig.json")).n_lights == 5

    def test_calibrate(self, rendered, tmp_path, fast_config):
        out = tmp_path / "rig.json"
        code = main(["calibrate", "--images", str(rendered / "images"), "--proxy", str(rendered / "proxy"),
                     "--keypoints", "60", "--config", fast_config, "--out", str(out),
                     "--keypoints-csv", str(tmp_path / "kp.csv")])
        assert code == 0
        assert load_rig(str(out)).n_lights == 5
        assert (tmp_path / "kp.csv").exists()

    def test_reconstruct_and_evaluate(self, rendered, tmp_path, fast_config, capsys):
        out = tmp_path / "recon"
        code = main(["reconstruct", "--images", str(rendered / "images"), "--proxy", str(rendered / "proxy"),
                     "--config", fast_config, "--truth", str(rendered / "truth"),
                     "--mesh-format", "ply", "--save-masks", "--out", str(out)])
        assert code == 0
        for name in ("depth.pfm", "normals.pfm", "normals.png", "rig.json", "keypoints.csv",
                     "mesh.ply", "report.json"):
            assert (out / name).exists()
        assert (out / "gradients" / "gx.pfm").exists()
        assert len(os.listdir(out / "valid")) == 5
        report = json.loads((out / "report.json").read_text())
        assert report["iterations"][0]["depth_error"] is not None

        capsys.readouterr()
        assert main(["evaluate", "--truth", str(rendered / "truth"), "--recon", str(out)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert 0.0 <= printed["depth_error"] < 0.1

    def test_invalid_input_exit_code(self, tmp_path, rendered):
        empty = tmp_path / "empty"
        empty.mkdir()
        code = main(["reconstruct", "--images", str(empty), "--proxy", str(rendered / "proxy"),
                     "--out", str(tmp_path / "x")])
        assert code == 2

    def test_bad_config_exit_code(self, tmp_path, rendered):
        bad = tmp_path / "bad.toml"
        bad.write_text("[calibration]\nd = -1.0\n")
        code = main(["calibrate", "--images", str(rendered / "images"), "--proxy", str(rendered / "proxy"),
                     "--config", str(bad), "--out", str(tmp_path / "rig.json")])
        assert code == 2

    def test_parser_requires_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_repeated_runs_write_identical_files(self, rendered, tmp_path, fast_config):
        outputs = []
        for name in ("first", "second"):
            out = tmp_path / name
            code = main(["reconstruct", "--images", str(rendered / "images"), "--proxy", str(rendered / "proxy"),
                         "--config", fast_config, "--out", str(out)])
            assert code == 0
            outputs.append(out)
        for name in ("depth.pfm", "normals.pfm", "mesh.obj", "gradients/gx.pfm", "gradients/gy.pfm"):
            assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()
        gx = read_pfm(str(outputs[0] / "gradients" / "gx.pfm"))
        assert np.isfinite(gx).any()

    def test_divergence_exit_code(self, rendered, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise PipelineDiverged("Depth error increased for 3 consecutive iterations")

        monkeypatch.setattr(cli, "reconstruct", diverge)
        code = main(["reconstruct", "--images", str(rendered / "images"), "--proxy", str(rendered / "proxy"),
                     "--out", str(tmp_path / "x")])
        assert code == 3

    def test_sweep_with_default_config(self, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = main(["sweep", "--scene", "bumpy", "--distances", "1", "10", "--size", "24",
                     "--keypoints", "100", "--out", str(out)])
        assert code == 0
        for name in ("sweep.csv", "sweep.json", "sweep.html"):
            assert (out / name).exists()
        rows = json.loads((out / "sweep.json").read_text())
        assert [row["distance"] for row in rows] == [1.0, 10.0]
