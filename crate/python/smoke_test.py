"""Smoke test for the fisheye_ba_py extension module."""

import math
import pathlib
import tempfile

import fisheye_ba_py as fb

ROOT = pathlib.Path(__file__).resolve().parent.parent


def main():
    cam = fb.FisheyeCamera(40.0, 40.0, 31.5, 31.5, 64, 64, k=[0.08, 0.0, 0.0])
    p = cam.unproject(10.0, 50.0, 3.0)
    u, v = cam.project(p)
    assert abs(u - 10.0) < 1e-6 and abs(v - 50.0) < 1e-6, (u, v)
    theta = 0.6
    assert abs(cam.undistort_angle(40.0 * math.tan(cam.distort_angle(theta))) - theta) < 1e-10

    intr = (100.0, 100.0, 50.0, 40.0, 100, 80)
    x = fb.pinhole_project(*intr, fb.pinhole_unproject(*intr, 12.5, 7.25, 2.0))
    assert abs(x[0] - 12.5) < 1e-10 and abs(x[1] - 7.25) < 1e-10

    a = [0.0] * (16 * 16 * 3)
    b = [0.1] * (16 * 16 * 3)
    assert abs(fb.psnr(a, b, 16, 16) - 20.0) < 1e-9
    assert fb.ssim(a, a, 16, 16) == 1.0

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        cfg = tmp / "run.toml"
        cfg.write_text("[optimizer]\niterations = [3]\n[field]\nresolution = [8, 8, 8]\niterations = 4\n")
        data, field = tmp / "data", tmp / "field.vxf"
        assert fb.cli(["synth", str(ROOT / "configs" / "ring_fisheye.toml"), str(data), "--config", str(cfg)]) == 0
        assert fb.cli(["fit", str(data), str(field), "--config", str(cfg)]) == 0
        w, h, rgb = fb.render(str(field), str(data / "cameras.json"), 0, n_samples=32)
        assert len(rgb) == w * h * 3 and all(0.0 <= c <= 1.0 for c in rgb)
        assert fb.cli(["no-such-command"]) == 1
    print("smoke test passed")


if __name__ == "__main__":
    main()
