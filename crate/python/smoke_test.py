"""Smoke test for the neural_cbct Python module.

Uses an installed module if importable; otherwise builds the extension with
cargo and loads it from a temporary directory.
"""

import importlib
import json
import pathlib
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]

SMALL = json.dumps({
    "volume_dims": 16,
    "detector_rows": 16,
    "detector_cols": 16,
    "pixel_pitch": 19.2,
    "num_views": 4,
    "projection_points": 64,
    "epochs": 30,
    "rays_per_view": 64,
    "points_per_ray": 32,
    "log_every": 5,
    "probe_every": 10,
    "eval_every": 10,
    "levels": 4,
    "log2_table_size": 12,
    "hidden": [16],
    "lr": 1e-2,
    "pretrain_epochs": 20,
    "pretrain_points": 512,
})


def load_module(tmp):
    try:
        return importlib.import_module("neural_cbct")
    except ImportError:
        pass
    subprocess.run(
        ["cargo", "build", "--release", "-p", "neural-cbct-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / "libneural_cbct_py.so"
    shutil.copy(lib, pathlib.Path(tmp) / "neural_cbct.so")
    sys.path.insert(0, tmp)
    return importlib.import_module("neural_cbct")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        nc = load_module(tmp)
        tmp = pathlib.Path(tmp)

        gt = nc.phantom("sphere1", SMALL)
        assert gt.dims == [16, 16, 16], gt.dims
        assert nc.psnr(gt, gt) == nc.PSNR_CAP
        assert abs(nc.ssim(gt, gt) - 1.0) < 1e-12

        stack = nc.project(gt, SMALL)
        assert stack.num_views == 4 and stack.shape == (16, 16)
        assert max(stack.image(0)) > 0.0

        gt.save(str(tmp / "gt.json"))
        again = nc.Volume.load(str(tmp / "gt.json"))
        assert again.data() == gt.data()

        pre = nc.FieldModel(SMALL, seed=1)
        rows = pre.pretrain(gt, SMALL)
        assert rows[-1][1] < rows[0][1], rows
        pre.save(str(tmp / "mci.ckpt"), 20)

        model = nc.FieldModel(SMALL, seed=0)
        enc_before = model.encode([[0.0, 0.0, 0.0]])
        model.load_mci(str(tmp / "mci.ckpt"))
        assert model.encode([[0.0, 0.0, 0.0]]) == enc_before
        assert model.provenance.startswith("mci:")

        log = model.train(stack, SMALL, gt)
        assert log[-1][0] == 30
        assert log[-1][3] is not None
        recon = model.extract(16)
        assert recon.dims == [16, 16, 16]
        print(f"psnr {nc.psnr(recon, gt):.2f} dB, ssim {nc.ssim(recon, gt):.4f}")

        try:
            nc.FieldModel('{"bogus": 1}')
        except ValueError as e:
            assert "bogus" in str(e)
        else:
            raise AssertionError("unknown config key accepted")
        try:
            nc.Volume.load(str(tmp / "missing.json"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file accepted")

        code = nc.run_cli(["--out", str(tmp / "cli"), "phantom", "--spec", "sphere1"])
        assert code == 0 and (tmp / "cli" / "phantom.json").is_file()
        print("smoke test ok")


if __name__ == "__main__":
    main()
