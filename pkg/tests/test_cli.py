import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from jdmhdr import cli
from jdmhdr import spectral as sp
from jdmhdr.enhance import EnhanceConfig, identity_params


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert cli.main(["gen-synthetic", "--out", str(root), "--seed", "7", "--count", "4", "--hw", "32"]) == 0
    return root


def test_gen_synthetic_layout_and_determinism(dataset, tmp_path):
    dirs = sorted(p.name for p in dataset.iterdir() if p.is_dir())
    assert dirs == [f"scene_{k:04d}" for k in range(4)]
    again = tmp_path / "ds"
    cli.main(["gen-synthetic", "--out", str(again), "--seed", "7", "--count", "4", "--hw", "32"])
    assert _tree(again) == _tree(dataset)
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["seed"] == 7 and len(manifest["config_hash"]) == 64
    assert set(manifest) == {"command", "config", "config_hash", "seed", "code_version"}


def _identity_checkpoint(path, **kw):
    cfg = EnhanceConfig(full=32, lowres=16, grid=(4, 4, 8), use_s=False, **kw)
    cli.save_enhance_checkpoint(path, identity_params(cfg), cfg)
    return cfg


def test_enhance_with_identity_checkpoint_returns_clamped_input(dataset, tmp_path):
    scene = dataset / "scene_0001"
    ckpt = tmp_path / "id.jdmp"
    _identity_checkpoint(ckpt)
    out = tmp_path / "out.png"
    code = cli.main(["enhance", "--checkpoint", str(ckpt), "--rgb", str(scene / "rgb16.png"),
                     "--segmentation", str(scene / "segmentation.png"), "--cube", str(scene / "cube.scub"),
                     "--out", str(out), "--bit-depth", "16", "--dump", str(tmp_path / "dump")])
    assert code == 0
    inp = sp.read_png_rgb(scene / "rgb16.png").values
    np.testing.assert_array_equal(sp.read_png_rgb(out).values, np.clip(inp, 0, 1))
    dumped = sorted(p.name for p in (tmp_path / "dump").iterdir())
    assert dumped == ["attention.npz", "grid.jdmp", "guidance.png", "s_hat.png", "weights.json"]
    assert abs(sum(json.loads((tmp_path / "dump" / "weights.json").read_text())) - 1) < 1e-9


def test_train_enhance_is_byte_identical(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"crop": 32, "lowres": 16, "grid": [4, 4, 8], "steps": 2, "batch": 2}))
    for name in ("a", "b"):
        assert cli.main(["train-enhance", "--data", str(dataset), "--out", str(tmp_path / name),
                         "--config", str(cfg), "--seed", "3", "--msi-size", "8"]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    params, config, meta = cli.load_enhance_checkpoint(tmp_path / "a" / cli.ENHANCE_CKPT)
    assert config.seed == 3 and meta["msi_hw"] == 8


def test_decomposition_commands_are_byte_identical(dataset, tmp_path):
    for name in ("a", "b"):
        run = tmp_path / name
        assert cli.main(["train-decomp", "--data", str(dataset), "--out", str(run), "--steps", "2"]) == 0
        assert cli.main(["decompose", "--cube", str(dataset / "scene_0000" / "cube.scub"),
                         "--checkpoint", str(run / cli.DECOMP_CKPT), "--out", str(run / "priors")]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    labels = sp.read_png_gray(tmp_path / "a" / "priors" / "shading_class.png")
    assert labels.min() >= 0 and labels.max() <= 7


def test_simulate_msi_and_eval(dataset, tmp_path, capsys):
    scene = dataset / "scene_0002"
    out = tmp_path / "msi.scub"
    assert cli.main(["simulate-msi", "--cube", str(scene / "cube.scub"), "--out", str(out),
                     "--size", "4", "--window", "400,700"]) == 0
    msi = sp.read_cube(out)
    assert msi.values.shape == (4, 4, 5)
    report = tmp_path / "ev.json"
    cli.main(["eval", "--pred", str(scene / "target8.png"), "--target", str(scene / "target8.png"),
              "--out", str(report)])
    doc = json.loads(report.read_text())
    assert doc["psnr_db"] == "inf" and doc["delta_e"] == 0.0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [ln.split()[0] for ln in lines[-3:]] == ["PSNR", "SSIM", "dE76"]


def test_align_recovers_translation(dataset, tmp_path):
    pts = [[x, y, x + 2.0, y + 1.0] for x, y in ((0, 0), (20, 0), (0, 20), (20, 20), (7, 13))]
    (tmp_path / "c.json").write_text(json.dumps(pts))
    assert cli.main(["align", "--correspondences", str(tmp_path / "c.json"), "--image",
                     str(dataset / "scene_0000" / "rgb16.png"), "--out", str(tmp_path / "al")]) == 0
    h = np.array(json.loads((tmp_path / "al" / "homography.json").read_text()))
    np.testing.assert_allclose(h / h[2, 2], [[1, 0, 2], [0, 1, 1], [0, 0, 1]], atol=1e-9)
    assert (tmp_path / "al" / "warped.png").exists()


def test_ablate_tables_are_identical(tmp_path):
    args = ["ablate", "--axis", "experts", "--values", "1,2", "--scenes", "4", "--hw", "32",
            "--steps", "1", "--batch", "2"]
    for name in ("a", "b"):
        assert cli.main(args + ["--out", str(tmp_path / name)]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    rows = json.loads((tmp_path / "a" / "ablation.json").read_text())["rows"]
    assert [r["setting"] for r in rows] == ["1", "2"]


def test_usage_errors_exit_2(capsys):
    for argv in (["no-such-command"], ["ablate", "--axis", "colour", "--out", "x"],
                 ["gen-synthetic", "--out", "x", "--bogus"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_errors_exit_1_with_structured_message(tmp_path, capsys):
    code = cli.main(["eval", "--pred", str(tmp_path / "missing.png"), "--target", str(tmp_path / "x.png")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["command"] == "eval" and err["error"] == "FileNotFoundError"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "jdmhdr", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "0.1.0"


def test_config_file_flags_survive_cli_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"use_s": False, "steps": 7}))
    args = cli.build_parser().parse_args(["train-enhance", "--data", "d", "--out", "o",
                                          "--config", str(tmp_path / "c.json"), "--no-r"])
    cfg = cli._enhance_config_from_args(args, 10)
    assert (cfg.use_s, cfg.use_r, cfg.use_m, cfg.steps) == (False, False, True, 7)
