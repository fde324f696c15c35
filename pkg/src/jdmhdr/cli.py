"""Command-line entry point.

Every subcommand that writes a run directory also writes ``manifest.json``
holding the command, its configuration, a SHA-256 of the canonical config,
the seed and the package version.  Nothing time-dependent is recorded, so
repeated runs with the same inputs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import spectral as sp
from .checkpoint import load_params, save_params
from .decomposition import (DecompConfig, estimate_shading_nir, predict_decomposition,
                            quantize_shading, retinex_reflectance, train_decomposition)
from .enhance import EnhanceConfig, init_enhance_params, jdm_forward, train_enhancement
from .errors import DegenerateError, FormatError, ShapeError
from .grid import BilateralGrid
from .harness import AXES, DatasetIndex, RunConfig, run_ablation, write_synthetic_dataset
from .metrics import evaluate
from .registration import estimate_homography_dlt, read_correspondences, warp_image
from .tensor import parameter

log = logging.getLogger("jdmhdr")

DECOMP_CKPT = "decomp.jdmp"
ENHANCE_CKPT = "enhance.jdmp"


# small helpers --------------------------------------------------------------------------

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(run_dir: Path, command: str, config: dict, seed: int | None) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "manifest.json", {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(_canonical(config).encode()).hexdigest(),
        "seed": seed,
        "code_version": __version__,
    })


def _window(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi' in nm, got {text!r}")
    return lo, hi


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return h, w


def save_enhance_checkpoint(path, params, config: EnhanceConfig, msi_hw: int = 16,
                            msi_window=(400.0, 1000.0)) -> None:
    meta = {"kind": "enhance", "config": config.to_dict(), "msi_hw": int(msi_hw),
            "msi_window": [float(v) for v in msi_window]}
    save_params(path, params, meta)


def load_enhance_checkpoint(path):
    arrays, meta = load_params(path)
    if meta.get("kind") != "enhance":
        raise FormatError(f"{path}: not an enhancement checkpoint")
    config = EnhanceConfig.from_dict(meta["config"])
    expected = init_enhance_params(config)
    missing = set(expected) - set(arrays)
    if missing:
        raise FormatError(f"{path}: missing tensors {sorted(missing)[:3]}")
    params = {k: parameter(arrays[k], k) for k in expected}
    return params, config, meta


def _load_rgb(path) -> np.ndarray:
    return sp.read_png_rgb(path).values


# subcommands ------------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    out = Path(args.out)
    config = {"seed": args.seed, "count": args.count, "hw": args.hw,
              "n_channels": args.channels, "metameric": args.metameric}
    write_synthetic_dataset(out, args.seed, args.count, args.hw, args.channels, args.metameric)
    write_manifest(out, "gen-synthetic", config, args.seed)
    print(f"wrote {args.count} scenes to {out}")
    return 0


def cmd_simulate_msi(args) -> int:
    cube = sp.read_cube(args.cube)
    msi = sp.simulate_lr_msi(cube, out_hw=args.size)
    if args.window:
        msi = msi.select(args.window)
    centres = np.array([(lo + hi) / 2 for lo, hi in msi.band_ranges_nm])
    sp.write_cube(sp.SpectralCube(msi.values, centres), args.out)
    print(f"wrote {msi.values.shape[2]}-band {args.size}x{args.size} Lr-MSI to {args.out}")
    return 0


def cmd_decompose(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cube = sp.read_cube(args.cube)
    rgb = (_load_rgb(args.rgb) if args.rgb else
           sp.project_rgb(cube.values, sp.SensitivityBank.gaussian_rgb(cube.wavelengths_nm)))
    shading = estimate_shading_nir(cube)
    classes = quantize_shading(shading)
    sp.write_png_gray(out / "shading.png", shading, bit_depth=16, scale=True)
    sp.write_png_gray(out / "shading_class.png", classes.labels)
    refl = np.clip(retinex_reflectance(rgb, shading), 0.0, 1.0)
    sp.write_png_rgb(out / "reflectance.png", sp.RgbImage(refl, 16).quantized())
    if args.checkpoint:
        arrays, meta = load_params(args.checkpoint)
        use_msi = bool(meta.get("use_msi", True))
        params = {k: parameter(v, k) for k, v in arrays.items()}
        msi = sp.simulate_lr_msi(cube, out_hw=int(meta.get("msi_hw", 16)))
        material, shade_cls = predict_decomposition(params, rgb, msi.values, use_msi)
        sp.write_png_gray(out / "material_pred.png", material)
        sp.write_png_gray(out / "shading_class_pred.png", shade_cls)
    print(f"wrote priors to {out}")
    return 0


def cmd_train_decomp(args) -> int:
    run = Path(args.out)
    index = DatasetIndex.load(args.data)
    samples = index.decomp_samples(args.msi_size)
    cfg = DecompConfig(seed=args.seed, lr=args.lr, steps=args.steps, batch=args.batch,
                       use_msi=not args.no_msi)
    result = train_decomposition(samples, cfg)
    config = {"seed": cfg.seed, "lr": cfg.lr, "steps": cfg.steps, "batch": cfg.batch,
              "widths": list(cfg.widths), "use_msi": cfg.use_msi, "msi_hw": args.msi_size,
              "data": str(args.data)}
    write_manifest(run, "train-decomp", config, args.seed)
    save_params(run / DECOMP_CKPT, result.params, {"kind": "decomp", **config})
    _write_json(run / "losses.json", [round(v, 12) for v in result.losses])
    print(f"final loss {result.losses[-1]:.6f}; checkpoint {run / DECOMP_CKPT}")
    return 0


def _enhance_config_from_args(args, n_bands: int) -> EnhanceConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    overrides = {"seed": args.seed, "steps": args.steps, "lr": args.lr, "batch": args.batch,
                 "n_experts": args.n_experts}
    base.update({k: v for k, v in overrides.items() if v is not None})
    # the --no-* switches only ever disable a prior the config file enabled
    for flag in ("s", "r", "m"):
        if getattr(args, f"no_{flag}"):
            base[f"use_{flag}"] = False
    base["msi_bands"] = n_bands
    return EnhanceConfig.from_dict(base)


def cmd_train_enhance(args) -> int:
    run = Path(args.out)
    index = DatasetIndex.load(args.data)
    window = args.window or (400.0, 1000.0)
    samples = index.enhance_samples(args.msi_size, window)
    cfg = _enhance_config_from_args(args, samples[0].msi.shape[2])
    result = train_enhancement(samples, cfg, log_every=max(cfg.steps // 10, 1), log=log.info)
    config = {**cfg.to_dict(), "msi_hw": args.msi_size, "msi_window": list(window),
              "data": str(args.data)}
    write_manifest(run, "train-enhance", config, cfg.seed)
    save_enhance_checkpoint(run / ENHANCE_CKPT, result.params, cfg, args.msi_size, window)
    _write_json(run / "losses.json", [round(v, 12) for v in result.losses])
    print(f"final loss {result.losses[-1]:.6f}; checkpoint {run / ENHANCE_CKPT}")
    return 0


def cmd_enhance(args) -> int:
    params, cfg, meta = load_enhance_checkpoint(args.checkpoint)
    rgb = _load_rgb(args.rgb)
    if args.cube:
        cube = sp.read_cube(args.cube)
        shading = estimate_shading_nir(cube)
        msi = sp.simulate_lr_msi(cube, out_hw=meta["msi_hw"]).select(tuple(meta["msi_window"])).values
    else:
        if not (args.msi and args.shading):
            raise ValueError("enhance needs --cube, or both --msi and --shading")
        msi = sp.read_cube(args.msi).values
        shading = np.maximum(sp.read_png_gray(args.shading, scale=True), 1e-4)
    seg = sp.read_png_gray(args.segmentation)
    out = jdm_forward(rgb[None], msi[None], shading[None], seg[None], params, cfg)
    sp.write_png_rgb(args.out, sp.RgbImage(out.final[0], args.bit_depth).quantized())
    if args.dump:
        d = Path(args.dump)
        d.mkdir(parents=True, exist_ok=True)
        sp.write_png_gray(d / "s_hat.png", np.clip(out.s_hat[0], 0, 1), bit_depth=16, scale=True)
        sp.write_png_gray(d / "guidance.png", out.guidance[0], bit_depth=16, scale=True)
        np.savez(d / "attention.npz", **{f"level{i}": a for i, a in enumerate(out.attention)})
        _write_json(d / "weights.json", [round(float(v), 12) for v in out.weights[0]])
        grid = BilateralGrid(out.grid[0])
        save_params(d / "grid.jdmp", {"grid": grid.serialized()}, {"kind": "grid", "layout": "12,D,H,W"})
    print(f"wrote {args.out}")
    return 0


def _fixed_table(report) -> str:
    rows = [("PSNR (dB)", report.psnr_db), ("SSIM", report.ssim), ("dE76", report.delta_e)]
    if report.per_class_iou:
        rows.append(("mIoU", report.miou))
    return "\n".join(f"{name:<10}{value:>12.4f}" for name, value in rows)


def cmd_eval(args) -> int:
    pred, target = sp.read_png_rgb(args.pred), sp.read_png_rgb(args.target)
    pseg = sp.read_png_gray(args.pred_seg) if args.pred_seg else None
    gseg = sp.read_png_gray(args.gt_seg) if args.gt_seg else None
    report = evaluate(pred, target, pseg, gseg)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(_fixed_table(report))
    return 0


def cmd_ablate(args) -> int:
    run = Path(args.out)
    cfg = RunConfig(seed=args.seed, n_scenes=args.scenes, hw=args.hw, steps=args.steps, lr=args.lr,
                    batch=args.batch, metameric=args.metameric)
    values = args.values
    if args.axis == "spectral" and values:
        if len(values) % 2:
            raise ValueError("spectral values are lo,hi pairs")
        values = list(zip(values[::2], values[1::2]))
    table = run_ablation(cfg, args.axis, values)
    listed = None if values is None else [np.atleast_1d(v).tolist() for v in values]
    write_manifest(run, "ablate", {**cfg.to_dict(), "axis": args.axis, "values": listed}, cfg.seed)
    (run / "ablation.json").write_text(table.to_json())
    (run / "ablation.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return 0


def cmd_align(args) -> int:
    corr = read_correspondences(args.correspondences)
    h = estimate_homography_dlt(corr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "homography.json", h.matrix.round(12).tolist())
    if args.image:
        src = sp.read_png_rgb(args.image)
        size = args.size or src.values.shape[:2]
        warped = warp_image(src.values, h, size)
        sp.write_png_rgb(out / "warped.png", sp.RgbImage(warped, src.bit_depth).quantized())
    print(f"wrote alignment to {out}")
    return 0


# parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jdmhdr", description="Spectral-prior HDR tone enhancement toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write synthetic scenes with cubes and PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--hw", type=int, default=64)
    p.add_argument("--channels", type=int, default=61)
    p.add_argument("--metameric", action="store_true")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("simulate-msi", help="area-downsample a cube into a 10-band Lr-MSI")
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--window", type=_window, help="band window lo,hi in nm")
    p.set_defaults(func=cmd_simulate_msi)

    p = sub.add_parser("decompose", help="shading, classes and reflectance from a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--rgb", help="16-bit RGB PNG (default: project the cube)")
    p.add_argument("--checkpoint", help="decomposition checkpoint for material prediction")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train-decomp", help="train the joint decomposition network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--msi-size", type=int, default=16)
    p.add_argument("--no-msi", action="store_true", help="RGB-only comparison model")
    p.set_defaults(func=cmd_train_decomp)

    p = sub.add_parser("train-enhance", help="train the enhancement network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--n-experts", type=int, choices=(1, 2, 4, 6))
    p.add_argument("--no-s", action="store_true")
    p.add_argument("--no-r", action="store_true")
    p.add_argument("--no-m", action="store_true")
    p.add_argument("--msi-size", type=int, default=16)
    p.add_argument("--window", type=_window)
    p.set_defaults(func=cmd_train_enhance)

    p = sub.add_parser("enhance", help="enhance one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--segmentation", required=True)
    p.add_argument("--cube", help="cube supplying the Lr-MSI and NIR shading")
    p.add_argument("--msi", help="Lr-MSI as SCUBE (with --shading)")
    p.add_argument("--shading", help="16-bit shading PNG (with --msi)")
    p.add_argument("--out", required=True)
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    p.add_argument("--dump", help="directory for S_hat, g, A, w and the mixed grid")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="PSNR, SSIM, dE76 and optional mIoU")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--pred-seg")
    p.add_argument("--gt-seg")
    p.add_argument("--out", help="EvalReport JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train one model per setting of an ablation axis")
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", type=_int_list)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=40)
    p.add_argument("--hw", type=int, default=64)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--metameric", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("align", help="homography from correspondences, optional warp")
    p.add_argument("--correspondences", required=True, help="JSON array of [x1, y1, x2, y2]")
    p.add_argument("--image", help="PNG to warp into the reference frame")
    p.add_argument("--size", type=_hw, help="output HxW (default: input size)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_align)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)          # usage errors exit with status 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, FormatError, ShapeError, DegenerateError) as exc:
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
