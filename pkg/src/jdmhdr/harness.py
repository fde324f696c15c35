"""Dataset assembly, training orchestration and ablation sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import spectral as sp
from .decomposition import (DecompConfig, DecompSample, estimate_shading_nir, predict_decomposition,
                            quantize_shading, train_decomposition)
from .enhance import EnhanceConfig, EnhanceSample, enhance_images, train_enhancement
from .metrics import delta_e, miou, psnr, ssim

log = logging.getLogger("jdmhdr")

# per-material gamma of the reference tone operator
LABEL_GAMMA = {0: 0.7, 1: 1.3, 2: 0.8, 3: 1.4, 4: 1.0, 5: 0.9}
SCURVE_MIX = 0.5
AXES = ("priors", "spatial", "spectral", "experts")


# reference tone operator -------------------------------------------------------------

def s_curve(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return (1.0 - SCURVE_MIX) * x + SCURVE_MIX * x * x * (3.0 - 2.0 * x)


def reference_target(truth: sp.SceneTruth, bank: sp.SensitivityBank | None = None) -> sp.RgbImage:
    """8-bit target: per-material gamma and an S-curve on the shading-free RGB,
    re-shaded with the compressed shading S^0.5."""
    bank = bank or sp.SensitivityBank.gaussian_rgb(truth.wavelengths_nm)
    albedo = sp.project_rgb(truth.illuminant[None, None, :] * truth.reflectance, bank)
    gamma = np.vectorize(LABEL_GAMMA.get)(truth.segmentation).astype(np.float64)
    toned = s_curve(albedo ** gamma[:, :, None])
    out = np.clip(toned * np.sqrt(truth.shading)[:, :, None], 0.0, 1.0)
    return sp.RgbImage(out, bit_depth=8).quantized()


@dataclass
class SceneBundle:
    seed: int
    truth: sp.SceneTruth
    cube: sp.SpectralCube
    rgb16: sp.RgbImage
    target8: sp.RgbImage


def make_scene(seed: int, hw: int = 64, n_channels: int = 61, metameric: bool = False) -> SceneBundle:
    truth = sp.generate_synthetic_scene(seed, hw, n_channels, metameric)
    cube = sp.render_cube(truth)
    return SceneBundle(seed, truth, cube, sp.render_rgb(truth).quantized(), reference_target(truth))


def enhance_sample(bundle: SceneBundle, msi_hw: int = 16, msi_window=(400.0, 1000.0)) -> EnhanceSample:
    msi = sp.simulate_lr_msi(bundle.cube, out_hw=msi_hw).select(msi_window)
    return EnhanceSample(bundle.rgb16.values, msi.values, estimate_shading_nir(bundle.cube),
                         bundle.truth.segmentation, bundle.target8.values)


def decomp_sample(bundle: SceneBundle, msi_hw: int = 16) -> DecompSample:
    msi = sp.simulate_lr_msi(bundle.cube, out_hw=msi_hw)
    return DecompSample(bundle.rgb16.values, msi.values, bundle.truth.segmentation,
                        quantize_shading(bundle.truth.shading).labels)


# split ---------------------------------------------------------------------------------

def _split_key(seed: int, index: int) -> str:
    return hashlib.sha256(f"{seed}:{index}".encode()).hexdigest()


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[list[int], list[int]]:
    """Deterministic 80/20 split: items ranked by a hash of (seed, index)."""
    if n < 2:
        raise ValueError("need at least two samples to split")
    ranked = sorted(range(n), key=lambda i: _split_key(seed, i))
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    return sorted(ranked[:n_train]), sorted(ranked[n_train:])


# on-disk dataset ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    rgb16: str
    target8: str
    segmentation: str
    cube: str | None = None
    seed: int | None = None


@dataclass
class DatasetIndex:
    root: Path
    records: list[SampleRecord] = field(default_factory=list)

    @classmethod
    def load(cls, root) -> "DatasetIndex":
        root = Path(root)
        data = json.loads((root / "index.json").read_text())
        idx = cls(root, [SampleRecord(**r) for r in data["samples"]])
        for rec in idx.records:
            for name in (rec.rgb16, rec.target8, rec.segmentation, rec.cube):
                if name is not None and not (root / name).exists():
                    raise FileNotFoundError(f"dataset file missing: {root / name}")
        return idx

    def save(self) -> None:
        doc = {"samples": [asdict(r) for r in self.records]}
        (self.root / "index.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def enhance_samples(self, msi_hw: int = 16, msi_window=(400.0, 1000.0)) -> list[EnhanceSample]:
        out = []
        for rec in self.records:
            cube = sp.read_cube(self.root / rec.cube)
            msi = sp.simulate_lr_msi(cube, out_hw=msi_hw).select(msi_window)
            out.append(EnhanceSample(sp.read_png_rgb(self.root / rec.rgb16).values, msi.values,
                                     estimate_shading_nir(cube),
                                     sp.read_png_gray(self.root / rec.segmentation),
                                     sp.read_png_rgb(self.root / rec.target8).values))
        return out

    def decomp_samples(self, msi_hw: int = 16) -> list[DecompSample]:
        out = []
        for rec in self.records:
            cube = sp.read_cube(self.root / rec.cube)
            out.append(DecompSample(sp.read_png_rgb(self.root / rec.rgb16).values,
                                    sp.simulate_lr_msi(cube, out_hw=msi_hw).values,
                                    sp.read_png_gray(self.root / rec.segmentation),
                                    quantize_shading(estimate_shading_nir(cube)).labels))
        return out


def write_synthetic_dataset(root, seed: int, count: int, hw: int = 64, n_channels: int = 61,
                            metameric: bool = False) -> DatasetIndex:
    """One directory per scene with cube, 16-bit input, 8-bit target and label PNGs."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = DatasetIndex(root)
    for k in range(count):
        scene_seed = seed * 100003 + k
        b = make_scene(scene_seed, hw, n_channels, metameric)
        d = root / f"scene_{k:04d}"
        d.mkdir(exist_ok=True)
        sp.write_cube(b.cube, d / "cube.scub")
        sp.write_png_rgb(d / "rgb16.png", b.rgb16)
        sp.write_png_rgb(d / "target8.png", b.target8)
        sp.write_png_gray(d / "segmentation.png", b.truth.segmentation)
        sp.write_png_gray(d / "shading.png", b.truth.shading, bit_depth=16, scale=True)
        rel = d.name
        index.records.append(SampleRecord(f"{rel}/rgb16.png", f"{rel}/target8.png",
                                          f"{rel}/segmentation.png", f"{rel}/cube.scub", scene_seed))
    index.save()
    return index


# experiments -------------------------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "toy"
    n_scenes: int = 40
    hw: int = 64
    n_channels: int = 61
    steps: int = 500
    lr: float = 3e-3
    batch: int = 4
    use_s: bool = True
    use_r: bool = True
    use_m: bool = True
    n_experts: int = 6
    msi_window: tuple = (400.0, 1000.0)
    msi_hw: int = 16
    metameric: bool = False

    def __post_init__(self):
        self.msi_window = tuple(float(v) for v in self.msi_window)
        lo, hi = self.msi_window
        if not 400.0 <= lo < hi <= 1000.0:
            raise ValueError(f"spectral window {self.msi_window} must lie inside [400, 1000]")
        if self.n_experts not in (1, 2, 4, 6):
            raise ValueError("n_experts must be 1, 2, 4 or 6")
        if self.preset not in ("toy", "large"):
            raise ValueError("preset must be 'toy' or 'large'")

    def enhance_config(self, n_bands: int) -> EnhanceConfig:
        kw = dict(use_s=self.use_s, use_r=self.use_r, use_m=self.use_m, n_experts=self.n_experts,
                  msi_bands=n_bands, seed=self.seed, lr=self.lr, batch=self.batch, steps=self.steps)
        if self.preset == "large":
            return EnhanceConfig.large(**kw)
        return EnhanceConfig.toy(full=self.hw, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["msi_window"] = list(self.msi_window)
        return d


def scene_seeds(config: RunConfig) -> list[int]:
    return [config.seed * 100003 + k for k in range(config.n_scenes)]


def _bundles(config: RunConfig, cache: dict | None = None) -> list[SceneBundle]:
    key = (config.seed, config.n_scenes, config.hw, config.n_channels, config.metameric)
    if cache is not None and key in cache:
        return cache[key]
    bundles = [make_scene(s, config.hw, config.n_channels, config.metameric)
               for s in scene_seeds(config)]
    if cache is not None:
        cache[key] = bundles
    return bundles


def evaluate_images(preds: np.ndarray, targets: list[np.ndarray]) -> dict:
    p = [psnr(a, b) for a, b in zip(preds, targets)]
    return {"psnr": float(np.mean(p)),
            "ssim": float(np.mean([ssim(a, b) for a, b in zip(preds, targets)])),
            "delta_e": float(np.mean([delta_e(a, b) for a, b in zip(preds, targets)]))}


def train_and_evaluate(config: RunConfig, cache: dict | None = None) -> dict:
    """Train one enhancement model on the 80% split and score the held-out 20%.

    With a ``cache`` dict, scene bundles and finished runs are memoized so a
    setting shared by two ablation axes trains once.
    """
    run_key = ("run", json.dumps(config.to_dict(), sort_keys=True))
    if cache is not None and run_key in cache:
        return dict(cache[run_key])
    bundles = _bundles(config, cache)
    samples = [enhance_sample(b, config.msi_hw, config.msi_window) for b in bundles]
    train_idx, test_idx = split_indices(len(samples), config.seed)
    ecfg = config.enhance_config(samples[0].msi.shape[2])
    result = train_enhancement([samples[i] for i in train_idx], ecfg)
    test = [samples[i] for i in test_idx]
    preds = enhance_images(result.params, ecfg, test)
    scores = evaluate_images(preds, [s.target for s in test])
    scores["train_loss_first"] = result.losses[0]
    scores["train_loss_last"] = result.losses[-1]
    if cache is not None:
        cache[run_key] = dict(scores)
    return scores


def _ablation_settings(axis: str, values):
    if axis == "priors":
        names = ("baseline", "+S", "+S+R", "+S+R+M")
        flags = ((False, False, False), (True, False, False), (True, True, False), (True, True, True))
        return [(n, dict(use_s=s, use_r=r, use_m=m)) for n, (s, r, m) in zip(names, flags)]
    if axis == "spatial":
        values = values or (1, 4, 16, 64)
        return [(f"{int(v)}x{int(v)}", dict(msi_hw=int(v))) for v in values]
    if axis == "experts":
        values = values or (1, 2, 4, 6)
        return [(str(int(v)), dict(n_experts=int(v), use_m=int(v) > 1)) for v in values]
    if axis == "spectral":
        values = values or ((400, 700), (700, 1000), (400, 1000))
        return [(f"{int(lo)}-{int(hi)}nm", dict(msi_window=(float(lo), float(hi))))
                for lo, hi in values]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


@dataclass
class AblationTable:
    axis: str
    rows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"axis": self.axis, "rows": self.rows}, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        header = f"{'setting':<14}{'PSNR(dB)':>10}{'SSIM':>9}{'dE76':>9}"
        lines = [f"ablation: {self.axis}", header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r['setting']:<14}{r['psnr']:>10.4f}{r['ssim']:>9.4f}{r['delta_e']:>9.4f}")
        return "\n".join(lines) + "\n"


def run_ablation(config: RunConfig, axis: str, values=None, cache: dict | None = None) -> AblationTable:
    """Train one model per setting of ``axis`` under the shared seed."""
    settings = _ablation_settings(axis, values)
    cache = {} if cache is None else cache
    table = AblationTable(axis)
    for name, overrides in settings:
        cfg = replace(config, **overrides)
        log.info("ablation %s: training %s", axis, name)
        scores = train_and_evaluate(cfg, cache)
        table.rows.append({"setting": name, **{k: round(v, 10) for k, v in scores.items()}})
    return table


def decomposition_comparison(seed: int = 0, n_scenes: int = 20, hw: int = 32, steps: int = 300,
                             lr: float = 5e-3, batch: int = 4) -> dict:
    """Held-out material mIoU of the RGB + Lr-MSI model versus the RGB-only model
    on metameric scenes."""
    bundles = [make_scene(seed * 100003 + k, hw, metameric=True) for k in range(n_scenes)]
    samples = [decomp_sample(b) for b in bundles]
    train_idx, test_idx = split_indices(n_scenes, seed)
    out = {}
    for name, use_msi in (("rgb+msi", True), ("rgb", False)):
        cfg = DecompConfig(seed=seed, lr=lr, steps=steps, batch=batch, use_msi=use_msi)
        res = train_decomposition([samples[i] for i in train_idx], cfg)
        preds = [predict_decomposition(res.params, samples[i].rgb, samples[i].msi, use_msi)[0]
                 for i in test_idx]
        gts = [samples[i].material for i in test_idx]
        out[name] = miou(np.stack(preds), np.stack(gts), 6)[1]
    return out
