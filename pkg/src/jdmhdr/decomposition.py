"""Intrinsic priors: NIR shading, brightness classes, Retinex reflectance, histogram
correlation, and a small joint RGB + Lr-MSI decomposition network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DegenerateError, ShapeError
from .optim import OptimState, adam_step
from .spectral import LrMsi, RgbImage, SpectralCube

SHADING_FLOOR = 1e-4
NIR_RANGE_NM = (850.0, 1000.0)
N_MATERIALS = 6
N_SHADING_LEVELS = 8


# shading and reflectance ---------------------------------------------------------

def estimate_shading_nir(cube: SpectralCube) -> np.ndarray:
    """Mean over 850-1000 nm channels, max-normalized and floored at 1e-4."""
    wl = cube.wavelengths_nm
    nir = (wl >= NIR_RANGE_NM[0]) & (wl <= NIR_RANGE_NM[1])
    if not np.any(nir):
        raise ValueError("cube has no channel in 850-1000 nm")
    s = cube.values[:, :, nir].mean(axis=2)
    peak = s.max()
    if peak <= 0:
        raise DegenerateError("NIR channels are all zero")
    return np.maximum(s / peak, SHADING_FLOOR)


@dataclass(frozen=True)
class ShadingClassMap:
    labels: np.ndarray      # H x W ints in [0, levels)
    bin_edges: np.ndarray   # levels + 1 ascending floats

    @property
    def levels(self) -> int:
        return self.bin_edges.size - 1


def quantize_shading(s: np.ndarray, levels: int = N_SHADING_LEVELS) -> ShadingClassMap:
    """Equal-width bins over [0, 1]; the value 1.0 falls in the top bin."""
    if levels < 2:
        raise ValueError(f"need at least 2 levels, got {levels}")
    s = np.asarray(s, dtype=np.float64)
    labels = np.clip(np.floor(s * levels), 0, levels - 1).astype(np.int64)
    return ShadingClassMap(labels, np.linspace(0.0, 1.0, levels + 1))


def dequantize_shading(c: ShadingClassMap) -> np.ndarray:
    return (c.labels + 0.5) / c.levels


def retinex_reflectance(image: np.ndarray, s: np.ndarray, eps: float = SHADING_FLOOR) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if image.shape[:2] != s.shape:
        raise ShapeError(f"image {image.shape[:2]} vs shading {s.shape}", "spatial")
    return image / np.maximum(s, eps)[:, :, None]


def luminance(values: np.ndarray) -> np.ndarray:
    return values @ np.array([0.299, 0.587, 0.114])


def histogram_pearson(a, b, bins: int = 256) -> float:
    """Pearson correlation of the two 256-bin luminance histograms."""
    va = a.values if isinstance(a, RgbImage) else np.asarray(a)
    vb = b.values if isinstance(b, RgbImage) else np.asarray(b)
    if va.size == 0 or vb.size == 0:
        raise ValueError("images must be nonempty")
    ha = np.histogram(np.clip(luminance(va), 0, 1), bins=bins, range=(0.0, 1.0))[0].astype(float)
    hb = np.histogram(np.clip(luminance(vb), 0, 1), bins=bins, range=(0.0, 1.0))[0].astype(float)
    da, db = ha - ha.mean(), hb - hb.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        raise DegenerateError("histogram has zero variance")
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


# joint decomposition network -------------------------------------------------------

@dataclass
class DecompConfig:
    seed: int = 0
    lr: float = 1e-4
    steps: int = 200
    batch: int = 1
    widths: tuple = (8, 16, 32)
    use_msi: bool = True
    msi_bands: int = 10


def init_decomp_params(seed: int = 0, widths=(8, 16, 32), msi_bands: int = 10) -> dict[str, T.Tensor]:
    """Two encoders (RGB, MSI) and two decoders (material, shading).

    The final 1x1 head of each decoder starts at zero so initial posteriors are uniform.
    """
    rng = np.random.default_rng(seed)
    p: dict[str, T.Tensor] = {}

    def add(name, shape, zero=False):
        data = np.zeros(shape) if zero else T.xavier_uniform(shape, rng)
        p[name] = T.parameter(data, name)

    for enc, cin in (("e_rgb", 3), ("e_spec", msi_bands)):
        c = cin
        for lvl, w in enumerate(widths):
            add(f"{enc}.{lvl}.w", (w, c, 3, 3))
            add(f"{enc}.{lvl}.b", (w,), zero=True)
            c = w
    w1, w2, w3 = widths
    for dec, n_out in (("d_m", N_MATERIALS), ("d_s", N_SHADING_LEVELS)):
        add(f"{dec}.up2.w", (2 * w3, w2, 4, 4))
        add(f"{dec}.up2.b", (w2,), zero=True)
        add(f"{dec}.up1.w", (w2 + 2 * w2, w1, 4, 4))
        add(f"{dec}.up1.b", (w1,), zero=True)
        add(f"{dec}.up0.w", (w1 + 2 * w1, w1, 4, 4))
        add(f"{dec}.up0.b", (w1,), zero=True)
        add(f"{dec}.mix.w", (w1, w1 + 3 + msi_bands, 3, 3))
        add(f"{dec}.mix.b", (w1,), zero=True)
        add(f"{dec}.head.w", (n_out, w1, 1, 1), zero=True)
        add(f"{dec}.head.b", (n_out,), zero=True)
    return p


def _encode(x, p, prefix, n_levels):
    feats = []
    for lvl in range(n_levels):
        x = T.relu(T.conv2d(x, p[f"{prefix}.{lvl}.w"], stride=2, padding=1, bias=p[f"{prefix}.{lvl}.b"]))
        feats.append(x)
    return feats


def _decode(fused, raw, p, prefix):
    f1, f2, f3 = fused
    d = T.relu(T.conv_transpose2d(f3, p[f"{prefix}.up2.w"], 2, 1, bias=p[f"{prefix}.up2.b"]))
    d = T.relu(T.conv_transpose2d(T.concat([d, f2], 1), p[f"{prefix}.up1.w"], 2, 1,
                                  bias=p[f"{prefix}.up1.b"]))
    d = T.relu(T.conv_transpose2d(T.concat([d, f1], 1), p[f"{prefix}.up0.w"], 2, 1,
                                  bias=p[f"{prefix}.up0.b"]))
    d = T.relu(T.conv2d(T.concat([d, raw], 1), p[f"{prefix}.mix.w"], padding=1,
                        bias=p[f"{prefix}.mix.b"]))
    return T.conv2d(d, p[f"{prefix}.head.w"], bias=p[f"{prefix}.head.b"])


def msi_to_resolution(msi: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (N, bands, h, w) or (h, w, bands) Lr-MSI array."""
    if msi.ndim == 3:
        msi = msi.transpose(2, 0, 1)[None]
    out = T.resize(T.Tensor(msi), hw, "bilinear").data
    if out.shape[-2:] != tuple(hw):
        raise ShapeError(f"resized MSI {out.shape[-2:]} != image {hw}", "spatial")
    return out


def decomp_logits(rgb: T.Tensor, msi: T.Tensor, p: dict[str, T.Tensor], use_msi: bool = True):
    """NCHW logits for materials and shading classes.

    ``msi`` must already be at the RGB resolution.  With ``use_msi`` False the
    spectral features are replaced by zeros (the RGB-only comparison model).
    """
    if rgb.shape[-2:] != msi.shape[-2:]:
        raise ShapeError(f"rgb {rgb.shape[-2:]} vs msi {msi.shape[-2:]}", "spatial")
    h, w = rgb.shape[-2:]
    n_levels = 3
    if h % 8 or w % 8:
        raise ShapeError(f"image size {h}x{w} must be a multiple of 8", "spatial")
    f_rgb = _encode(rgb, p, "e_rgb", n_levels)
    if not use_msi:
        msi = T.Tensor(np.zeros(msi.shape))
        f_spec = [T.Tensor(np.zeros(f.shape)) for f in f_rgb]
    else:
        f_spec = _encode(msi, p, "e_spec", n_levels)
    fused = [T.concat([a, b], 1) for a, b in zip(f_rgb, f_spec)]
    raw = T.concat([rgb, msi], 1)
    return _decode(fused, raw, p, "d_m"), _decode(fused, raw, p, "d_s")


def _stack_inputs(rgbs, msis):
    rgb = np.stack([np.asarray(r.values if isinstance(r, RgbImage) else r).transpose(2, 0, 1)
                    for r in rgbs])
    hw = rgb.shape[-2:]
    msi = np.concatenate([msi_to_resolution(np.asarray(m.values if isinstance(m, LrMsi) else m), hw)
                          for m in msis])
    return rgb, msi


def joint_decompose_forward(rgb, msi, p: dict[str, T.Tensor], use_msi: bool = True):
    """Material (H, W, 6) and shading (H, W, 8) logits for a single image."""
    x, m = _stack_inputs([rgb], [msi])
    with T.no_grad():
        lm, ls = decomp_logits(T.Tensor(x), T.Tensor(m), p, use_msi)
    return lm.data[0].transpose(1, 2, 0), ls.data[0].transpose(1, 2, 0)


@dataclass
class DecompSample:
    rgb: np.ndarray            # H x W x 3
    msi: np.ndarray            # h x w x bands
    material: np.ndarray       # H x W labels 0..5
    shading_class: np.ndarray  # H x W labels 0..7


def decomp_loss(p, rgb, msi, material, shading_class, use_msi=True) -> T.Tensor:
    """Equal-weight mean of the material and shading pixel-wise cross-entropies."""
    lm, ls = decomp_logits(T.Tensor(rgb), T.Tensor(msi), p, use_msi)
    return (T.cross_entropy(lm, material) + T.cross_entropy(ls, shading_class)) * 0.5


@dataclass
class DecompResult:
    params: dict[str, T.Tensor]
    losses: list[float] = field(default_factory=list)


def train_decomposition(dataset: list[DecompSample], config: DecompConfig) -> DecompResult:
    if not dataset:
        raise ValueError("training set is empty")
    params = init_decomp_params(config.seed, config.widths, dataset[0].msi.shape[2])
    state = OptimState()
    rng = np.random.default_rng(config.seed + 1)
    prepared = [(_stack_inputs([d.rgb], [d.msi]), d.material, d.shading_class) for d in dataset]
    order: list[int] = []
    losses = []
    for _ in range(config.steps):
        idx = []
        while len(idx) < min(config.batch, len(prepared)):
            if not order:
                order = list(rng.permutation(len(prepared)))
            idx.append(order.pop())
        rgb = np.concatenate([prepared[i][0][0] for i in idx])
        msi = np.concatenate([prepared[i][0][1] for i in idx])
        mat = np.stack([prepared[i][1] for i in idx])
        sh = np.stack([prepared[i][2] for i in idx])
        loss = decomp_loss(params, rgb, msi, mat, sh, config.use_msi)
        T.backward(loss, params.values())
        adam_step(params, {k: v.grad for k, v in params.items()}, state, config.lr)
        losses.append(loss.item())
    return DecompResult(params, losses)


def predict_decomposition(p, rgb, msi, use_msi: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Argmax material labels and shading classes."""
    lm, ls = joint_decompose_forward(rgb, msi, p, use_msi)
    return lm.argmax(axis=2), ls.argmax(axis=2)
