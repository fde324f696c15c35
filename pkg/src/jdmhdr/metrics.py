"""Image quality and segmentation metrics: PSNR, SSIM, CIE76 delta E, mIoU."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .spectral import RgbImage

# sRGB (IEC 61966-2-1) linear RGB -> XYZ, D65
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = np.array([0.950470, 1.0, 1.088830])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, RgbImage) else x, dtype=np.float64)


def _pair(a, b):
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ShapeError(f"image shapes differ: {va.shape} vs {vb.shape}", "shape")
    return va, vb


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over all channels; ``inf`` for identical images."""
    va, vb = _pair(a, b)
    mse = float(np.mean((va - vb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = k.size
    x = sliding_window_view(x, n, axis=0) @ k
    return sliding_window_view(x, n, axis=1) @ k


def _ssim_channel(x, y, k, c1, c2):
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    va, vb = _pair(a, b)
    if va.ndim == 2:
        va, vb = va[:, :, None], vb[:, :, None]
    if min(va.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"image {va.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
                         "spatial")
    k = gaussian_window()
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    return float(np.mean([_ssim_channel(va[:, :, c], vb[:, :, c], k, c1, c2)
                          for c in range(va.shape[2])]))


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def _lab_f(t):
    delta = 6.0 / 29.0
    return np.where(t > delta ** 3, np.cbrt(t), t / (3 * delta * delta) + 4.0 / 29.0)


def srgb_to_lab(rgb) -> np.ndarray:
    """sRGB in [0, 1] (last axis) to CIELAB under D65."""
    xyz = srgb_to_linear(rgb) @ SRGB_TO_XYZ.T
    f = _lab_f(xyz / D65_WHITE)
    lab = np.stack([116.0 * f[..., 1] - 16.0,
                    500.0 * (f[..., 0] - f[..., 1]),
                    200.0 * (f[..., 1] - f[..., 2])], axis=-1)
    return lab


def delta_e(a, b) -> float:
    """Mean CIE76 colour difference."""
    va, vb = _pair(a, b)
    d = srgb_to_lab(va) - srgb_to_lab(vb)
    return float(np.mean(np.sqrt((d * d).sum(axis=-1))))


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"label maps differ: {pred.shape} vs {gt.shape}", "shape")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if m.size and (m.min() < 0 or m.max() >= n_classes):
            raise ValueError(f"{name} label outside [0, {n_classes})")
    idx = gt.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def miou(pred, gt, n_classes: int) -> tuple[list[float], float]:
    """Per-class IoU (NaN when a class is absent from both maps) and their mean."""
    cm = confusion_matrix(pred, gt, n_classes)
    tp = np.diag(cm).astype(float)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = [float(tp[c] / union[c]) if union[c] > 0 else math.nan for c in range(n_classes)]
    valid = [v for v in per_class if not math.isnan(v)]
    return per_class, float(np.mean(valid)) if valid else math.nan


@dataclass
class EvalReport:
    psnr_db: float
    ssim: float
    delta_e: float
    per_class_iou: list = field(default_factory=list)
    miou: float = math.nan

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and (math.isnan(v) or math.isinf(v)):
                return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return json.dumps({k: clean(v) for k, v in asdict(self).items()}, indent=2, sort_keys=True)


def evaluate(pred_img, target_img, pred_seg=None, gt_seg=None, n_classes: int = 6) -> EvalReport:
    report = EvalReport(psnr(pred_img, target_img), ssim(pred_img, target_img),
                        delta_e(pred_img, target_img))
    if pred_seg is not None and gt_seg is not None:
        report.per_class_iou, report.miou = miou(pred_seg, gt_seg, n_classes)
    return report
