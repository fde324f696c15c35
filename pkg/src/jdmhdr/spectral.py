"""Spectral cubes, RGB images and Lr-MSI: data model, I/O, rendering, synthesis.

Rendering discretizes the imaging model as a weighted sum over wavelength
samples::

    cube[x, c] = L(lambda_c) * S(x) * R(lambda_c, x)
    rgb[x, k]  = sum_c C_k(lambda_c) cube[x, c] dl_c / sum_c C_k(lambda_c) dl_c
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import FormatError, ShapeError
from .tensor import interp_matrix

SCUBE_MAGIC = b"SCUB"
SCUBE_VERSION = 1

LABELS = ("building", "plant", "sky", "trunk", "road", "others")
MSI_BANDS_NM = tuple((400.0 + 60.0 * k, 460.0 + 60.0 * k) for k in range(10))


@dataclass(frozen=True)
class SpectralCube:
    values: np.ndarray           # H x W x C, channel-last
    wavelengths_nm: np.ndarray   # C, strictly increasing

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "wavelengths_nm", wl)
        if values.ndim != 3:
            raise ShapeError(f"cube values must be HxWxC, got {values.shape}", "rank")
        if wl.shape != (values.shape[2],):
            raise ShapeError(f"{wl.size} wavelengths for {values.shape[2]} channels", "channels")
        if wl.size > 1 and np.any(np.diff(wl) <= 0):
            raise FormatError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("cube values must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class RgbImage:
    values: np.ndarray  # H x W x 3 in [0, 1]
    bit_depth: int = 16

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 3 or values.shape[2] != 3:
            raise ShapeError(f"RGB image must be HxWx3, got {values.shape}", "channels")
        if self.bit_depth not in (8, 16):
            raise ValueError(f"bit depth must be 8 or 16, got {self.bit_depth}")
        if np.any(values < 0) or np.any(values > 1):
            raise ValueError("RGB values must lie in [0, 1]")

    @property
    def divisor(self) -> int:
        return 255 if self.bit_depth == 8 else 65535

    def quantized(self) -> "RgbImage":
        d = self.divisor
        return RgbImage(np.round(self.values * d) / d, self.bit_depth)


@dataclass(frozen=True)
class LrMsi:
    values: np.ndarray                      # h x w x bands
    band_ranges_nm: tuple = MSI_BANDS_NM

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "band_ranges_nm", tuple(tuple(map(float, b))
                                                          for b in self.band_ranges_nm))
        if values.ndim != 3 or values.shape[2] != len(self.band_ranges_nm):
            raise ShapeError(f"Lr-MSI shape {values.shape} does not match "
                             f"{len(self.band_ranges_nm)} bands", "bands")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("Lr-MSI values must be finite and non-negative")

    @property
    def band_centers_nm(self) -> np.ndarray:
        return np.array([(lo + hi) / 2 for lo, hi in self.band_ranges_nm])

    def select(self, window_nm: tuple[float, float]) -> "LrMsi":
        """Keep the bands lying entirely inside ``window_nm``."""
        lo, hi = window_nm
        keep = [i for i, (a, b) in enumerate(self.band_ranges_nm) if a >= lo and b <= hi]
        if not keep:
            raise ValueError(f"no Lr-MSI band inside {window_nm}")
        return LrMsi(self.values[:, :, keep], tuple(self.band_ranges_nm[i] for i in keep))


@dataclass(frozen=True)
class SensitivityBank:
    wavelengths_nm: np.ndarray
    curves: np.ndarray  # K x C

    def __post_init__(self):
        curves = np.asarray(self.curves, dtype=np.float64)
        object.__setattr__(self, "curves", curves)
        object.__setattr__(self, "wavelengths_nm", np.asarray(self.wavelengths_nm, float))
        if curves.shape[1] != self.wavelengths_nm.size:
            raise ShapeError("sensitivity curves and wavelength grid disagree", "wavelengths")
        if np.any(curves < 0) or np.any(curves.sum(axis=1) <= 0):
            raise ValueError("sensitivity curves must be non-negative with positive integral")

    @classmethod
    def gaussian_rgb(cls, wavelengths_nm, centers=(620.0, 550.0, 460.0), std=35.0):
        """Consumer-like R, G, B Gaussians truncated to the grid."""
        wl = np.asarray(wavelengths_nm, dtype=np.float64)
        curves = np.stack([np.exp(-0.5 * ((wl - c) / std) ** 2) for c in centers])
        return cls(wl, curves)


@dataclass(frozen=True)
class SceneTruth:
    wavelengths_nm: np.ndarray
    illuminant: np.ndarray        # C, positive
    shading: np.ndarray           # H x W in (0, 1]
    reflectance: np.ndarray       # H x W x C in [0, 1]
    segmentation: np.ndarray      # H x W labels 0..5
    region_labels: tuple = field(default=())

    @property
    def hw(self) -> tuple[int, int]:
        return self.shading.shape


# SCUBE I/O -----------------------------------------------------------------------

def _scube_header(height, width, wavelengths):
    return {
        "height": int(height),
        "width": int(width),
        "channels": len(wavelengths),
        "wavelengths_nm": [float(w) for w in wavelengths],
        "dtype": "f32le",
        "layout": "hwc-row-major",
    }


def write_cube(cube: SpectralCube, path) -> None:
    header = json.dumps(_scube_header(cube.height, cube.width, cube.wavelengths_nm),
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SCUBE_MAGIC)
        fh.write(struct.pack("<II", SCUBE_VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def parse_cube_header(blob: bytes) -> tuple[dict, int]:
    """Validate a SCUBE header; returns ``(header, payload_offset)``."""
    if blob[:4] != SCUBE_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {SCUBE_MAGIC!r}")
    if len(blob) < 12:
        raise FormatError("truncated header")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != SCUBE_VERSION:
        raise FormatError(f"unsupported SCUBE version {version}")
    if len(blob) < 12 + hlen:
        raise FormatError("truncated header")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    for key in ("height", "width", "channels", "wavelengths_nm"):
        if key not in header:
            raise FormatError(f"header missing {key!r}")
    if header.get("dtype", "f32le") != "f32le" or header.get("layout", "hwc-row-major") != "hwc-row-major":
        raise FormatError("only f32le hwc-row-major payloads are supported")
    h, w, c = header["height"], header["width"], header["channels"]
    if min(h, w, c) < 1:
        raise FormatError(f"non-positive dimensions {h}x{w}x{c}")
    wl = np.asarray(header["wavelengths_nm"], dtype=np.float64)
    if wl.size != c:
        raise FormatError(f"{wl.size} wavelengths listed for {c} channels")
    if c > 1 and np.any(np.diff(wl) <= 0):
        raise FormatError("wavelengths are not strictly increasing")
    return header, 12 + hlen


def read_cube(path) -> SpectralCube:
    blob = Path(path).read_bytes()
    header, offset = parse_cube_header(blob)
    h, w, c = header["height"], header["width"], header["channels"]
    need = 4 * h * w * c
    if len(blob) - offset < need:
        raise FormatError(f"payload truncated: {len(blob) - offset} of {need} bytes")
    values = np.frombuffer(blob, dtype="<f4", count=h * w * c, offset=offset)
    return SpectralCube(values.astype(np.float64).reshape(h, w, c), header["wavelengths_nm"])


# PNG I/O --------------------------------------------------------------------------

def write_png_rgb(path, image, bit_depth: int | None = None) -> None:
    if isinstance(image, RgbImage):
        bit_depth = bit_depth or image.bit_depth
        values = image.values
    else:
        values = np.asarray(image, dtype=np.float64)
        bit_depth = bit_depth or 8
    d = 255 if bit_depth == 8 else 65535
    q = np.round(np.clip(values, 0.0, 1.0) * d).astype(np.uint8 if bit_depth == 8 else np.uint16)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q[:, :, ::-1])):
        raise OSError(f"could not write {path}")


def read_png_rgb(path) -> RgbImage:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(path)
    if raw.ndim != 3 or raw.shape[2] < 3:
        raise ShapeError(f"{path}: expected a colour image", "channels")
    bit_depth = 16 if raw.dtype == np.uint16 else 8
    d = 255 if bit_depth == 8 else 65535
    return RgbImage(raw[:, :, 2::-1].astype(np.float64) / d, bit_depth)


def write_png_gray(path, values: np.ndarray, bit_depth: int = 8, scale: bool = False) -> None:
    """Write a single-channel PNG.

    With ``scale`` the float input in [0, 1] is mapped to the full integer
    range; otherwise values are stored verbatim (label maps).
    """
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    if scale:
        d = 255 if bit_depth == 8 else 65535
        values = np.round(np.clip(values, 0.0, 1.0) * d)
    if not cv2.imwrite(str(path), np.ascontiguousarray(values.astype(dtype))):
        raise OSError(f"could not write {path}")


def read_png_gray(path, scale: bool = False) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(path)
    if raw.ndim != 2:
        raise ShapeError(f"{path}: expected a single-channel image", "channels")
    if scale:
        return raw.astype(np.float64) / (255 if raw.dtype == np.uint8 else 65535)
    return raw.astype(np.int64)


# Lr-MSI simulation ----------------------------------------------------------------------

def band_membership(wavelengths_nm: np.ndarray, bands=MSI_BANDS_NM) -> list[np.ndarray]:
    """Channel indices per band; the last band is closed on the right."""
    wl = np.asarray(wavelengths_nm)
    members = []
    for k, (lo, hi) in enumerate(bands):
        upper = wl <= hi if k == len(bands) - 1 else wl < hi
        members.append(np.flatnonzero((wl >= lo) & upper))
    return members


def simulate_lr_msi(cube: SpectralCube, n_bands: int = 10, out_hw: int = 16) -> LrMsi:
    """Band-average the cube into contiguous 60 nm-style bands, then box-average spatially.

    Tiles are the equal (possibly fractional) partitions of each axis, so the
    spatial step preserves mean radiance exactly.
    """
    wl = cube.wavelengths_nm
    lo, hi = 400.0, 1000.0
    if wl[0] > lo or wl[-1] < hi:
        raise ValueError(f"cube spans {wl[0]}-{wl[-1]} nm; 400-1000 nm required")
    if out_hw > cube.height or out_hw > cube.width:
        raise ShapeError(f"out_hw {out_hw} exceeds cube size {cube.height}x{cube.width}",
                         "spatial")
    step = (hi - lo) / n_bands
    bands = tuple((lo + step * k, lo + step * (k + 1)) for k in range(n_bands))
    members = band_membership(wl, bands)
    for (a, b), idx in zip(bands, members):
        if idx.size == 0:
            raise ValueError(f"no cube channel falls in band {a}-{b} nm")
    banded = np.stack([cube.values[:, :, idx].mean(axis=2) for idx in members], axis=0)
    ry = interp_matrix(cube.height, out_hw, "area")
    rx = interp_matrix(cube.width, out_hw, "area")
    small = ry @ banded @ rx.T
    return LrMsi(np.maximum(small.transpose(1, 2, 0), 0.0), bands)


# rendering ---------------------------------------------------------------------------

def _check_grid(truth: SceneTruth, wl: np.ndarray):
    if truth.wavelengths_nm.shape != wl.shape or not np.allclose(truth.wavelengths_nm, wl):
        raise ShapeError("curves are sampled on different wavelength grids", "wavelengths")


def render_cube(truth: SceneTruth) -> SpectralCube:
    wl = truth.wavelengths_nm
    if truth.illuminant.shape != wl.shape or truth.reflectance.shape[2] != wl.size:
        raise ShapeError("illuminant/reflectance do not match the wavelength grid", "wavelengths")
    values = truth.illuminant[None, None, :] * truth.shading[:, :, None] * truth.reflectance
    return SpectralCube(values, wl)


def project_rgb(cube_values: np.ndarray, bank: SensitivityBank) -> np.ndarray:
    """Sensitivity-weighted, normalized projection of spectral samples to RGB."""
    dl = np.gradient(bank.wavelengths_nm) if bank.wavelengths_nm.size > 1 else np.ones(1)
    weights = bank.curves * dl[None, :]
    weights = weights / weights.sum(axis=1, keepdims=True)
    return np.clip(cube_values @ weights.T, 0.0, 1.0)


def render_rgb(truth: SceneTruth, bank: SensitivityBank | None = None) -> RgbImage:
    bank = bank or SensitivityBank.gaussian_rgb(truth.wavelengths_nm)
    _check_grid(truth, bank.wavelengths_nm)
    return RgbImage(project_rgb(render_cube(truth).values, bank), bit_depth=16)


# synthetic scenes ----------------------------------------------------------------------

NIR_START_NM = 850.0
_BLEND_START_NM = 760.0


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def _prototype(label: int, wl: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    g = lambda c, s: np.exp(-0.5 * ((wl - c) / s) ** 2)  # noqa: E731
    if label == 0:    # building: bright, gently rising
        curve = 0.35 + 0.25 * (wl - 400.0) / 400.0
    elif label == 1:  # plant: green peak, red edge near 700 nm
        curve = 0.06 + 0.14 * g(550.0, 30.0) + 0.45 / (1.0 + np.exp(-(wl - 715.0) / 12.0))
    elif label == 2:  # sky: blue dominated
        curve = 0.12 + 0.6 * g(450.0, 55.0)
    elif label == 3:  # trunk: brown, rising towards red
        curve = 0.07 + 0.28 / (1.0 + np.exp(-(wl - 630.0) / 35.0))
    elif label == 4:  # road: dark, nearly flat
        curve = 0.16 + 0.04 * (wl - 400.0) / 600.0
    else:             # others: arbitrary smooth curve
        centers = rng.uniform(420.0, 740.0, size=3)
        curve = 0.2 + sum(rng.uniform(0.05, 0.3) * g(c, rng.uniform(25, 70)) for c in centers)
    return curve


def _smooth_perturbation(wl, rng, amplitude):
    out = np.zeros_like(wl)
    for _ in range(3):
        c = rng.uniform(420.0, 760.0)
        out += rng.uniform(-amplitude, amplitude) * np.exp(-0.5 * ((wl - c) / rng.uniform(30, 80)) ** 2)
    return out


# visible range leaves headroom so texture never pushes reflectance outside [0, 1]
_VIS_LO, _VIS_HI = 0.06, 0.78
MAX_TEXTURE = 0.25


def _texture_field(hw: int, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Per-pixel gain spread uniformly over [1 - amplitude, 1 + amplitude].

    Box-filtered noise gives spatial correlation; ranking it flattens the marginal.
    """
    n = rng.standard_normal((hw + 2, hw + 2))
    n = sum(n[i:i + hw, j:j + hw] for i in range(3) for j in range(3))
    rank = np.argsort(np.argsort(n, axis=None)).reshape(hw, hw)
    return 1.0 + amplitude * (2.0 * rank / (hw * hw - 1) - 1.0)


def _with_flat_tail(visible: np.ndarray, wl: np.ndarray, plateau: float,
                    gain: np.ndarray | float = 1.0) -> np.ndarray:
    """Blend ``gain * visible`` into the constant NIR plateau over 760-850 nm."""
    t = _smoothstep((wl - _BLEND_START_NM) / (NIR_START_NM - _BLEND_START_NM))
    vis = np.clip(visible, _VIS_LO, _VIS_HI) * np.asarray(gain, dtype=np.float64)[..., None]
    curve = (1.0 - t) * vis + t * plateau
    curve[..., wl >= NIR_START_NM] = plateau
    return curve


_METAMER_PHASES = (0.4, 2.5, 4.6)


def _metameric_offset(wl, weights, pair_index):
    """Smooth curve invisible to every row of ``weights`` and zero outside 420-740 nm.

    The shape is fixed per label pair so the separating signature is shared
    across scenes and can be learned.
    """
    support = (wl >= 420.0) & (wl <= 740.0)
    phase = _METAMER_PHASES[pair_index]
    period = 220.0
    window = np.sin(np.pi * np.clip((wl - 420.0) / 320.0, 0, 1)) ** 2
    delta = np.where(support, window * np.sin(2 * np.pi * (wl - 420.0) / period + phase), 0.0)
    w = weights[:, support]
    d = delta[support]
    d = d - w.T @ np.linalg.solve(w @ w.T, w @ d)
    delta[support] = d
    return delta / np.abs(delta).max()


def _shading_field(hw: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw] / hw
    field_ = np.zeros((hw, hw))
    for _ in range(3):
        fy, fx = rng.uniform(-1.5, 1.5, size=2)
        field_ += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fx * xx + fy * yy) + rng.uniform(0, 2 * np.pi))
    # one soft cast-shadow edge
    angle = rng.uniform(0, 2 * np.pi)
    dist = (xx - rng.uniform(0.3, 0.7)) * np.cos(angle) + (yy - rng.uniform(0.3, 0.7)) * np.sin(angle)
    field_ -= rng.uniform(1.0, 2.5) / (1.0 + np.exp(-dist / rng.uniform(0.03, 0.08)))
    lo, hi = field_.min(), field_.max()
    return 0.1 + 0.9 * (field_ - lo) / (hi - lo)


def _illuminant(wl: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = (wl - 400.0) / 600.0
    curve = 1.0 + 0.12 * (x - 0.5) * rng.uniform(-1, 1)
    for k in (1, 2):
        curve = curve + rng.uniform(-0.08, 0.08) * np.cos(np.pi * k * x + rng.uniform(0, np.pi))
    return curve / curve.max()


def generate_synthetic_scene(seed: int, hw: int = 64, n_channels: int = 61,
                             metameric: bool = False, texture: float = 0.2) -> SceneTruth:
    """Deterministic Voronoi scene with ground-truth intrinsics.

    Every material shares one flat reflectance plateau over 850-1000 nm, so the
    NIR average is proportional to the shading.  With ``metameric`` the label
    pairs (building, plant), (sky, trunk), (road, others) render to identical
    RGB but differ across the visible Lr-MSI bands.

    ``texture`` multiplies each pixel's visible reflectance by a gain in
    [1 - texture, 1 + texture]; NIR stays flat and metamers stay metameric.
    """
    if hw < 16:
        raise ValueError("hw must be at least 16")
    if not 0.0 <= texture <= MAX_TEXTURE:
        raise ValueError(f"texture must lie in [0, {MAX_TEXTURE}]")
    rng = np.random.default_rng(seed)
    wl = np.linspace(400.0, 1000.0, n_channels)
    illuminant = _illuminant(wl, rng)
    shading = _shading_field(hw, rng)
    plateau = rng.uniform(0.45, 0.75)

    n_regions = int(rng.integers(3, 7))
    labels = rng.choice(len(LABELS), size=n_regions, replace=False)
    seeds = rng.uniform(0, hw, size=(n_regions, 2))
    yy, xx = np.mgrid[0:hw, 0:hw] + 0.5
    d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
    region = d2.argmin(axis=2)
    segmentation = labels[region]

    curves = np.zeros((n_regions, n_channels))  # visible parts, tail added per pixel
    if metameric:
        bank = SensitivityBank.gaussian_rgb(wl)
        weights = bank.curves * illuminant[None, :]
        per_label = {}
        for i, pair in enumerate(((0, 1), (2, 3), (4, 5))):
            base = _prototype(pair[0] if rng.random() < 0.5 else pair[1], wl, rng)
            base = np.clip(base + _smooth_perturbation(wl, rng, 0.05), 0.15, 0.7)
            delta = _metameric_offset(wl, weights, i)
            vis = (wl >= 420.0) & (wl <= 740.0)
            amp = 0.9 * min(0.14, float(np.min(np.minimum(base[vis] - _VIS_LO, _VIS_HI - base[vis]))))
            per_label[pair[0]] = base + amp * delta
            per_label[pair[1]] = base - amp * delta
        for r, lab in enumerate(labels):
            curves[r] = per_label[int(lab)]
    else:
        for r, lab in enumerate(labels):
            vis = _prototype(int(lab), wl, rng) * rng.uniform(0.8, 1.2)
            vis = vis + _smooth_perturbation(wl, rng, 0.05)
            curves[r] = vis
    gain = _texture_field(hw, rng, texture) if texture > 0 else np.ones((hw, hw))
    reflectance = _with_flat_tail(curves[region], wl, plateau, gain)
    return SceneTruth(wl, illuminant, shading, reflectance, segmentation.astype(np.int64),
                      tuple(int(v) for v in labels))
