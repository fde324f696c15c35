"""Bilateral grid of 3x4 affine colour transforms: guidance, slicing and application.

Pixel ``(i, j)`` has centre ``(i + 0.5, j + 0.5)``; its continuous grid
coordinate is ``centre * grid_size / image_size - 0.5`` spatially and
``g * depth - 0.5`` along the guidance axis.  Coordinates are clamped to the
grid, which is the same as repeating edge cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError

N_COEFFS = 12
N_KNOTS = 16
IDENTITY_AFFINE = np.array([1.0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0])


@dataclass(frozen=True)
class BilateralGrid:
    """Affine coefficients stored as (grid_h, grid_w, depth, 12).

    The 12 entries of a cell are the row-major 3x4 matrix ``[A | b]``.
    """
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        object.__setattr__(self, "coeffs", c)
        if c.ndim != 4 or c.shape[3] != N_COEFFS:
            raise ShapeError(f"grid must be (gh, gw, depth, 12), got {c.shape}", "coefficients")
        if not np.all(np.isfinite(c)):
            raise ValueError("grid coefficients must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.coeffs.shape[:3]

    @classmethod
    def identity(cls, gh: int = 16, gw: int = 16, depth: int = 8) -> "BilateralGrid":
        return cls(np.broadcast_to(IDENTITY_AFFINE, (gh, gw, depth, N_COEFFS)).copy())

    def serialized(self) -> np.ndarray:
        """Checkpoint layout (12, depth, grid_h, grid_w)."""
        return np.ascontiguousarray(self.coeffs.transpose(3, 2, 0, 1))

    @classmethod
    def from_serialized(cls, arr: np.ndarray) -> "BilateralGrid":
        return cls(np.asarray(arr).transpose(2, 3, 1, 0))


# guidance --------------------------------------------------------------------------

@dataclass(frozen=True)
class GuideParams:
    ccm: np.ndarray      # 3 x 3
    bias: np.ndarray     # 3
    slopes: np.ndarray   # 3 x 16, per-channel piecewise-linear curve
    mixer: np.ndarray    # 3

    @classmethod
    def identity(cls) -> "GuideParams":
        slopes = np.zeros((3, N_KNOTS))
        slopes[:, 0] = 1.0
        return cls(np.eye(3), np.zeros(3), slopes, np.full(3, 1.0 / 3.0))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"ccm": self.ccm, "bias": self.bias, "slopes": self.slopes, "mixer": self.mixer}


def knots() -> np.ndarray:
    return np.arange(N_KNOTS) / N_KNOTS


def guidance_map(rgb: np.ndarray, p: GuideParams) -> np.ndarray:
    """g = clamp(mixer . PWL(ccm @ rgb + bias), 0, 1) for an H x W x 3 image."""
    x = np.asarray(rgb, dtype=np.float64) @ np.asarray(p.ccm).T + p.bias
    hinge = np.maximum(x[..., None] - knots(), 0.0)
    curves = (hinge * p.slopes).sum(axis=-1)
    return np.clip(curves @ p.mixer, 0.0, 1.0)


def guidance_map_t(rgb: T.Tensor, ccm: T.Tensor, bias: T.Tensor, slopes: T.Tensor,
                   mixer: T.Tensor) -> T.Tensor:
    """Differentiable guidance for an (N, 3, H, W) tensor, returning (N, H, W)."""
    n, _, h, w = rgb.shape
    x = T.matmul(ccm, rgb.reshape(n, 3, h * w)) + bias.reshape(1, 3, 1)
    hinge = T.relu(x.reshape(n, 3, h * w, 1) - T.Tensor(knots()))
    curves = (hinge * slopes.reshape(1, 3, 1, N_KNOTS)).sum(axis=3)
    mixed = (curves * mixer.reshape(1, 3, 1)).sum(axis=1)
    return T.clip(mixed, 0.0, 1.0).reshape(n, h, w)


# slicing -----------------------------------------------------------------------------

def _axis_coords(c: np.ndarray, n: int):
    """Clamped continuous coordinate -> (lower index, upper index, upper weight)."""
    c = np.clip(c, 0.0, n - 1)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, c - i0


def _spatial_matrix(n_pix: int, n_cells: int) -> np.ndarray:
    c = (np.arange(n_pix) + 0.5) * n_cells / n_pix - 0.5
    i0, i1, t = _axis_coords(c, n_cells)
    m = np.zeros((n_pix, n_cells))
    rows = np.arange(n_pix)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


class _SlicePlan:
    """Index and weight tables shared by the slice forward and backward passes.

    Interpolation uses the lerp form ``a + t * (b - a)`` per axis so that a
    constant grid slices to exactly its cell value.
    """

    def __init__(self, dims, g):
        gh, gw, depth = dims
        h, w = g.shape
        self.dims, self.hw = dims, (h, w)
        yc = (np.arange(h) + 0.5) * gh / h - 0.5
        self.y0, self.y1, self.ty = _axis_coords(yc, gh)
        self.wy = _spatial_matrix(h, gh)                       # (H, gh), for the backward pass
        xc = (np.arange(w) + 0.5) * gw / w - 0.5
        x0, x1, tx = _axis_coords(xc, gw)
        zc = g * depth - 0.5
        self.z_inside = ((zc > 0.0) & (zc < depth - 1)).ravel()
        z0, z1, tz = _axis_coords(zc, depth)
        rows = np.arange(h)[:, None] * gw
        self.x_idx = [((rows + xi[None, :]) * depth).ravel() for xi in (x0, x1)]
        self.tx = np.broadcast_to(tx, (h, w)).ravel()[:, None]
        self.tz = tz.ravel()[:, None]
        self.z0, self.z1 = z0.ravel(), z1.ravel()
        self.corners = []
        for xi, wx in zip(self.x_idx, (1.0 - self.tx[:, 0], self.tx[:, 0])):
            for zi, wz in ((self.z0, 1.0 - self.tz[:, 0]), (self.z1, self.tz[:, 0])):
                self.corners.append((xi + zi, wx * wz))

    def gy(self, coeffs: np.ndarray) -> np.ndarray:
        a, b = coeffs[self.y0], coeffs[self.y1]
        out = a + self.ty[:, None, None, None] * (b - a)
        return out.reshape(-1, N_COEFFS)

    def _depth_lerp(self, gy, base):
        a = np.take(gy, base + self.z0, axis=0)
        b = np.take(gy, base + self.z1, axis=0)
        return a, b, a + self.tz * (b - a)

    def forward(self, gy: np.ndarray) -> np.ndarray:
        _, _, v0 = self._depth_lerp(gy, self.x_idx[0])
        _, _, v1 = self._depth_lerp(gy, self.x_idx[1])
        out = v0 + self.tx * (v1 - v0)
        return out.reshape(self.hw[0], self.hw[1], N_COEFFS)

    def backward_grid(self, gout: np.ndarray) -> np.ndarray:
        gh, gw, depth = self.dims
        h = self.hw[0]
        gflat = gout.reshape(-1, N_COEFFS)
        n_rows = h * gw * depth
        dgy = np.zeros((n_rows, N_COEFFS))
        for idx, wt in self.corners:
            for k in range(N_COEFFS):
                dgy[:, k] += np.bincount(idx, weights=wt * gflat[:, k], minlength=n_rows)
        dgrid = self.wy.T @ dgy.reshape(h, gw * depth * N_COEFFS)
        return dgrid.reshape(gh, gw, depth, N_COEFFS)

    def backward_guidance(self, gy: np.ndarray, gout: np.ndarray) -> np.ndarray:
        depth = self.dims[2]
        a0, b0, _ = self._depth_lerp(gy, self.x_idx[0])
        a1, b1, _ = self._depth_lerp(gy, self.x_idx[1])
        diff = (1.0 - self.tx) * (b0 - a0) + self.tx * (b1 - a1)
        dg = depth * (diff * gout.reshape(-1, N_COEFFS)).sum(axis=1)
        return np.where(self.z_inside, dg, 0.0).reshape(self.hw)


def slice_grid(grid: BilateralGrid, g: np.ndarray) -> np.ndarray:
    """Trilinearly interpolated per-pixel coefficients, H x W x 12."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError(f"guidance must be H x W, got {g.shape}", "rank")
    plan = _SlicePlan(grid.dims, g)
    return plan.forward(plan.gy(grid.coeffs))


def slice_oracle_dense(grid: BilateralGrid, g: np.ndarray) -> np.ndarray:
    """Reference slicing: explicit 8-corner weighted sum per pixel."""
    c = grid.coeffs
    gh, gw, depth = grid.dims
    h, w = g.shape
    out = np.zeros((h, w, N_COEFFS))

    def taps(coord, n):
        lo = int(np.floor(coord))
        frac = coord - lo
        return [(min(max(lo, 0), n - 1), 1.0 - frac), (min(max(lo + 1, 0), n - 1), frac)]

    for i in range(h):
        cy = min(max((i + 0.5) * gh / h - 0.5, 0.0), gh - 1.0)
        for j in range(w):
            cx = min(max((j + 0.5) * gw / w - 0.5, 0.0), gw - 1.0)
            cz = min(max(float(g[i, j]) * depth - 0.5, 0.0), depth - 1.0)
            acc = np.zeros(N_COEFFS)
            for yi, wy in taps(cy, gh):
                for xi, wx in taps(cx, gw):
                    for zi, wz in taps(cz, depth):
                        acc += (wy * wx * wz) * c[yi, xi, zi]
            out[i, j] = acc
    return out


def slice_grid_t(grid: T.Tensor, g: T.Tensor) -> T.Tensor:
    """Differentiable slicing: grid (N, gh, gw, D, 12), g (N, H, W) -> (N, H, W, 12)."""
    if grid.ndim != 5 or grid.shape[4] != N_COEFFS:
        raise ShapeError(f"grid tensor must be (N, gh, gw, D, 12), got {grid.shape}", "coefficients")
    if g.ndim != 3 or g.shape[0] != grid.shape[0]:
        raise ShapeError(f"guidance {g.shape} does not match grid batch {grid.shape[0]}", "batch")
    plans, gys, outs = [], [], []
    for b in range(grid.shape[0]):
        plan = _SlicePlan(grid.shape[1:4], g.data[b])
        gy = plan.gy(grid.data[b])
        plans.append(plan)
        gys.append(gy)
        outs.append(plan.forward(gy))

    def backward(gout):
        dgrid = np.stack([p.backward_grid(gout[b]) for b, p in enumerate(plans)])
        dg = np.stack([p.backward_guidance(gys[b], gout[b]) for b, p in enumerate(plans)])
        return dgrid, dg

    return T._record(np.stack(outs), (grid, g), backward)


def apply_affine(image: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """out = A(x) rgb(x) + b(x) per pixel; no clamping."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != coeffs.shape[:2] or coeffs.shape[2] != N_COEFFS or image.shape[2] != 3:
        raise ShapeError(f"image {image.shape} vs coefficients {coeffs.shape}", "spatial")
    m = coeffs.reshape(*coeffs.shape[:2], 3, 4)
    out = m[..., 3].copy()
    for j in range(3):
        out += m[..., j] * image[..., j, None]
    return out


def apply_affine_t(image: T.Tensor, coeffs: T.Tensor) -> T.Tensor:
    """Differentiable version for image (N, 3, H, W) and coeffs (N, H, W, 12)."""
    n, _, h, w = image.shape
    m = coeffs.reshape(n, h, w, 3, 4).transpose(0, 3, 4, 1, 2)      # N, 3, 4, H, W
    rgb1 = T.concat([image, T.Tensor(np.ones((n, 1, h, w)))], 1)     # N, 4, H, W
    return (m * rgb1.reshape(n, 1, 4, h, w)).sum(axis=2)
