"""Planar homography estimation from point correspondences and projective warping."""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DegenerateError, ShapeError


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ShapeError(f"homography must be 3x3, got {m.shape}", "matrix")
        if abs(m[2, 2]) < 1e-15:
            raise DegenerateError("homography has a zero bottom-right entry")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateError("homography is singular")
        object.__setattr__(self, "matrix", m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        homog = np.c_[pts, np.ones(len(pts))] @ self.matrix.T
        return homog[:, :2] / homog[:, 2:3]


def _normalizing_transform(pts):
    centroid = pts.mean(axis=0)
    mean_dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if mean_dist < 1e-12:
        raise DegenerateError("all points coincide")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]])


def _has_collinear_triple(pts, tol=1e-9):
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-12)
    for i, j, k in combinations(range(len(pts)), 3):
        a, b, c = pts[i], pts[j], pts[k]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < tol * scale * scale:
            return True
    return False


def estimate_homography_dlt(correspondences) -> Homography:
    """Normalized DLT on rows ``[x1, y1, x2, y2]`` mapping image 1 to image 2."""
    pairs = np.asarray(correspondences, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 4:
        raise ShapeError(f"correspondences must be Nx4, got {pairs.shape}", "columns")
    if len(pairs) < 4:
        raise DegenerateError(f"need at least 4 correspondences, got {len(pairs)}")
    src, dst = pairs[:, :2], pairs[:, 2:]
    if len(pairs) == 4 and (_has_collinear_triple(src) or _has_collinear_triple(dst)):
        raise DegenerateError("three of the four points are collinear")
    t_src, t_dst = _normalizing_transform(src), _normalizing_transform(dst)
    ps = np.c_[src, np.ones(len(src))] @ t_src.T
    pd = np.c_[dst, np.ones(len(dst))] @ t_dst.T
    rows = []
    for (x, y, _), (u, v, _) in zip(ps, pd):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if sv.size >= 8 and sv[7] < 1e-10 * sv[0]:
        raise DegenerateError("correspondences do not determine a unique homography")
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    return Homography(h)


def warp_image(image: np.ndarray, h: Homography, out_hw: tuple[int, int]) -> np.ndarray:
    """Inverse-mapping projective warp with bilinear sampling; outside pixels are 0.

    Pixel (x, y) is the column/row index; ``h`` maps source to output coordinates.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    src_h, src_w = img.shape[:2]
    oh, ow = out_hw
    yy, xx = np.mgrid[0:oh, 0:ow]
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(oh * ow)], axis=0).astype(np.float64)
    back = h.inverse().matrix @ pts
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = back[0] / back[2]
        sy = back[1] / back[2]
    eps = 1e-9
    valid = (np.isfinite(sx) & np.isfinite(sy) & (sx >= -eps) & (sy >= -eps)
             & (sx <= src_w - 1 + eps) & (sy <= src_h - 1 + eps))
    sx = np.clip(np.where(valid, sx, 0.0), 0.0, src_w - 1)
    sy = np.clip(np.where(valid, sy, 0.0), 0.0, src_h - 1)
    x0 = np.minimum(np.floor(sx).astype(np.intp), max(src_w - 2, 0))
    y0 = np.minimum(np.floor(sy).astype(np.intp), max(src_h - 2, 0))
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    tx = (sx - x0)[:, None]
    ty = (sy - y0)[:, None]
    out = ((1 - ty) * ((1 - tx) * img[y0, x0] + tx * img[y0, x1])
           + ty * ((1 - tx) * img[y1, x0] + tx * img[y1, x1]))
    out[~valid] = 0.0
    out = out.reshape(oh, ow, img.shape[2])
    return out[:, :, 0] if squeeze else out


def read_correspondences(path) -> np.ndarray:
    with open(path) as fh:
        data = json.load(fh)
    return np.asarray(data, dtype=np.float64).reshape(-1, 4)
