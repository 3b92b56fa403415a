"""Keypoint readout, 2D transforms, segment geometry and similarity alignment.

Coordinates are normalized to [-1, 1]: pixel (r, c) of an H x W grid has
center x = (2c + 1)/W - 1, y = (2r + 1)/H - 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class DegenerateSource(ValueError):
    """Source point set has (near) zero variance; similarity is undefined."""


@dataclass
class KeypointSet:
    points: np.ndarray  # (K, 2)
    uncertainty: np.ndarray  # (K,) pre-sigmoid logits
    depth: np.ndarray  # (K,)

    @property
    def k3d(self) -> np.ndarray:
        return np.concatenate([self.points, self.depth[:, None]], axis=1)


@dataclass
class Affine2D:
    """p -> A @ F(p) + b, where F mirrors x when ``flip`` is set."""

    matrix: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
    flip: bool = False
    brightness: float = 0.0
    contrast: float = 0.0

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float).reshape(2, 3)
        if abs(np.linalg.det(self.matrix[:, :2])) <= 1e-9:
            raise ValueError("Affine2D: linear part is singular")

    def full(self) -> np.ndarray:
        """3x3 homogeneous matrix including the flip."""
        m = np.eye(3)
        m[:2] = self.matrix
        if self.flip:
            m = m @ np.diag([-1.0, 1.0, 1.0])
        return m

    def inverse(self) -> "Affine2D":
        # full() of the result must equal inv(full()); the result re-applies F on the right
        inv = np.linalg.inv(self.full())
        if self.flip:
            inv = inv @ np.diag([-1.0, 1.0, 1.0])
        return Affine2D(inv[:2], self.flip, 0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return (
            not self.flip
            and np.array_equal(self.matrix, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
            and self.brightness == 0.0
            and self.contrast == 0.0
        )


@dataclass
class Similarity3D:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * pts @ self.rotation.T + self.translation


# ------------------------------------------------------------------ readout


@lru_cache(maxsize=16)
def pixel_grid(h: int, w: int) -> np.ndarray:
    """(H*W, 2) pixel-center coordinates (x, y), row-major."""
    if h <= 0 or w <= 0:
        raise ValueError(f"empty grid {h}x{w}")
    ys = (2.0 * np.arange(h) + 1.0) / h - 1.0
    xs = (2.0 * np.arange(w) + 1.0) / w - 1.0
    gx, gy = np.meshgrid(xs, ys)
    g = np.stack([gx.ravel(), gy.ravel()], axis=1)
    g.setflags(write=False)
    return g


def soft_argmax(heatmap) -> tuple[Tensor, Tensor]:
    """Softmax-weighted centroid of a heatmap of shape (..., H, W).

    Returns (points (..., 2), weights (..., H*W)).
    """
    heatmap = dc.as_tensor(heatmap)
    if heatmap.ndim < 2 or heatmap.shape[-1] * heatmap.shape[-2] == 0:
        raise ValueError(f"soft_argmax: bad heatmap shape {heatmap.shape}")
    h, w = heatmap.shape[-2:]
    lead = heatmap.shape[:-2]
    logits = dc.reshape(heatmap, lead + (h * w,))
    weights = dc.softmax(logits, axis=-1)
    pts = dc.matmul(dc.reshape(weights, (-1, h * w)), pixel_grid(h, w))
    return dc.reshape(pts, lead + (2,)), weights


def weighted_readout(weights, value_map) -> Tensor:
    """Sum over pixels of weights * value_map; weights (..., H*W), map (..., H, W)."""
    weights, value_map = dc.as_tensor(weights), dc.as_tensor(value_map)
    flat = dc.reshape(value_map, value_map.shape[:-2] + (-1,)) if value_map.ndim >= 2 else value_map
    if flat.shape != weights.shape:
        raise dc.ShapeError(f"weighted_readout: weights {weights.shape} vs map {value_map.shape}")
    return dc.sum_(weights * flat, axis=-1)


# ----------------------------------------------------------------- segments


def point_to_segment(p, a, b):
    """Distance from p to segment [a, b] and the projection parameter t.

    Works on numpy arrays (last axis 2) or Tensors; Tensors keep the graph.
    A degenerate segment (|a - b| < 1e-12) gets t = 0.
    """
    if any(isinstance(v, Tensor) for v in (p, a, b)):
        d2, t = point_to_segment_sq(p, a, b)
        return dc.sqrt(d2), t
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    degenerate = denom < 1e-24
    t = np.sum((p - a) * ab, axis=-1) / np.where(degenerate, 1.0, denom)
    t = np.where(degenerate, 0.0, t)
    tc = np.clip(t, 0.0, 1.0)
    proj = a + tc[..., None] * ab
    d = np.linalg.norm(p - proj, axis=-1)
    if d.ndim == 0:
        return float(d), float(t)
    return d, t


def point_to_segment_sq(p, a, b) -> tuple[Tensor, Tensor]:
    """Differentiable squared distance and raw t (Tensors, last axis 2)."""
    p, a, b = dc.as_tensor(p), dc.as_tensor(a), dc.as_tensor(b)
    ab = b - a
    denom = dc.clamp_min(dc.sum_(ab * ab, axis=-1), 1e-24)
    t = dc.sum_((p - a) * ab, axis=-1) / denom
    tc = dc.clip(t, 0.0, 1.0)
    shape = tc.shape + (1,)
    diff = p - (a + dc.reshape(tc, shape) * ab)
    return dc.sum_(diff * diff, axis=-1), t


# --------------------------------------------------------------- transforms


def _flip_perm(perm, k: int) -> np.ndarray:
    if perm is None:
        raise ValueError("flip requested without a keypoint permutation")
    perm = np.asarray(perm, dtype=int)
    if perm.shape != (k,):
        raise ValueError(f"flip permutation has {perm.shape[0]} entries, expected {k}")
    return perm


def apply_affine(points, T: Affine2D, flip_perm=None):
    """Transform (..., K, 2) points.  Returns (points, in_bounds).

    With a flip, output keypoint i takes the transformed position of input
    keypoint flip_perm[i].  ``points`` may be a Tensor.
    """
    m = T.full()
    lin, off = m[:2, :2], m[:2, 2]
    if isinstance(points, Tensor):
        out = dc.matmul(points, lin.T) + off
        if T.flip:
            out = out[..., _flip_perm(flip_perm, points.shape[-2]), :]
        arr = out.data
    else:
        pts = np.asarray(points, dtype=float)
        out = pts @ lin.T + off
        if T.flip:
            out = out[..., _flip_perm(flip_perm, pts.shape[-2]), :]
        arr = out
    in_bounds = np.all(np.abs(arr) <= 1.0, axis=-1)
    return out, in_bounds


def sample_transform(strength: float, rng: np.random.Generator) -> Affine2D:
    """Random rotation/translation/scale/flip/jitter with ranges scaled by strength.

    Rotation +-60 deg, translation +-10% of the image side, scale in
    [0.9, 1], flip with p=0.5, brightness/contrast +-50%; every range is
    multiplied by ``strength``.  The draws are always consumed so the rng
    stream does not depend on strength.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength {strength} outside [0, 1]")
    u = rng.uniform(-1.0, 1.0, size=3)
    s_u, f_u = rng.uniform(0.0, 1.0, size=2)
    bc = rng.uniform(-1.0, 1.0, size=2)
    angle = np.deg2rad(60.0) * strength * u[0]
    # 10% of the image side is 0.2 in [-1, 1] units
    tx, ty = 0.2 * strength * u[1], 0.2 * strength * u[2]
    scale = 1.0 - 0.1 * strength * s_u
    flip = bool(f_u < 0.5 * strength)
    c, s = np.cos(angle), np.sin(angle)
    mat = np.array([[scale * c, -scale * s, tx], [scale * s, scale * c, ty]])
    if strength == 0.0:
        mat = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return Affine2D(mat, flip, 0.5 * strength * bc[0], 0.5 * strength * bc[1])


def warp_image(image: np.ndarray, T: Affine2D) -> np.ndarray:
    """Resample an (H, W, C) or (N, H, W, C) image so content at p moves to T(p).

    Bilinear, zero outside the source.  Brightness/contrast jitter is applied
    afterwards and clipped to [0, 1].
    """
    img = np.asarray(image, dtype=float)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    n, h, w, c = img.shape
    out = img
    if not np.array_equal(T.full(), np.eye(3)):
        grid = pixel_grid(h, w)
        inv = np.linalg.inv(T.full())
        src = grid @ inv[:2, :2].T + inv[:2, 2]
        # back to continuous pixel indices (center of pixel c at index c)
        fx = (src[:, 0] + 1.0) * w / 2.0 - 0.5
        fy = (src[:, 1] + 1.0) * h / 2.0 - 0.5
        x0 = np.floor(fx).astype(int)
        y0 = np.floor(fy).astype(int)
        wx = fx - x0
        wy = fy - y0
        out = np.zeros((n, h * w, c))
        for dy, dx, wt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx), (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = yi[ok] * w + xi[ok]
            out[:, ok] += img.reshape(n, h * w, c)[:, idx] * wt[ok, None]
        out = out.reshape(n, h, w, c)
    if T.brightness or T.contrast:
        m = out.mean(axis=(1, 2, 3), keepdims=True)
        out = np.clip(((out - m) * (1.0 + T.contrast) + m) * (1.0 + T.brightness), 0.0, 1.0)
    return out if batched else out[0]


# ---------------------------------------------------------------- alignment


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Similarity3D:
    """Least-squares (s, R, t) minimizing sum |dst - (s R src + t)|^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2:
        raise ValueError(f"umeyama: shape mismatch {src.shape} vs {dst.shape}")
    s, r, t = umeyama_batch(src[None], dst[None], with_scale)
    return Similarity3D(float(s[0]), r[0], t[0])


def umeyama_batch(src: np.ndarray, dst: np.ndarray, with_scale: bool = True, strict: bool = True):
    """Vectorized alignment over a leading batch axis: src, dst (B, M, D).

    With ``strict=False`` degenerate sources get a pure translation
    (s=1, R=I) instead of raising.
    """
    b, m, d = src.shape
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    xs = src - mu_s
    xd = dst - mu_d
    var = (xs * xs).sum(axis=(1, 2)) / m
    degenerate = var < 1e-12
    if strict and degenerate.any():
        raise DegenerateSource(f"source variance {var.min():.3g} < 1e-12")
    cov = np.einsum("bmi,bmj->bij", xd, xs) / m
    try:
        u, sv, vt = np.linalg.svd(cov)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"umeyama: SVD failed: {e}") from e
    sign = np.ones((b, d))
    sign[:, -1] = np.where(np.linalg.det(u) * np.linalg.det(vt) < 0, -1.0, 1.0)
    rot = u @ (sign[:, :, None] * vt)
    if with_scale:
        scale = (sv * sign).sum(axis=1) / np.where(degenerate, 1.0, var)
    else:
        scale = np.ones(b)
    scale = np.where(degenerate, 1.0, scale)
    rot = np.where(degenerate[:, None, None], np.eye(d), rot)
    trans = mu_d[:, 0] - scale[:, None] * np.einsum("bij,bj->bi", rot, mu_s[:, 0])
    return scale, rot, trans
