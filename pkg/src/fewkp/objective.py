"""Training loss terms, their schedules and the weighted total.

Conventions used throughout: keypoints are normalized (x, y) in [-1, 1]^2,
3D keypoints append the read-out depth.  L1 distances sum over coordinates
and average over the keypoints that take part.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geom import Affine2D, _flip_perm, umeyama_batch, warp_image
from .skeleton import Skeleton


class NonFiniteLoss(FloatingPointError):
    def __init__(self, msg, term=None):
        super().__init__(msg)
        self.term = term


@dataclass
class LossWeights:
    few_shot: float = 1.0
    recon: float = 1.0
    geo2d: float = 1.0
    geo3d: float = 0.1
    smooth: float = 0.02

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    def as_dict(self) -> dict:
        return asdict(self)


TERMS = ("few_shot", "recon", "geo2d", "geo3d", "smooth")


def _zero() -> Tensor:
    return Tensor(np.array(0.0))


# ------------------------------------------------------------------ few-shot


def few_shot_loss(pred, gt, annotated) -> tuple[Tensor, bool]:
    """Mean over annotated keypoints of |k - k'|_1 (summed over x and y).

    ``pred`` (..., K, 2), ``gt`` same shape, ``annotated`` (..., K) booleans.
    Returns (loss, empty); with no annotated keypoint the loss is 0 and
    ``empty`` is True.
    """
    pred = dc.as_tensor(pred)
    gt = np.asarray(gt, dtype=float)
    mask = np.asarray(annotated, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape[:-1]:
        raise dc.ShapeError(f"few_shot_loss: pred {pred.shape}, gt {gt.shape}, mask {mask.shape}")
    n_ann = int(mask.sum())
    if n_ann == 0:
        return _zero(), True
    diff = dc.abs_(pred - np.where(mask[..., None], gt, 0.0))
    return dc.sum_(diff * mask[..., None].astype(float)) * (1.0 / n_ann), False


# -------------------------------------------------------------- equivariance


def warmup_strength(iteration: int, total: int) -> float:
    if total <= 0:
        raise ValueError(f"warmup total must be positive, got {total}")
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return min(iteration / total, 1.0)


def _transform_points(points: Tensor, transforms: Sequence[Affine2D], flip_perm):
    """Per-sample T(k) for a (N, K, 2) Tensor; returns (points, in_bounds)."""
    n, k = points.shape[:2]
    mats = np.stack([t.full() for t in transforms])  # (N, 3, 3)
    lin_t = np.ascontiguousarray(mats[:, :2, :2].transpose(0, 2, 1))
    out = dc.matmul(points, lin_t) + mats[:, None, :2, 2]
    if any(t.flip for t in transforms):
        idx = np.tile(np.arange(k), (n, 1))
        flips = [i for i, t in enumerate(transforms) if t.flip]
        idx[flips] = _flip_perm(flip_perm, k)
        out = out[np.arange(n)[:, None], idx]
    in_bounds = np.all(np.abs(out.data) <= 1.0, axis=-1)
    return out, in_bounds


def equivariance_loss(
    detector: Callable,
    images: np.ndarray,
    transforms,
    flip_perm=None,
    base_points: Tensor | None = None,
) -> tuple[Tensor, bool]:
    """Mean L1 between k(T(I)) and T(k(I)) over keypoints inside the image after T.

    ``detector`` maps an (N, H, W, 3) array to a (N, K, 2) Tensor.
    ``transforms`` is one Affine2D or one per image.  ``base_points`` may pass
    in an already computed k(I).  Returns (loss, empty) where ``empty`` flags
    that every transformed keypoint left the image.
    """
    images = np.asarray(images, dtype=float)
    if images.ndim == 3:
        images = images[None]
    n = images.shape[0]
    if isinstance(transforms, Affine2D):
        transforms = [transforms] * n
    if len(transforms) != n:
        raise ValueError(f"equivariance_loss: {len(transforms)} transforms for {n} images")
    warped = np.stack([warp_image(images[i], transforms[i]) for i in range(n)])
    base = detector(images) if base_points is None else base_points
    target, inb = _transform_points(base, transforms, flip_perm)
    moved = detector(warped)
    count = int(inb.sum())
    if count == 0:
        return _zero(), True
    diff = dc.abs_(moved - target)
    return dc.sum_(diff * inb[..., None].astype(float)) * (1.0 / count), False


# ---------------------------------------------------------- part alignment


class PairingMode(str, enum.Enum):
    RANDOM = "random"
    NEAREST = "nearest"


@dataclass
class PairingState:
    iteration: int = 0
    switch_at: int = 200

    @property
    def mode(self) -> PairingMode:
        return PairingMode.RANDOM if self.iteration < self.switch_at else PairingMode.NEAREST

    def step(self) -> None:
        self.iteration += 1


def _usable_parts(skel: Skeleton):
    parts = []
    for p, w in skel.all_parts():
        if len(p) < 3:
            warnings.warn(f"part {p} has fewer than 3 keypoints; skipped in part alignment", stacklevel=3)
            continue
        if w > 0:
            parts.append((np.asarray(p), w))
    return parts


def aligned_residuals(anchor: np.ndarray, partner: np.ndarray) -> np.ndarray:
    """Mean L2 residual after aligning every partner part onto every anchor part.

    anchor (N, M, 3), partner (C, M, 3) -> (N, C).
    """
    n, c = anchor.shape[0], partner.shape[0]
    dst = np.repeat(anchor, c, axis=0)
    src = np.tile(partner, (n, 1, 1))
    s, r, t = umeyama_batch(src, dst, strict=False)
    fit = s[:, None, None] * np.einsum("bij,bmj->bmi", r, src) + t[:, None, :]
    return np.sqrt(((dst - fit) ** 2).sum(-1)).mean(-1).reshape(n, c)


def choose_partners(anchor: np.ndarray, partner: np.ndarray, mode: PairingMode, rng, exclude_self: bool):
    """Partner index per anchor item for one part (random or nearest)."""
    n, c = anchor.shape[0], partner.shape[0]
    if PairingMode(mode) is PairingMode.RANDOM:
        if exclude_self:
            j = rng.integers(0, c - 1, size=n)
            return j + (j >= np.arange(n))
        return rng.integers(0, c, size=n)
    res = aligned_residuals(anchor, partner)
    if exclude_self:
        res[np.arange(n), np.arange(n)] = np.inf
    return np.argmin(res, axis=1)


@dataclass
class PartPlan:
    """Pairing and detached similarity for one part: partner c and (s, R, t) per item."""

    index: np.ndarray
    weight: float
    partner: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray


def plan_part_alignment(batch_k3d, skel: Skeleton, state: PairingState, rng, partners_k3d=None) -> list[PartPlan]:
    """Choose partners and estimate every similarity on detached values."""
    k3d = np.asarray(batch_k3d.data if isinstance(batch_k3d, Tensor) else batch_k3d, dtype=float)
    n = k3d.shape[0]
    if partners_k3d is None:
        if n < 2:
            raise ValueError(f"part_align_loss needs at least 2 batch items, got {n}")
        pool, exclude_self = k3d, True
    else:
        pool = np.asarray(partners_k3d.data if isinstance(partners_k3d, Tensor) else partners_k3d, dtype=float)
        exclude_self = False
    plans = []
    for p, w in _usable_parts(skel):
        dst, cand = k3d[:, p], pool[:, p]
        choice = choose_partners(dst, cand, state.mode, rng, exclude_self)
        s, r, t = umeyama_batch(cand[choice], dst, strict=False)
        plans.append(PartPlan(p, w, choice, s, r, t))
    return plans


def apply_part_alignment(batch_k3d, plans: list[PartPlan], partners_k3d=None) -> Tensor:
    """sum_P w_P / |P| |k_P(I_i) - eta(k_P(I_c))|_1 averaged over items, eta fixed."""
    k3d = dc.as_tensor(batch_k3d)
    pool = k3d if partners_k3d is None else dc.as_tensor(partners_k3d)
    n = k3d.shape[0]
    total = None
    for pl in plans:
        dst = k3d[:, pl.index]
        src = pool[:, pl.index][pl.partner]
        lin_t = np.ascontiguousarray((pl.scale[:, None, None] * pl.rotation).transpose(0, 2, 1))
        fit = dc.matmul(src, lin_t) + pl.translation[:, None, :]
        term = dc.sum_(dc.abs_(dst - fit)) * (pl.weight / (len(pl.index) * n))
        total = term if total is None else total + term
    return _zero() if total is None else total


def part_align_loss(
    batch_k3d,
    skel: Skeleton,
    state: PairingState,
    rng: np.random.Generator,
    partners_k3d=None,
) -> Tensor:
    """Per-part similarity consistency between batch items.

    For every item i and part P, a partner c is chosen (random or nearest by
    aligned residual); the partner's part is aligned onto item i's with a
    similarity estimated on detached values, and the L1 residual divided by
    |P| is accumulated with the part weight, then averaged over items.

    ``partners_k3d`` (C, K, 3) draws partners from a separate set instead of
    the batch itself; self-pairs are only excluded in the default case.
    """
    plans = plan_part_alignment(batch_k3d, skel, state, rng, partners_k3d)
    return apply_part_alignment(batch_k3d, plans, partners_k3d)


# ------------------------------------------------------------ reconstruction


def recon_loss(recon, target, feat: Callable | None) -> Tensor:
    """mean |recon - target| + mean |feat(recon) - feat(target)|."""
    recon = dc.as_tensor(recon)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=float)
    if recon.shape != target.shape:
        raise dc.ShapeError(f"recon_loss: recon {recon.shape} vs target {target.shape}")
    loss = dc.mean(dc.abs_(recon - target))
    if feat is not None:
        with dc.no_grad():
            ft = feat(Tensor(target))
        ft = ft.data if isinstance(ft, Tensor) else np.asarray(ft, dtype=float)
        fr = dc.as_tensor(feat(recon))
        if fr.data.size:
            loss = loss + dc.mean(dc.abs_(fr - ft))
    return loss


# --------------------------------------------------------------- smoothness


def chain_smoothness_loss(points, chains: Sequence[Sequence[int]]) -> Tensor:
    """Sum over interior chain points of sin^2 of the turning angle.

    This is cos^2 of the angle between the normal of the incoming segment and
    the outgoing segment: 0 on a straight chain, 1 on a right-angle turn.
    (N, K, 2) input is averaged over N.
    """
    pts = dc.as_tensor(points)
    if pts.ndim == 2:
        pts = dc.reshape(pts, (1,) + pts.shape)
    n = pts.shape[0]
    trip = []
    for chain in chains:
        chain = [int(c) for c in chain]
        if len(chain) < 3:
            raise ValueError(f"chain {chain} needs at least 3 keypoints")
        if any(a == b for a, b in zip(chain, chain[1:])):
            raise ValueError(f"chain {chain} repeats a keypoint consecutively")
        trip += [chain[i - 1 : i + 2] for i in range(1, len(chain) - 1)]
    if not trip:
        return _zero()
    ia, ib, ic = (np.array(v) for v in zip(*trip))
    u = pts[:, ib] - pts[:, ia]
    v = pts[:, ic] - pts[:, ib]
    cross = u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    nu = dc.sum_(dc.square(u), axis=-1)
    nv = dc.sum_(dc.square(v), axis=-1)
    return dc.sum_(dc.square(cross) / (nu * nv)) * (1.0 / n)


# -------------------------------------------------------------------- total


def total_loss(terms: dict, w: LossWeights) -> Tensor:
    """Weighted sum of the named terms; a non-finite term raises, naming it."""
    weights = w.as_dict()
    total = _zero()
    for name, value in terms.items():
        if name not in weights:
            raise KeyError(f"unknown loss term {name!r}")
        v = float(np.asarray(value.data if isinstance(value, Tensor) else value))
        if not math.isfinite(v):
            raise NonFiniteLoss(f"loss term {name!r} is not finite ({v})", term=name)
        if weights[name] != 0.0:
            total = total + dc.as_tensor(value) * weights[name]
    return total
