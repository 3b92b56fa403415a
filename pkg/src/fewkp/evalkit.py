"""Shot selection (k-means / random) and keypoint metrics."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr


class MetricError(ValueError):
    pass


# ------------------------------------------------------------------ k-means


def _sqdist(x, c):
    # (N, F) x (k, F) -> (N, k), clamped against cancellation
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(features, k: int, seed: int = 0, iters: int = 100, tol: float = 1e-9):
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``iters`` rounds or when no centre moves more than ``tol``.
    An emptied cluster is re-seeded at the point farthest from its current
    centre (lowest index on ties).  Returns (centers, assignment, inertia).
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"kmeans: features must be (N, F), got {x.shape}")
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"kmeans: k={k} must be in [1, {n}]")
    if not np.all(np.isfinite(x)):
        raise ValueError("kmeans: features must be finite")
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(n))]
    d2 = _sqdist(x, x[idx])[:, 0]
    for _ in range(1, k):
        tot = d2.sum()
        if tot <= 0.0:  # fewer distinct points than k
            nxt = int(np.flatnonzero(~np.isin(np.arange(n), idx))[0])
        else:
            nxt = int(rng.choice(n, p=d2 / tot))
        idx.append(nxt)
        d2 = np.minimum(d2, _sqdist(x, x[nxt : nxt + 1])[:, 0])
    centers = x[idx].copy()
    assign = np.zeros(n, dtype=int)
    for _ in range(iters):
        dist = _sqdist(x, centers)
        assign = dist.argmin(1)
        new = centers.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(0)
            else:
                far = int(dist[np.arange(n), assign].argmax())
                new[j] = x[far]
                assign[far] = j
                dist[far] = 0.0
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    dist = _sqdist(x, centers)
    assign = dist.argmin(1)
    # exact residuals here; the expanded form above leaves ~1e-16 of cancellation
    inertia = float(((x - centers[assign]) ** 2).sum())
    return centers, assign, inertia


def select_shots(features, k: int, method: str = "kmeans", seed: int = 0) -> np.ndarray:
    """Indices of the k examples to annotate.

    kmeans: for each centre the nearest feature vector (lowest index on ties,
    a point already taken falls through to the next nearest).  random:
    uniform without replacement.
    """
    x = np.asarray(features, dtype=float)
    n = len(x)
    if k > n or k < 1:
        raise ValueError(f"select_shots: k={k} must be in [1, {n}]")
    if method == "random":
        return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    if method != "kmeans":
        raise ValueError(f"unknown selection method {method!r} (expected 'kmeans' or 'random')")
    centers, _, _ = kmeans(x, k, seed)
    dist = _sqdist(x, centers)
    taken: set[int] = set()
    out = []
    for j in range(k):
        order = np.lexsort((np.arange(n), dist[:, j]))
        pick = next(int(i) for i in order if int(i) not in taken)
        taken.add(pick)
        out.append(pick)
    return np.asarray(out)


# ------------------------------------------------------------------ metrics


def _mask(eval_mask, k):
    return np.ones(k, dtype=bool) if eval_mask is None else np.asarray(eval_mask, dtype=bool)


def nme(pred, gt, eval_mask=None, norm_pair=(0, 1)) -> float:
    """Mean over masked keypoints of |pred - gt|_2 / |gt_i - gt_j|_2."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    m = _mask(eval_mask, len(gt))
    if not m.any():
        raise MetricError("nme: empty evaluation mask")
    i, j = norm_pair
    norm = float(np.sqrt(((gt[i] - gt[j]) ** 2).sum()))
    if norm == 0.0:
        raise MetricError(f"nme: normalization keypoints {i} and {j} coincide")
    err = np.sqrt(((pred - gt) ** 2).sum(-1))
    return float(err[m].mean() / norm)


def bbox_side(gt, mask=None) -> float:
    """Largest side of the bounding box of the (masked) ground-truth keypoints."""
    gt = np.asarray(gt, float)
    m = _mask(mask, len(gt))
    p = gt[m]
    return float((p.max(0) - p.min(0)).max())


def pck(pred, gt, eval_mask=None, bbox=None, thresh: float = 0.1) -> float:
    """Fraction of masked keypoints with |pred - gt|_2 <= thresh * bbox (inclusive)."""
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    m = _mask(eval_mask, len(gt))
    if not m.any():
        raise MetricError("pck: empty evaluation mask")
    side = bbox_side(gt, m) if bbox is None else float(bbox)
    if not side > 0:
        raise MetricError(f"pck: bounding box side must be positive, got {side}")
    err = np.sqrt(((pred - gt) ** 2).sum(-1))
    return float((err[m] <= thresh * side).mean())


def depth_alignment_score(pred_depth, gt_depth, visible=None) -> float:
    """Mean |Spearman rho| between predicted and true depth per sample.

    Only visible keypoints count; samples with fewer than 3 are skipped.  A
    constant prediction carries no ranking and scores 0.
    """
    pd_, gd = np.atleast_2d(np.asarray(pred_depth, float)), np.atleast_2d(np.asarray(gt_depth, float))
    vis = np.ones(pd_.shape, dtype=bool) if visible is None else np.atleast_2d(np.asarray(visible, bool))
    scores = []
    for p, g, v in zip(pd_, gd, vis):
        if v.sum() < 3:
            continue
        p, g = p[v], g[v]
        if np.ptp(p) == 0.0 or np.ptp(g) == 0.0:
            scores.append(0.0)
            continue
        scores.append(abs(float(spearmanr(p, g)[0])))
    if not scores:
        raise MetricError("depth_alignment_score: no sample has 3 visible keypoints")
    return float(np.mean(scores))


@dataclass
class MetricReport:
    nme: float
    pck: float
    per_keypoint_error: list
    n_evaluated: int
    norm_pair: tuple
    bbox: str = "gt-keypoints-largest-side"
    thresh: float = 0.1
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> "OrderedDict":
        r6 = lambda v: round(float(v), 6)  # noqa: E731
        d = OrderedDict()
        d["nme"] = r6(self.nme)
        d["pck"] = r6(self.pck)
        d["per_keypoint_error"] = [r6(e) for e in self.per_keypoint_error]
        d["n_evaluated"] = int(self.n_evaluated)
        d["norm_pair"] = [int(v) for v in self.norm_pair]
        d["bbox"] = self.bbox
        d["thresh"] = r6(self.thresh)
        for k in sorted(self.extra):
            d[k] = r6(self.extra[k])
        return d

    def to_json(self) -> str:
        # fixed key order and 6-decimal values keep reports byte-comparable
        def fmt(v):
            if isinstance(v, float):
                return f"{v:.6f}"
            if isinstance(v, list):
                return "[" + ", ".join(fmt(x) for x in v) + "]"
            return json.dumps(v)

        body = ",\n".join(f"  {json.dumps(k)}: {fmt(v)}" for k, v in self.to_dict().items())
        return "{\n" + body + "\n}\n"


def evaluate(pred, gt, annotated=None, norm_pair=(0, 1), thresh: float = 0.1, extra=None, bbox=None) -> MetricReport:
    """Average nme / pck over samples.  pred, gt (N, K, 2); annotated (N, K).

    ``bbox`` optionally gives one PCK reference side per sample instead of the
    ground-truth keypoint box.
    """
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    if pred.shape != gt.shape:
        raise MetricError(f"evaluate: pred {pred.shape} vs gt {gt.shape}")
    ann = np.ones(gt.shape[:2], dtype=bool) if annotated is None else np.asarray(annotated, bool)
    sides = [None] * len(gt) if bbox is None else np.asarray(bbox, float).reshape(-1)
    if len(sides) != len(gt):
        raise MetricError(f"evaluate: {len(sides)} bbox sides for {len(gt)} samples")
    nmes, pcks = [], []
    err_sum = np.zeros(gt.shape[1])
    err_cnt = np.zeros(gt.shape[1])
    for p, g, m, side in zip(pred, gt, ann, sides):
        if not m.any():
            continue
        nmes.append(nme(p, g, m, norm_pair))
        pcks.append(pck(p, g, m, bbox=side, thresh=thresh))
        e = np.sqrt(((p - g) ** 2).sum(-1))
        err_sum += np.where(m, e, 0.0)
        err_cnt += m
    if not nmes:
        raise MetricError("evaluate: no annotated keypoints")
    per_kp = np.where(err_cnt > 0, err_sum / np.maximum(err_cnt, 1), 0.0)
    kind = "gt-keypoints-largest-side" if bbox is None else "provided"
    return MetricReport(
        float(np.mean(nmes)), float(np.mean(pcks)), per_kp.tolist(), len(nmes), tuple(norm_pair), kind, thresh, dict(extra or {})
    )
