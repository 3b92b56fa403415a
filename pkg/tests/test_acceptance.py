"""Acceptance criteria 1-10, one test per criterion.

Criteria 6 and 7 train twelve models at desk scale (about half an hour each on
one core); they are marked slow.  Run only the fast ones with ``-m "not slow"``.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from fewkp import diffcore as dc
from fewkp.diffcore import Tensor
from fewkp.evalkit import bbox_side, depth_alignment_score, nme, pck, select_shots
from fewkp.geom import pixel_grid, sample_transform, umeyama, umeyama_batch, warp_image
from fewkp.nets import DetectorNet, detect, get_feature_extractor
from fewkp.objective import (
    PairingState,
    apply_part_alignment,
    chain_smoothness_loss,
    equivariance_loss,
    few_shot_loss,
    part_align_loss,
    plan_part_alignment,
    recon_loss,
)
from fewkp.skeledge import EdgeParams, EdgeVariant, alpha, render_edge, render_skeleton
from fewkp.skeleton import Skeleton
from fewkp.synthgen import generate_dataset, load_dataset, stock_spec
from fewkp.train import TrainConfig, train

VARIANTS = [EdgeVariant.MULTIPLICATIVE, EdgeVariant.EXPONENT_SIGNED]


def rand_rotation(rng, d=3):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ------------------------------------------------------------ 1. gradients


def test_c1_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst = {}
    skel = Skeleton(K=6, edges=[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)], parts=[[0, 1, 2], [2, 3, 4, 5]], flip_permutation=[5, 4, 3, 2, 1, 0])
    edges = skel.edges
    for seed in range(20):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(3, 9))

        pred = Tensor(rng.uniform(-1, 1, size=(2, k, 2)))
        gt = pred.data + rng.uniform(0.05, 0.3, size=pred.shape) * rng.choice([-1, 1], size=pred.shape)
        ann = rng.uniform(size=(2, k)) < 0.8
        ann[0, 0] = True
        e = dc.grad_check(lambda p: few_shot_loss(p, gt, ann)[0], pred)
        worst["few_shot"] = max(worst.get("few_shot", 0.0), e)

        imgs = rng.uniform(size=(2, 8, 8, 3))
        wmat = Tensor(rng.normal(size=(3, 2)) * 0.3)

        def det_from(wt, kk=min(k, 6)):
            def det(im):
                f = dc.reshape(dc.as_tensor(im), (-1, 3))
                out = dc.sigmoid(dc.matmul(f, wt)) - 0.5
                return dc.reshape(out, (im.shape[0], 64, 2))[:, :kk]

            return det

        ts = [sample_transform(1.0, np.random.default_rng([seed, i])) for i in range(2)]
        perm = list(range(min(k, 6)))[::-1]
        e = dc.grad_check(lambda wt: equivariance_loss(det_from(wt), imgs, ts, perm)[0], wmat)
        worst["geo2d"] = max(worst.get("geo2d", 0.0), e)

        batch = Tensor(rng.normal(size=(3, 6, 3)))
        it = 0 if seed % 2 else 300
        plans = plan_part_alignment(batch, skel, PairingState(it), np.random.default_rng(seed))
        e = dc.grad_check(lambda b: apply_part_alignment(b, plans), batch)
        worst["geo3d"] = max(worst.get("geo3d", 0.0), e)

        tgt = rng.uniform(size=(1, 8, 8, 3))
        rec = Tensor(tgt + rng.uniform(0.05, 0.2, size=tgt.shape) * rng.choice([-1, 1], size=tgt.shape))
        feat = lambda x: dc.avg_pool(dc.as_tensor(x), 2)  # noqa: E731
        e = dc.grad_check(lambda r: recon_loss(r, tgt, feat), rec)
        worst["recon"] = max(worst.get("recon", 0.0), e)

        pts = Tensor(rng.uniform(-1, 1, size=(2, k, 2)))
        chains = [list(range(k)), [k - 1, 1, 0]]
        e = dc.grad_check(lambda p: chain_smoothness_loss(p, chains), pts)
        worst["smooth"] = max(worst.get("smooth", 0.0), e)

        variant = VARIANTS[seed % 2]
        kp = Tensor(rng.uniform(-0.7, 0.7, size=(1, 6, 2)))
        v = Tensor(rng.normal(size=(1, 6)))
        p = EdgeParams.init(variant, theta=rng.uniform(-3.0, -2.0), gamma=rng.uniform(-2, 1))
        proj = rng.normal(size=(1, 16, 16))

        def f(ts_):
            q = EdgeParams(ts_[2], ts_[3], variant)
            return dc.sum_(render_skeleton(ts_[0], ts_[1], edges, q, 16, 16) * proj)

        e = dc.grad_check(f, [kp, v, p.theta, p.gamma])
        worst["render_skeleton"] = max(worst.get("render_skeleton", 0.0), e)
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.0f}s"
    criterion(1, top <= 1e-5 and elapsed <= 120, f"max rel err {top:.2e} ({detail})")


# --------------------------------------------------------------- 2. umeyama


def planar_grid_residual(src, dst, n=3600):
    # best rotation by exhaustive angle search; scale and translation in closed form
    xs, xd = src - src.mean(0), dst - dst.mean(0)
    best = math.inf
    for a in np.arange(n) * (2 * np.pi / n):
        r = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        rx = xs @ r.T
        s = max((rx * xd).sum() / (rx * rx).sum(), 0.0)
        best = min(best, ((xd - s * rx) ** 2).sum())
    return best


def test_c2_umeyama_oracle(criterion):
    rng = np.random.default_rng(0)
    err = 0.0
    for _ in range(100):
        src = rng.normal(size=(int(rng.integers(4, 12)), 3))
        s, r, t = rng.uniform(0.2, 5.0), rand_rotation(rng), rng.normal(size=3) * 3
        est = umeyama(src, s * src @ r.T + t)
        err = max(err, abs(est.scale - s), np.abs(est.rotation - r).max(), np.abs(est.translation - t).max())
    gap = -math.inf
    for _ in range(100):
        src = rng.normal(size=(int(rng.integers(3, 10)), 2))
        dst = rng.uniform(0.5, 2.0) * src @ rand_rotation(rng, 2).T + rng.normal(size=2) + rng.normal(size=src.shape) * 0.3
        s, r, t = umeyama_batch(src[None], dst[None])
        res = ((dst - (s[0] * src @ r[0].T + t[0])) ** 2).sum()
        gap = max(gap, res - planar_grid_residual(src, dst))
    criterion(2, err <= 1e-9 and gap <= 1e-6, f"param err {err:.1e}; planar residual minus grid search {gap:.1e}")


# -------------------------------------------------------------- 3. renderer


def test_c3_renderer_properties(criterion):
    bad = {"bounds": 0, "swap": 0, "perpendicular": 0, "uncertainty": 0}
    h = w = 16
    grid = pixel_grid(h, w)
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        variant = VARIANTS[seed % 2]
        k = int(rng.integers(2, 7))
        pts, v = rng.uniform(-1.1, 1.1, size=(k, 2)), rng.normal(size=k) * 3
        edges = [(int(a), int(b)) for a, b in rng.integers(k, size=(int(rng.integers(1, 6)), 2)) if a != b] or [(0, 1)]
        p = EdgeParams.init(variant, theta=rng.uniform(-4, 2), gamma=rng.uniform(-5, 3))
        s = render_skeleton(pts, v, edges, p, h, w).data
        a = alpha(float(p.gamma.data))
        bad["bounds"] += s.min() < -1e-12 or s.max() > a + 1e-12
        sw = render_skeleton(pts, v, [(j, i) for i, j in edges], p, h, w).data
        bad["swap"] += np.abs(sw - s).max() > 1e-12
        # axis-aligned single edge: along each pixel column crossing it the value
        # must not increase with distance from the segment
        row = rng.uniform(-0.9, 0.9)
        x0, x1 = np.sort(rng.uniform(-0.9, 0.9, size=2))
        m = render_edge([x0, row], [x1, row], v[0], v[-1], p, h, w)
        dist = np.abs(grid[:, 1].reshape(h, w) - row)
        for c in range(w):
            if not x0 <= grid[c, 0] <= x1:
                continue
            order = np.argsort(dist[:, c], kind="stable")
            bad["perpendicular"] += int(np.any(np.diff(m[order, c]) > 1e-12))
        if variant is EdgeVariant.MULTIPLICATIVE:
            lower = v - rng.uniform(0, 3, size=k)
            lo = render_skeleton(pts, lower, edges, p, h, w).data
            bad["uncertainty"] += np.any(lo > s + 1e-12)
    total = sum(bad.values())
    criterion(3, total == 0, "violations " + ", ".join(f"{k} {v}" for k, v in bad.items()) + " over 1000 configurations")


# ----------------------------------------------------------- 4. equivariance


class OracleDetector:
    """Knows the true keypoints of every base image and of every warp of it."""

    def __init__(self, images, points, flip_perm):
        self.answers = {}
        self.images, self.points, self.perm = images, points, np.asarray(flip_perm)
        for img, pt in zip(images, points):
            self.answers[img.tobytes()] = pt

    def register(self, transforms):
        for img, pt, t in zip(self.images, self.points, transforms):
            m = t.matrix
            q = pt * np.array([-1.0, 1.0]) if t.flip else pt
            q = q @ m[:, :2].T + m[:, 2]
            if t.flip:
                q = q[self.perm]
            self.answers[warp_image(img, t).tobytes()] = q

    def __call__(self, images):
        return Tensor(np.stack([self.answers[im.tobytes()] for im in images]))


def test_c4_equivariance_fixed_points(criterion):
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(3, 16, 16, 3))
    net = DetectorNet(4, 0.25, seed=1)
    zero = [equivariance_loss(lambda x: detect(net, x).points, imgs, sample_transform(0.0, rng), [3, 2, 1, 0])[0].data for _ in range(5)]
    perm = [1, 0, 2, 4, 3]
    worst = 0.0
    for d in range(100):
        pts = rng.uniform(-0.6, 0.6, size=(3, 5, 2))
        oracle = OracleDetector(imgs, pts, perm)
        ts = [sample_transform(1.0, np.random.default_rng([d, i])) for i in range(3)]
        oracle.register(ts)
        loss, empty = equivariance_loss(oracle, imgs, ts, perm)
        worst = max(worst, float(loss.data))
    ok = all(z == 0.0 for z in zero) and worst <= 1e-9
    criterion(4, ok, f"strength-0 losses {sorted(set(float(z) for z in zero))}; oracle max {worst:.1e} over 100 draws")


# ------------------------------------------------------ 5. gauge invariance


def test_c5_part_alignment_gauge_invariance(criterion):
    # every item of the partner batch carries its own similarity gauge; moving one
    # item by a global similarity must not change the loss (eta absorbs it)
    skel = Skeleton(K=8, edges=[(i, i + 1) for i in range(7)], parts=[[0, 1, 2], [2, 3, 4, 5], [5, 6, 7]], flip_permutation=list(range(8)))
    worst = 0.0
    for trial in range(50):
        rng = np.random.default_rng(trial)
        anchors = rng.normal(size=(4, 8, 3))
        pool = rng.normal(size=(5, 8, 3))
        j = int(rng.integers(5))
        moved = pool.copy()
        moved[j] = rng.uniform(0.2, 5.0) * pool[j] @ rand_rotation(rng).T + rng.normal(size=3) * 3
        for it in (0, 300):
            a = part_align_loss(anchors, skel, PairingState(it), np.random.default_rng(trial), partners_k3d=pool).data
            b = part_align_loss(anchors, skel, PairingState(it), np.random.default_rng(trial), partners_k3d=moved).data
            worst = max(worst, abs(float(a) - float(b)))
    criterion(5, worst <= 1e-9, f"max change {worst:.1e} over 50 trials, both pairing modes")


# ------------------------------------------------------------ 8. selection


def test_c8_shot_selection_mode_coverage(tmp_path, criterion):
    out = generate_dataset(stock_spec("biped-modes"), 400, 0, tmp_path / "modes")
    data = load_dataset(out)
    modes = np.array([p["mode"] for p in data.poses])
    feats = get_feature_extractor("pyramid")(data.images(np.arange(len(data))))
    k = 4
    km = [len(set(modes[select_shots(feats, k, "kmeans", s)])) for s in range(10)]
    rd = [len(set(modes[select_shots(feats, k, "random", s)])) for s in range(10)]
    km_ok, rd_ok = sum(c >= 3 for c in km), sum(c >= 3 for c in rd)
    criterion(8, km_ok == 10 and rd_ok < 10, f"k={k}: kmeans covers >=3 modes in {km_ok}/10 {km}, random in {rd_ok}/10 {rd}")


# ---------------------------------------------------------- 9. determinism


def test_c9_train_determinism(tmp_path, criterion):
    from fewkp.cli import main

    spec = stock_spec("biped-2d")
    spec.image_size = 32
    ds = generate_dataset(spec, 40, 7, tmp_path / "ds", {"train": 30, "test": 10})
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": str(ds), "image_size": 32, "shots": 5, "iterations": 12, "batch_unlabeled": 8,
                               "checkpoint_every": 6, "width_mult": 0.25, "decoder_width_mult": 0.25}))  # fmt: skip
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in ("loss_log.jsonl", "metrics.json", "metrics_000000.json")}
    criterion(9, all(same.values()), "bitwise identical: " + ", ".join(f"{k} {v}" for k, v in same.items()))


# ---------------------------------------------------------- 10. metrics


def test_c10_metric_oracles(criterion):
    rng = np.random.default_rng(0)
    worst_nme = worst_pck = 0.0
    for _ in range(100):
        k = int(rng.integers(3, 12))
        gt = rng.uniform(-1, 1, size=(k, 2))
        pred = gt + rng.normal(size=(k, 2)) * rng.uniform(0.01, 0.3)
        mask = rng.uniform(size=k) < 0.8
        mask[:2] = True
        i, j = rng.choice(k, 2, replace=False)
        norm = math.hypot(*(gt[i] - gt[j]))
        ref = math.fsum(math.hypot(*(pred[q] - gt[q])) / norm for q in range(k) if mask[q]) / mask.sum()
        worst_nme = max(worst_nme, abs(nme(pred, gt, mask, (i, j)) - ref))
        vis = gt[mask]
        side = max(vis[:, 0].max() - vis[:, 0].min(), vis[:, 1].max() - vis[:, 1].min())
        hits = [math.hypot(*(pred[q] - gt[q])) <= 0.1 * side for q in range(k) if mask[q]]
        worst_pck = max(worst_pck, abs(pck(pred, gt, mask) - sum(hits) / len(hits)))
    # inclusive boundary: an error of exactly 0.1 * side counts (values exact in binary)
    gt = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
    on = pck(gt + np.array([1.0, 0.0]), gt)
    off = pck(gt + np.array([1.0 + 1e-12, 0.0]), gt)
    ok = worst_nme <= 1e-12 and worst_pck <= 1e-12 and bbox_side(gt) == 10.0 and on == 1.0 and off == 0.0
    criterion(10, ok, f"nme err {worst_nme:.1e}, pck err {worst_pck:.1e}; boundary at 0.1*side gives {on}, just beyond gives {off}")


# ------------------------------------------------- 6 and 7. training runs

RUN = dict(iterations=3000, shots=10, image_size=64, batch_unlabeled=16)
SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def biped_ds(tmp_path_factory):
    return generate_dataset(stock_spec("biped-2d"), 2510, 0, tmp_path_factory.mktemp("biped") / "ds", {"train": 2010, "test": 500})


@pytest.fixture(scope="session")
def quad_ds(tmp_path_factory):
    return generate_dataset(stock_spec("quad-3d"), 2510, 0, tmp_path_factory.mktemp("quad") / "ds", {"train": 2010, "test": 500})


def run(ds, out, **kw):
    res = train(TrainConfig(dataset=str(ds), out=str(out), **{**RUN, **kw}))
    start = json.loads((out / "metrics_000000.json").read_text())
    return start, json.loads(res["metrics"].to_json())


@pytest.mark.slow
def test_c6_end_to_end_direction(biped_ds, tmp_path_factory, criterion):
    rows = []
    for seed in SEEDS:
        d = tmp_path_factory.mktemp(f"c6_{seed}")
        start, full = run(biped_ds, d / "full", seed=seed)
        _, fs = run(biped_ds, d / "few_shot", seed=seed, use_recon=False, use_geo2d=False, use_geo3d=False)
        rows.append((seed, start["pck"], full["pck"], fs["pck"]))
    gap_ok = sum(f - s >= 0.05 for _, _, f, s in rows)
    prog_ok = sum(f > z for _, z, f, _ in rows)
    detail = "; ".join(f"seed {s}: pck start {z:.3f} full {f:.3f} few-shot-only {o:.3f}" for s, z, f, o in rows)
    criterion(6, gap_ok >= 2 and prog_ok == 3, f"gap>=0.05 in {gap_ok}/3, progress in {prog_ok}/3; {detail}")


@pytest.mark.slow
def test_c7_depth_property(quad_ds, tmp_path_factory, criterion):
    rows = []
    for seed in SEEDS:
        d = tmp_path_factory.mktemp(f"c7_{seed}")
        start, on = run(quad_ds, d / "geo3d", seed=seed)
        _, off = run(quad_ds, d / "no_geo3d", seed=seed, use_geo3d=False)
        drop = 1.0 - on["geo3d_residual"] / start["geo3d_residual"]
        rows.append((seed, on["depth_alignment"], off["depth_alignment"], drop))
    better = sum(a > b for _, a, b, _ in rows)
    dropped = sum(r >= 0.5 for *_, r in rows)
    detail = "; ".join(f"seed {s}: |rho| with {a:.3f} without {b:.3f}, residual drop {r:.0%}" for s, a, b, r in rows)
    criterion(7, better >= 2 and dropped == 3, f"depth better in {better}/3, residual halved in {dropped}/3; {detail}")


def test_spearman_helper_agrees_with_scipy():
    # the depth score in criterion 7 is the mean |rho| of scipy's Spearman
    rng = np.random.default_rng(3)
    gt, pred = rng.normal(size=(2, 20, 12))
    ref = np.mean([abs(spearmanr(p, g)[0]) for p, g in zip(pred, gt)])
    assert depth_alignment_score(pred, gt) == pytest.approx(ref, abs=1e-12)
