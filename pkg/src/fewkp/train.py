"""Training loop, configuration, optimizer and run artifacts.

A run directory holds::

    config.json        resolved config plus the origin of every default
    shots.txt          indices of the annotated examples (one per line)
    loss_log.jsonl     one JSON object per iteration
    ckpt_NNNNNN.fkp    checkpoints (diffcore archive); last.fkp mirrors the newest
    metrics_000000.json, metrics.json    test-split reports at start and end
    vis.png            keypoints and edge maps on a few test images
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .evalkit import MetricReport, depth_alignment_score, evaluate, select_shots
from .geom import sample_transform
from .nets import DecoderNet, DetectorNet, MaskSpec, detect, get_feature_extractor, mask_image, reconstruct
from .objective import (
    LossWeights,
    NonFiniteLoss,
    PairingState,
    chain_smoothness_loss,
    equivariance_loss,
    few_shot_loss,
    part_align_loss,
    recon_loss,
    total_loss,
    warmup_strength,
)
from .skeledge import EdgeParams, EdgeVariant, render_skeleton
from .skeleton import load_skeleton
from .synthgen import Dataset, load_dataset
from .viz import render_preview

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    def __init__(self, msg, term=None, iteration=None):
        super().__init__(msg)
        self.term, self.iteration = term, iteration


@dataclass
class TrainConfig:
    dataset: str = ""
    out: str = "run"
    shots: int = 10
    selection: str = "kmeans"
    shots_file: str | None = None
    skeleton: str | None = None
    image_size: int = 64
    iterations: int = 3000
    warmup_iterations: int | None = None  # None: the whole run
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_unlabeled: int = 16
    batch_labeled: int | None = None  # None: min(16, shots)
    w_few_shot: float = 1.0
    w_recon: float = 1.0
    w_geo2d: float = 1.0
    w_geo3d: float = 0.1
    w_smooth: float = 0.02
    use_few_shot: bool = True
    use_recon: bool = True
    use_geo2d: bool = True
    use_geo3d: bool = True
    use_smooth: bool = False
    use_uncertainty: bool = True
    edge_variant: str = "multiplicative"
    width_mult: float = 0.5
    decoder_width_mult: float = 0.5
    patch_size: int = 16
    mask_ratio: float = 0.9
    feature_extractor: str = "pyramid"
    pairing_switch: int = 200
    seed: int = 0
    checkpoint_every: int = 500
    eval_split: str = "test"
    eval_batch: int = 50

    def __post_init__(self):
        for f in ("shots", "image_size", "batch_unlabeled", "checkpoint_every", "eval_batch"):
            if getattr(self, f) <= 0:
                raise ValueError(f"config: {f} must be positive, got {getattr(self, f)}")
        if self.iterations < 0:
            raise ValueError("config: iterations must be >= 0")
        EdgeVariant(self.edge_variant)

    @property
    def labeled_batch(self) -> int:
        return self.batch_labeled if self.batch_labeled is not None else min(16, self.shots)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_few_shot, self.w_recon, self.w_geo2d, self.w_geo3d, self.w_smooth)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"_defaults"}
        if unknown:
            raise ValueError(f"config: unknown key(s) {', '.join(sorted(unknown))}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# values the method was published with, where they differ from the desk defaults
PUBLISHED_VALUES = {"iterations": 20000, "image_size": 128}
PUBLISHED_DEFAULTS = {
    "lr", "beta1", "beta2", "eps", "batch_unlabeled", "batch_labeled", "w_few_shot", "w_recon", "w_geo2d",
    "w_geo3d", "w_smooth", "patch_size", "mask_ratio", "pairing_switch", "seed",
}  # fmt: skip


def config_echo(cfg: TrainConfig, given: set[str] | None = None) -> dict:
    """Resolved config with the origin of every value: user, published or desk default."""
    d = asdict(cfg)
    origin = {}
    for k in d:
        if given is not None and k in given:
            origin[k] = "user"
        elif k in PUBLISHED_VALUES:
            origin[k] = f"desk (published: {PUBLISHED_VALUES[k]})"
        elif k in PUBLISHED_DEFAULTS:
            origin[k] = "published"
        else:
            origin[k] = "desk"
    d["_defaults"] = origin
    return d


# -------------------------------------------------------------------- adam


@dataclass
class AdamState:
    t: int = 0
    m: dict = None
    v: dict = None

    def __post_init__(self):
        self.m = {} if self.m is None else self.m
        self.v = {} if self.v is None else self.v


def adam_step(params: dict, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.99, eps=1e-8) -> None:
    """Bias-corrected Adam on every named parameter that received a gradient."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------- rng

STREAMS = {"data": 1, "mask": 2, "transform": 3, "pairing": 4, "shots": 5, "init": 6}


def substream(seed: int, name: str, iteration: int = 0) -> np.random.Generator:
    """Independent generator per (seed, purpose, iteration)."""
    return np.random.default_rng([int(seed), STREAMS[name], int(iteration)])


# ------------------------------------------------------------------- model


class Model:
    def __init__(self, K: int, cfg: TrainConfig):
        self.det = DetectorNet(K, cfg.width_mult, seed=cfg.seed)
        self.dec = DecoderNet(cfg.decoder_width_mult, seed=cfg.seed + 1)
        self.edge = EdgeParams.init(cfg.edge_variant)

    def named_params(self) -> dict:
        d = {f"det.{k}": v for k, v in self.det.params.items()}
        d.update({f"dec.{k}": v for k, v in self.dec.params.items()})
        d["edge.theta"] = self.edge.theta
        d["edge.gamma"] = self.edge.gamma
        return d

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.named_params().items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, p in self.named_params().items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks parameter {k}")
            a = np.asarray(arrays[k], dtype=float)
            if a.shape != p.shape:
                raise dc.ShapeError(f"{k}: checkpoint shape {a.shape} != model shape {p.shape}")
            p.data = a.copy()


def save_checkpoint(path, model: Model, adam: AdamState, iteration: int, cfg: TrainConfig) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_arrays().items()}
    for k in adam.m:
        arrays[f"adam_m/{k}"] = adam.m[k]
        arrays[f"adam_v/{k}"] = adam.v[k]
    meta = {"iteration": iteration, "adam_t": adam.t, "K": model.det.K, "config": asdict(cfg)}
    dc.save_archive(path, arrays, meta)


def load_checkpoint(path, cfg: TrainConfig | None = None):
    """Returns (model, adam state, iteration, config)."""
    arrays, meta = dc.load_archive(path)
    cfg = cfg or TrainConfig.from_dict(meta["config"])
    model = Model(meta["K"], cfg)
    model.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    adam = AdamState(meta["adam_t"])
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            adam.m[k[7:]] = v.copy()
        elif k.startswith("adam_v/"):
            adam.v[k[7:]] = v.copy()
    return model, adam, meta["iteration"], cfg


# -------------------------------------------------------------------- data


def resolve_shots(cfg: TrainConfig, data: Dataset) -> np.ndarray:
    train = data.split("train")
    if cfg.shots_file:
        idx = np.array([int(l) for l in Path(cfg.shots_file).read_text().split()], dtype=int)
        if len(idx) != cfg.shots or np.any(~np.isin(idx, train)):
            raise ValueError(f"{cfg.shots_file}: expected {cfg.shots} indices from the train split")
        return idx
    feats = get_feature_extractor(cfg.feature_extractor)(data.images(train))
    seed = int(substream(cfg.seed, "shots").integers(2**31))
    return train[select_shots(feats, cfg.shots, cfg.selection, seed)]


# -------------------------------------------------------------- evaluation


def predict(model: Model, data: Dataset, idx, batch: int = 50):
    """Keypoints, uncertainty logits and depth for the given samples (no graph)."""
    pts, logit, dep = [], [], []
    with dc.no_grad():
        for s in range(0, len(idx), batch):
            d = detect(model.det, data.images(idx[s : s + batch]))
            pts.append(d.points.data)
            logit.append(d.logits.data)
            dep.append(d.depth.data)
    return np.concatenate(pts), np.concatenate(logit), np.concatenate(dep)


def geo3d_residual(k3d: np.ndarray, skel, chunk: int = 32) -> float:
    """Part-alignment value with nearest pairing, averaged over fixed chunks."""
    vals = []
    state = PairingState(iteration=0, switch_at=0)  # nearest pairing from the start
    with dc.no_grad():
        for s in range(0, len(k3d) - 1, chunk):
            part = k3d[s : s + chunk]
            if len(part) < 2:
                continue
            vals.append(float(part_align_loss(part, skel, state, np.random.default_rng(0)).data))
    return float(np.mean(vals))


def evaluate_model(model: Model, data: Dataset, split: str, batch: int = 50) -> MetricReport:
    idx = data.split(split)
    pts, _, dep = predict(model, data, idx, batch)
    extra = {}
    if data.depth is not None:
        extra["depth_alignment"] = depth_alignment_score(dep, data.depth[idx], data.visible[idx])
        extra["geo3d_residual"] = geo3d_residual(np.concatenate([pts, dep[..., None]], -1), data.skeleton)
    bbox = None if data.bbox is None else data.bbox[idx]
    return evaluate(pts, data.points[idx], data.annotated[idx], data.norm_pair, extra=extra, bbox=bbox)


# ------------------------------------------------------------------- train


def _fmt_log(d: dict) -> str:
    return json.dumps(d, separators=(",", ":"))


def train_step(model: Model, data: Dataset, cfg: TrainConfig, shots, unlabeled, it: int, adam: AdamState, feat):
    try:
        return _train_step(model, data, cfg, shots, unlabeled, it, adam, feat)
    except NonFiniteLoss as e:
        raise NumericFailure(f"iteration {it}: {e}", term=e.term, iteration=it) from e
    except dc.NonFiniteError as e:
        raise NumericFailure(f"iteration {it}: {e}", iteration=it) from e


def _train_step(model, data, cfg, shots, unlabeled, it, adam, feat):
    skel = data.skeleton
    rng = substream(cfg.seed, "data", it)
    nl = cfg.labeled_batch
    lab = shots if nl >= len(shots) else rng.choice(shots, size=nl, replace=False)
    unl = rng.choice(unlabeled, size=min(cfg.batch_unlabeled, len(unlabeled)), replace=False)
    idx = np.concatenate([lab, unl])
    images = data.images(idx)
    n, h, w, _ = images.shape
    strength = warmup_strength(it, cfg.warmup_iterations or max(cfg.iterations, 1))

    det = detect(model.det, images)
    terms = {}
    if cfg.use_few_shot:
        ann = np.zeros((n, skel.K), dtype=bool)
        ann[: len(lab)] = data.annotated[lab]
        gt = np.zeros((n, skel.K, 2))
        gt[: len(lab)] = data.points[lab]
        terms["few_shot"], _ = few_shot_loss(det.points, gt, ann)
    if cfg.use_geo2d:
        trng = substream(cfg.seed, "transform", it)
        ts = [sample_transform(strength, trng) for _ in range(n)]
        terms["geo2d"], _ = equivariance_loss(
            lambda x: detect(model.det, x).points, images, ts, skel.flip_permutation, base_points=det.points
        )
    if cfg.use_recon:
        mrng = substream(cfg.seed, "mask", it)
        spec = MaskSpec(cfg.patch_size, cfg.mask_ratio)
        masked = np.stack([mask_image(im, spec, mrng)[0] for im in images])
        edge_map = render_skeleton(det.points, det.logits, skel.edges, model.edge, h, w, cfg.use_uncertainty)
        terms["recon"] = recon_loss(reconstruct(model.dec, edge_map, masked), images, feat)
    if cfg.use_geo3d:
        state = PairingState(it, cfg.pairing_switch)
        terms["geo3d"] = part_align_loss(det.k3d, skel, state, substream(cfg.seed, "pairing", it))
    if cfg.use_smooth and skel.chains:
        terms["smooth"] = chain_smoothness_loss(det.points, skel.chains)
    loss = total_loss(terms, cfg.weights)
    params = model.named_params()
    dc.zero_grads(list(params.values()))
    if loss.requires_grad:
        dc.backward(loss)
    adam_step(params, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rec = {"iteration": it}
    for k in ("few_shot", "recon", "geo2d", "geo3d", "smooth"):
        if k in terms:
            rec[k] = float(terms[k].data)
    rec["total"] = float(loss.data)
    rec["warmup"] = strength
    return rec


def train(cfg: TrainConfig, resume: bool = False, given: set[str] | None = None) -> dict:
    """Run training; returns a dict of artifact paths and final metrics."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg.dataset, images=True)
    if cfg.skeleton:
        data.skeleton = load_skeleton(cfg.skeleton)
    if data.image_size != cfg.image_size:
        raise ValueError(f"config image_size {cfg.image_size} but dataset images are {data.image_size}")
    (out / "config.json").write_text(json.dumps(config_echo(cfg, given), indent=2) + "\n")
    feat = get_feature_extractor(cfg.feature_extractor)
    log_path = out / "loss_log.jsonl"
    last = out / "last.fkp"
    if resume and last.exists():
        model, adam, start, _ = load_checkpoint(last, cfg)
        shots = np.array([int(l) for l in (out / "shots.txt").read_text().split()], dtype=int)
        # keep only the log lines the checkpoint covers
        lines = log_path.read_text().splitlines() if log_path.exists() else []
        log_path.write_text("".join(l + "\n" for l in lines[:start]))
        log.info("resuming from iteration %d", start)
    else:
        model = Model(data.K, cfg)
        adam = AdamState()
        start = 0
        shots = resolve_shots(cfg, data)
        (out / "shots.txt").write_text("".join(f"{i}\n" for i in shots))
        log_path.write_text("")
        save_checkpoint(out / "ckpt_000000.fkp", model, adam, 0, cfg)
        shutil.copyfile(out / "ckpt_000000.fkp", last)
        rep0 = evaluate_model(model, data, cfg.eval_split, cfg.eval_batch)
        (out / "metrics_000000.json").write_text(rep0.to_json())
    unlabeled = np.setdiff1d(data.split("train"), shots)
    if len(unlabeled) == 0:
        unlabeled = shots
    with open(log_path, "a") as logf:
        for it in range(start, cfg.iterations):
            rec = train_step(model, data, cfg, shots, unlabeled, it, adam, feat)
            logf.write(_fmt_log(rec) + "\n")
            if it % 100 == 0:
                logf.flush()
                log.info("it %d total %.5f", it, rec["total"])
            done = it + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.iterations:
                ck = out / f"ckpt_{done:06d}.fkp"
                save_checkpoint(ck, model, adam, done, cfg)
                shutil.copyfile(ck, last)
    report = evaluate_model(model, data, cfg.eval_split, cfg.eval_batch)
    (out / "metrics.json").write_text(report.to_json())
    render_preview(model, data, data.split(cfg.eval_split)[:8], out / "vis.png", cfg.use_uncertainty)
    return {"dir": str(out), "metrics": report, "checkpoint": str(last), "shots": shots}
