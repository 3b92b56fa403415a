"""Procedural articulated creatures with exact ground-truth keypoints.

A creature is a kinematic tree.  Every joint hangs off its parent by a rest
offset (body frame, y up, z lateral) and swings about the lateral axis by a
uniformly drawn angle.  2D creatures are rotated in the image plane; 3D ones
get a yaw/pitch/roll and a weak-perspective projection whose camera-axis
coordinate is the ground-truth depth (smaller = nearer).

On-disk layout of a dataset directory::

    manifest            JSON: format, spec name + sha256, n, seed, splits, norm_pair, ...
    skeleton            JSON skeleton (see skeleton.py)
    images/000000.png   8-bit RGB
    annotations.txt     one JSON record per line, floats with 9 significant digits:
                        {"index", "seed", "points" [[x, y]...], "depth" [..] | null,
                         "annotated" [0/1...], "visible" [0/1...], "pose" {...}}

PCK normalizes by the largest side of each sample's ground-truth keypoint box
unless the manifest sets "pck_bbox": "annotations", in which case every record
must carry its own positive "bbox_side".
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geom import pixel_grid
from .skeleton import Skeleton

FORMAT = "fewkp-dataset/1"


class DatasetError(Exception):
    """Schema or corruption problem in an on-disk dataset."""


class GenerationError(RuntimeError):
    pass


@dataclass
class Joint:
    name: str
    parent: int  # -1 for the root
    offset: tuple  # rest offset from the parent, body frame (x, y, z)
    swing: float  # half-range of the swing about the lateral axis, radians
    color: int = 0  # index into CreatureSpec.colors for the bone to the parent


@dataclass
class CreatureSpec:
    name: str
    joints: list[Joint]
    edges: list[tuple[int, int]]
    parts: list[list[int]]
    norm_pair: tuple[int, int]
    is_3d: bool = False
    image_size: int = 64
    rotation: float = np.deg2rad(30.0)  # in-plane (2D) or yaw (3D) half-range
    tilt: float = 0.0  # 3D pitch and roll half-range
    scale: tuple = (0.55, 0.7)
    translation: float = 0.15
    stroke: float = 0.07  # bone half-width, normalized units
    head_joint: int = -1  # drawn as a disc of twice the stroke width
    colors: list = field(default_factory=lambda: [(0.9, 0.85, 0.2), (0.9, 0.2, 0.2), (0.2, 0.45, 0.95)])
    color_jitter: float = 0.08
    background: str = "smooth"  # smooth | flat
    background_contrast: float = 0.35
    background_color: tuple | None = None  # fixed base colour instead of a random one
    pixel_noise: float = 0.03
    occluder_prob: float = 0.2
    occluder_size: tuple = (0.2, 0.45)
    margin: float = 0.95
    # optional articulation modes: per-joint angle centres (radians); a sample picks one
    # uniformly and jitters each joint by mode_jitter times its swing
    pose_modes: list | None = None
    mode_jitter: float = 0.25

    @property
    def K(self) -> int:
        return len(self.joints)

    def skeleton(self) -> Skeleton:
        return Skeleton(
            K=self.K,
            edges=self.edges,
            parts=self.parts,
            # left and right limbs have distinct colours, so mirroring keeps labels
            flip_permutation=list(range(self.K)),
            names=[j.name for j in self.joints],
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["joints"] = [asdict(j) for j in self.joints]
        return json.loads(json.dumps(d))  # tuples -> lists, numpy floats -> float

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _biped() -> CreatureSpec:
    d = np.deg2rad
    j = [
        Joint("head", 1, (0.0, 0.2, 0.0), d(25), 0),
        Joint("neck", 2, (0.0, 0.25, 0.0), d(10), 0),
        Joint("chest", -1, (0.0, 0.0, 0.0), 0.0, 0),
        Joint("pelvis", 2, (0.0, -0.45, 0.0), d(10), 0),
        Joint("l_hand", 2, (-0.3, -0.45, 0.0), d(45), 1),
        Joint("r_hand", 2, (0.3, -0.45, 0.0), d(45), 2),
        Joint("l_foot", 3, (-0.2, -0.55, 0.0), d(25), 1),
        Joint("r_foot", 3, (0.2, -0.55, 0.0), d(25), 2),
    ]
    edges = [(0, 1), (1, 2), (2, 3), (2, 4), (2, 5), (3, 6), (3, 7)]
    parts = [[0, 1, 2, 4, 5], [2, 3, 6, 7]]
    return CreatureSpec("biped-2d", j, edges, parts, norm_pair=(0, 1), head_joint=0)


def _quad() -> CreatureSpec:
    d = np.deg2rad
    j = [
        Joint("nose", 1, (0.18, -0.1, 0.0), d(10), 0),
        Joint("head", 2, (0.22, 0.22, 0.0), d(25), 0),
        Joint("neck", 3, (0.8, 0.1, 0.0), d(8), 0),
        Joint("hip", -1, (0.0, 0.0, 0.0), 0.0, 0),
        Joint("lf_knee", 2, (0.0, -0.38, 0.16), d(30), 1),
        Joint("lf_paw", 4, (0.0, -0.32, 0.0), d(30), 1),
        Joint("rf_knee", 2, (0.0, -0.38, -0.16), d(30), 2),
        Joint("rf_paw", 6, (0.0, -0.32, 0.0), d(30), 2),
        Joint("lb_knee", 3, (0.0, -0.38, 0.16), d(30), 1),
        Joint("lb_paw", 8, (0.0, -0.32, 0.0), d(30), 1),
        Joint("rb_knee", 3, (0.0, -0.38, -0.16), d(30), 2),
        Joint("rb_paw", 10, (0.0, -0.32, 0.0), d(30), 2),
    ]
    edges = [(0, 1), (1, 2), (2, 3), (2, 4), (4, 5), (2, 6), (6, 7), (3, 8), (8, 9), (3, 10), (10, 11)]
    parts = [[0, 1, 2], [2, 4, 5, 6, 7], [3, 8, 9, 10, 11], [1, 2, 3]]
    return CreatureSpec(
        "quad-3d",
        j,
        edges,
        parts,
        norm_pair=(0, 1),
        is_3d=True,
        rotation=np.deg2rad(60.0),
        tilt=np.deg2rad(12.0),
        scale=(0.75, 0.9),
        translation=0.12,
        stroke=0.06,
        head_joint=1,
    )


def _biped_modes() -> CreatureSpec:
    # four clearly separated articulations on a plain background
    d = np.deg2rad
    spec = _biped()
    spec.name = "biped-modes"
    #                 head   neck  chest pelvis l_hand  r_hand  l_foot r_foot
    spec.pose_modes = [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],  # standing
        [0.0, 0.0, 0.0, 0.0, d(-140), d(140), 0.0, 0.0],  # arms raised
        [0.0, 0.0, 0.0, 0.0, d(-70), d(70), d(-70), 0.0],  # arms out, left kick
        [d(-35), d(-15), 0.0, 0.0, d(55), d(-55), d(30), d(-30)],  # head down, arms crossed
    ]
    spec.background = "flat"
    spec.background_color = (0.5, 0.5, 0.5)
    spec.rotation = d(10.0)
    spec.translation = 0.08
    spec.occluder_prob = 0.0
    return spec


STOCK = {"biped-2d": _biped, "quad-3d": _quad, "biped-modes": _biped_modes}


def stock_spec(name: str) -> CreatureSpec:
    try:
        return STOCK[name]()
    except KeyError:
        raise ValueError(f"unknown creature spec {name!r}; stock specs: {', '.join(STOCK)}") from None


# ------------------------------------------------------------------ posing


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def sample_pose(spec: CreatureSpec, rng: np.random.Generator) -> dict:
    """Raw pose parameters, each uniform over its spec range."""
    k = spec.K
    swings = np.array([j.swing for j in spec.joints])
    mode = None
    if spec.pose_modes:
        mode = int(rng.integers(len(spec.pose_modes)))
        angles = np.asarray(spec.pose_modes[mode], dtype=float) + rng.uniform(-1.0, 1.0, size=k) * swings * spec.mode_jitter
    else:
        angles = rng.uniform(-1.0, 1.0, size=k) * swings
    pose = {
        "angles": angles.tolist(),
        "rotation": float(rng.uniform(-spec.rotation, spec.rotation)),
        "pitch": float(rng.uniform(-spec.tilt, spec.tilt)) if spec.is_3d else 0.0,
        "roll": float(rng.uniform(-spec.tilt, spec.tilt)) if spec.is_3d else 0.0,
        "scale": float(rng.uniform(*spec.scale)),
        "tx": float(rng.uniform(-spec.translation, spec.translation)),
        "ty": float(rng.uniform(-spec.translation, spec.translation)),
    }
    if mode is not None:
        pose["mode"] = mode
    return pose


def _order(spec: CreatureSpec) -> list[int]:
    done, order = set(), []
    while len(order) < spec.K:
        for i, j in enumerate(spec.joints):
            if i not in done and (j.parent < 0 or j.parent in done):
                done.add(i)
                order.append(i)
    return order


def body_points(spec: CreatureSpec, angles) -> np.ndarray:
    """Joint positions in the body frame (K, 3) for per-joint swing angles."""
    k = spec.K
    pos = np.zeros((k, 3))
    rot = [np.eye(3)] * k
    for i in _order(spec):
        jt = spec.joints[i]
        if jt.parent < 0:
            rot[i] = _rot_z(angles[i])
            continue
        r = rot[jt.parent] @ _rot_z(angles[i])
        rot[i] = r
        pos[i] = pos[jt.parent] + r @ np.asarray(jt.offset, dtype=float)
    return pos


def project_pose(spec: CreatureSpec, pose: dict) -> tuple[np.ndarray, np.ndarray | None]:
    """Image points (K, 2) in normalized (x right, y down) and camera depth or None."""
    body = body_points(spec, np.asarray(pose["angles"], dtype=float))
    body = body - body.mean(axis=0)
    if spec.is_3d:
        r = _rot_x(pose["roll"]) @ _rot_z(pose["pitch"]) @ _rot_y(pose["rotation"])
    else:
        r = _rot_z(pose["rotation"])
    cam = pose["scale"] * body @ r.T
    pts = np.stack([cam[:, 0] + pose["tx"], -cam[:, 1] + pose["ty"]], axis=1)
    return pts, (cam[:, 2].copy() if spec.is_3d else None)


# --------------------------------------------------------------- rendering


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    gt_points: np.ndarray  # (K, 2)
    gt_depth: np.ndarray | None
    annotated: np.ndarray
    visible: np.ndarray
    pose: dict = field(default_factory=dict)


def _seg_dist(grid, a, b):
    ab = b - a
    den = float(ab @ ab)
    t = np.zeros(len(grid)) if den == 0.0 else np.clip(((grid - a) @ ab) / den, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.sqrt(((grid - proj) ** 2).sum(-1)), t


def _background(spec: CreatureSpec, rng, h, w):
    base = rng.uniform(0.25, 0.75, size=3)
    if spec.background_color is not None:
        base = np.asarray(spec.background_color, dtype=float)
    coarse = rng.uniform(-1.0, 1.0, size=(4, 4, 3)) * spec.background_contrast
    if spec.background == "flat":
        coarse[:] = 0.0
    img = np.asarray(
        Image.fromarray(((coarse + 1.0) * 127.5).clip(0, 255).astype(np.uint8)).resize((w, h), Image.BILINEAR),
        dtype=float,
    )
    return base + img / 127.5 - 1.0


def _draw(spec: CreatureSpec, pts, depth, rng):
    h = w = spec.image_size
    grid = pixel_grid(h, w)
    img = _background(spec, rng, h, w).reshape(-1, 3)
    colors = np.clip(np.asarray(spec.colors, float) + rng.uniform(-1, 1, (len(spec.colors), 3)) * spec.color_jitter, 0, 1)
    bones = [(i, jt.parent) for i, jt in enumerate(spec.joints) if jt.parent >= 0]
    # painter's order: far bones first
    if depth is not None:
        bones.sort(key=lambda b: -(depth[b[0]] + depth[b[1]]))
    for i, p in bones:
        d, _ = _seg_dist(grid, pts[p], pts[i])
        cov = np.clip((spec.stroke - d) * w / 2.0 + 0.5, 0.0, 1.0)  # ~1 px antialiasing
        img = img * (1 - cov[:, None]) + colors[spec.joints[i].color] * cov[:, None]
    if spec.head_joint >= 0:
        d = np.sqrt(((grid - pts[spec.head_joint]) ** 2).sum(-1))
        cov = np.clip((2.0 * spec.stroke - d) * w / 2.0 + 0.5, 0.0, 1.0)
        img = img * (1 - cov[:, None]) + colors[spec.joints[spec.head_joint].color] * cov[:, None]
    return img.reshape(h, w, 3)


def _self_occluded(spec: CreatureSpec, pts, depth) -> np.ndarray:
    """Keypoint hidden when a nearer bone not touching it passes within a stroke width."""
    hidden = np.zeros(spec.K, dtype=bool)
    if depth is None:
        return hidden
    bones = [(i, jt.parent) for i, jt in enumerate(spec.joints) if jt.parent >= 0]
    for k in range(spec.K):
        for i, p in bones:
            if k in (i, p):
                continue
            d, t = _seg_dist(pts[k : k + 1], pts[p], pts[i])
            z = depth[p] + t[0] * (depth[i] - depth[p])
            if d[0] < spec.stroke and z < depth[k]:
                hidden[k] = True
                break
    return hidden


def generate_sample(spec: CreatureSpec, seed: int) -> Sample:
    """Deterministic in (spec, seed); rejects poses leaving the frame (100 attempts)."""
    for attempt in range(100):
        rng = np.random.default_rng([int(seed), attempt])
        pose = sample_pose(spec, rng)
        pts, depth = project_pose(spec, pose)
        if np.all(np.abs(pts) <= spec.margin):
            break
    else:
        raise GenerationError(f"{spec.name}: figure left the frame in 100 attempts (seed {seed})")
    img = _draw(spec, pts, depth, rng)
    visible = ~_self_occluded(spec, pts, depth)
    if rng.uniform() < spec.occluder_prob:
        side = rng.uniform(*spec.occluder_size, size=2)
        # centre the occluder on a random keypoint so it actually covers the figure
        c = pts[rng.integers(spec.K)] + rng.uniform(-0.1, 0.1, size=2)
        lo, hi = c - side / 2, c + side / 2
        grid = pixel_grid(spec.image_size, spec.image_size)
        inside = np.all((grid >= lo) & (grid <= hi), axis=1).reshape(spec.image_size, spec.image_size)
        img[inside] = rng.uniform(0.0, 1.0, size=3)
        visible &= ~np.all((pts >= lo) & (pts <= hi), axis=1)
    img = np.clip(img + rng.normal(0.0, spec.pixel_noise, size=img.shape), 0.0, 1.0)
    pose["attempt"] = attempt
    return Sample(img, pts, depth, np.ones(spec.K, dtype=bool), visible, pose)


# ---------------------------------------------------------------- datasets


def _fmt(x) -> float:
    return float(f"{float(x):.9g}")


def _record(i: int, seed: int, s: Sample) -> dict:
    pose = {k: ([_fmt(a) for a in v] if isinstance(v, list) else (v if k in ("attempt", "mode") else _fmt(v))) for k, v in s.pose.items()}
    return {
        "index": i,
        "seed": seed,
        "points": [[_fmt(x), _fmt(y)] for x, y in s.gt_points],
        "depth": None if s.gt_depth is None else [_fmt(z) for z in s.gt_depth],
        "annotated": [int(a) for a in s.annotated],
        "visible": [int(v) for v in s.visible],
        "pose": pose,
    }


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def generate_dataset(spec: CreatureSpec, n: int, seed: int, out, splits: dict | None = None) -> Path:
    """Write n samples (per-sample seed seed + i) with manifest, skeleton and annotations.

    ``splits`` maps split names to counts taken in index order; by default
    everything is "train".
    """
    if n <= 0:
        raise ValueError(f"dataset size must be positive, got {n}")
    splits = dict(splits or {"train": n})
    if sum(splits.values()) != n or any(v < 0 for v in splits.values()):
        raise ValueError(f"split sizes {splits} do not add up to {n}")
    out = Path(out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        recs = []
        for i in range(n):
            s = generate_sample(spec, seed + i)
            Image.fromarray(to_uint8(s.image), "RGB").save(out / "images" / f"{i:06d}.png")
            recs.append(json.dumps(_record(i, seed + i, s), separators=(",", ":")))
        ann = "\n".join(recs) + "\n"
        (out / "annotations.txt").write_text(ann)
        spec.skeleton()  # validates the topology
        from .skeleton import save_skeleton

        save_skeleton(spec.skeleton(), out / "skeleton")
        start, ranges = 0, {}
        for name, cnt in splits.items():
            ranges[name] = [start, start + cnt]
            start += cnt
        manifest = {
            "format": FORMAT,
            "spec_name": spec.name,
            "spec_sha256": spec.digest(),
            "spec": spec.to_dict(),
            "n": n,
            "seed": seed,
            "image_size": spec.image_size,
            "K": spec.K,
            "has_depth": spec.is_3d,
            "norm_pair": list(spec.norm_pair),
            "splits": ranges,
            "annotations_sha256": hashlib.sha256(ann.encode()).hexdigest(),
        }
        (out / "manifest").write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as e:
        raise OSError(f"writing dataset to {out}: {e}") from e
    return out


def manifest_hash(path) -> str:
    return hashlib.sha256((Path(path) / "manifest").read_bytes()).hexdigest()


class Dataset:
    """Eager annotations, lazily loaded images (uint8 cache)."""

    def __init__(self, root: Path, manifest: dict, skeleton: Skeleton, records: list[dict], load_images: bool):
        self.root = root
        self.manifest = manifest
        self.skeleton = skeleton
        self.n = len(records)
        self.K = manifest["K"]
        self.image_size = manifest["image_size"]
        self.norm_pair = tuple(manifest["norm_pair"])
        self.points = np.array([r["points"] for r in records], dtype=float)
        self.depth = np.array([r["depth"] for r in records], dtype=float) if manifest["has_depth"] else None
        self.annotated = np.array([r["annotated"] for r in records], dtype=bool)
        self.visible = np.array([r["visible"] for r in records], dtype=bool)
        self.poses = [r["pose"] for r in records]
        # PCK reference sides; None means the ground-truth keypoint box
        self.bbox = np.array([r["bbox_side"] for r in records], dtype=float) if manifest.get("pck_bbox") == "annotations" else None
        self._u8 = None
        if load_images:
            self.load_images()

    def __len__(self) -> int:
        return self.n

    def split(self, name: str) -> np.ndarray:
        try:
            a, b = self.manifest["splits"][name]
        except KeyError:
            raise DatasetError(f"{self.root}: no split {name!r} (have {', '.join(self.manifest['splits'])})") from None
        return np.arange(a, b)

    def load_images(self) -> None:
        if self._u8 is not None:
            return
        s = self.image_size
        arr = np.empty((self.n, s, s, 3), dtype=np.uint8)
        for i in range(self.n):
            p = self.root / "images" / f"{i:06d}.png"
            try:
                with Image.open(p) as im:
                    im.load()
                    a = np.asarray(im.convert("RGB"))
            except FileNotFoundError:
                raise DatasetError(f"{p}: image missing") from None
            except OSError as e:
                raise DatasetError(f"{p}: corrupt image ({e})") from e
            if a.shape != (s, s, 3):
                raise DatasetError(f"{p}: image shape {a.shape}, manifest says {(s, s, 3)}")
            arr[i] = a
        self._u8 = arr

    def images(self, idx) -> np.ndarray:
        """Float64 images in [0, 1] for an index array."""
        self.load_images()
        return self._u8[np.asarray(idx)].astype(np.float64) / 255.0

    def image(self, i: int) -> np.ndarray:
        return self.images([i])[0]


_REQUIRED = ("format", "n", "K", "image_size", "has_depth", "norm_pair", "splits")


def load_dataset(path, images: bool = False) -> Dataset:
    """Load and validate a dataset directory.  ``images=False`` defers PNG reads."""
    root = Path(path)
    mpath = root / "manifest"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise DatasetError(f"{mpath}: manifest missing") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: manifest is not valid JSON ({e})") from e
    if not isinstance(manifest, dict):
        raise DatasetError(f"{mpath}: manifest must be a JSON object")
    for k in _REQUIRED:
        if k not in manifest:
            raise DatasetError(f"{mpath}: manifest missing field {k!r}")
    if manifest["format"] != FORMAT:
        raise DatasetError(f"{mpath}: unsupported format {manifest['format']!r}")
    from .skeleton import SkeletonError, load_skeleton

    try:
        skel = load_skeleton(root / "skeleton")
    except FileNotFoundError:
        raise DatasetError(f"{root / 'skeleton'}: skeleton missing") from None
    except SkeletonError as e:
        raise DatasetError(f"{root / 'skeleton'}: {e}") from e
    n, k = manifest["n"], manifest["K"]
    if skel.K != k:
        raise DatasetError(f"{root}: skeleton K={skel.K} but manifest K={k}")
    apath = root / "annotations.txt"
    try:
        text = apath.read_text()
    except FileNotFoundError:
        raise DatasetError(f"{apath}: annotations missing") from None
    if "annotations_sha256" in manifest and hashlib.sha256(text.encode()).hexdigest() != manifest["annotations_sha256"]:
        lines = text.split("\n")
        why = "truncated" if not text.endswith("\n") or len([l for l in lines if l]) < n else "checksum mismatch"
        raise DatasetError(f"{apath}: corrupt annotations ({why})")
    lines = [l for l in text.split("\n") if l.strip()]
    if len(lines) != n:
        raise DatasetError(f"{apath}: {len(lines)} records, manifest says {n} (truncated?)")
    records = []
    for i, line in enumerate(lines):
        try:
            r = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{apath}: sample {i}: corrupt record ({e})") from e
        _check_record(r, i, k, manifest["has_depth"], apath, manifest.get("pck_bbox") == "annotations")
        records.append(r)
    return Dataset(root, manifest, skel, records, images)


def _check_record(r, i: int, k: int, has_depth: bool, where, needs_bbox: bool = False) -> None:
    def bad(field_, why):
        raise DatasetError(f"{where}: sample {i}: field {field_!r} {why}")

    if not isinstance(r, dict):
        bad("record", "is not an object")
    if r.get("index") != i:
        bad("index", f"is {r.get('index')!r}, expected {i}")
    pts = r.get("points")
    if not isinstance(pts, list) or len(pts) != k or any(not isinstance(p, list) or len(p) != 2 for p in pts):
        bad("points", f"must be {k} pairs")
    arr = np.asarray(pts, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(np.abs(arr) > 1.0):
        bad("points", "must be finite and inside [-1, 1]^2")
    for f in ("annotated", "visible"):
        v = r.get(f)
        if not isinstance(v, list) or len(v) != k or any(x not in (0, 1) for x in v):
            bad(f, f"must be {k} flags in {{0, 1}}")
    dep = r.get("depth")
    if has_depth:
        if not isinstance(dep, list) or len(dep) != k or not np.all(np.isfinite(np.asarray(dep, dtype=float))):
            bad("depth", f"must be {k} finite reals")
    elif dep is not None:
        bad("depth", "must be null for a 2D dataset")
    if needs_bbox:
        side = r.get("bbox_side")
        if not isinstance(side, (int, float)) or not np.isfinite(side) or side <= 0:
            bad("bbox_side", "must be a positive real (manifest pck_bbox is 'annotations')")
