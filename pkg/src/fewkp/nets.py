"""Desk-scale detector / reconstruction networks, patch masking, features.

Images are NHWC float64 in [0, 1].
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geom import KeypointSet, soft_argmax, weighted_readout

GRAY = np.array([0.299, 0.587, 0.114])


class Module:
    """Holds named parameters in creation order."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _conv(self, name: str, k: int, cin: int, cout: int, rng: np.random.Generator, zero: bool = False):
        bound = 1.0 / np.sqrt(k * k * cin)
        if zero:
            w = np.zeros((k, k, cin, cout))
            b = np.zeros(cout)
        else:
            w = rng.uniform(-bound, bound, size=(k, k, cin, cout))
            b = rng.uniform(-bound, bound, size=cout)
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(b, requires_grad=True, name=f"{name}.b")

    def conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return dc.conv2d(x, self.params[f"{name}.w"], stride, self.params[f"{name}.b"])

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[prefix + k], dtype=float)
            if arr.shape != p.shape:
                raise dc.ShapeError(f"{prefix + k}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()


def _widths(width_mult: float, base) -> list[int]:
    return [max(1, int(round(c * width_mult))) for c in base]


class DetectorNet(Module):
    """Stride-2 conv encoder (3 levels), nearest-upsample decoder, three K-channel heads.

    Head order in the output channels: heatmaps, uncertainty maps, depth maps.
    The decoder fuses encoder skips and finishes at half resolution; the 1x1
    heads commute with the final nearest upsampling, so they run there too.
    """

    def __init__(self, K: int, width_mult: float = 1.0, seed: int = 0, zero_head: bool = False):
        super().__init__()
        self.K = K
        rng = np.random.default_rng(seed)
        c1, c2, c3 = _widths(width_mult, (16, 32, 64))
        self._conv("enc1", 3, 3, c1, rng)
        self._conv("enc2", 3, c1, c2, rng)
        self._conv("enc3", 3, c2, c3, rng)
        self._conv("dec2", 3, c3, c2, rng)
        self._conv("dec1", 3, 2 * c2, c2, rng)
        self._conv("dec0", 3, c2 + c1, c1, rng)
        # a zero head puts every keypoint at the centre with depth 0
        self._conv("head", 1, c1, 3 * K, rng, zero=zero_head)

    def __call__(self, x: Tensor) -> Tensor:
        return dc.upsample(self.half_res(x))  # (N, H, W, 3K)

    def half_res(self, x: Tensor) -> Tensor:
        """Head maps before the final nearest upsampling, (N, H/2, W/2, 3K)."""
        h, w = x.shape[1:3]
        if h % 8 or w % 8:
            raise dc.ShapeError(f"detector input {x.shape} must have H, W divisible by 8")
        e1 = dc.relu(self.conv("enc1", x, 2))
        e2 = dc.relu(self.conv("enc2", e1, 2))
        e3 = dc.relu(self.conv("enc3", e2, 2))
        d2 = dc.relu(self.conv("dec2", dc.upsample(e3)))
        d1 = dc.relu(self.conv("dec1", dc.concat([d2, e2], axis=3)))
        d0 = dc.relu(self.conv("dec0", dc.concat([dc.upsample(d1), e1], axis=3)))
        return self.conv("head", d0)


class DecoderNet(Module):
    """Small U-Net: 4 input channels (masked RGB + edge map) -> RGB in [0, 1].

    Two stride-2 levels down, two nearest-upsample levels up with skips; the
    raw input is concatenated again before the full-resolution 1x1 output.
    """

    def __init__(self, width_mult: float = 1.0, seed: int = 1):
        super().__init__()
        rng = np.random.default_rng(seed)
        c1, c2 = _widths(width_mult, (16, 32))
        self._conv("down1", 3, 4, c1, rng)
        self._conv("down2", 3, c1, c2, rng)
        self._conv("mid", 3, c2, c2, rng)
        self._conv("up1", 3, c2 + c1, c1, rng)
        self._conv("out", 1, c1 + 4, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise dc.ShapeError(f"decoder input {x.shape} must have H, W divisible by 4")
        e1 = dc.relu(self.conv("down1", x, 2))
        e2 = dc.relu(self.conv("down2", e1, 2))
        m = dc.relu(self.conv("mid", e2))
        u1 = dc.relu(self.conv("up1", dc.concat([dc.upsample(m), e1], axis=3)))
        return dc.sigmoid(self.conv("out", dc.concat([dc.upsample(u1), x], axis=3)))


@dataclass
class Detection:
    points: Tensor  # (N, K, 2)
    logits: Tensor  # (N, K) uncertainty logits
    depth: Tensor  # (N, K)
    weights: Tensor  # (N, K, H*W)

    @property
    def k3d(self) -> Tensor:
        return dc.concat([self.points, dc.reshape(self.depth, self.depth.shape + (1,))], axis=2)

    def keypoint_sets(self) -> list[KeypointSet]:
        return [
            KeypointSet(self.points.data[n].copy(), self.logits.data[n].copy(), self.depth.data[n].copy())
            for n in range(self.points.shape[0])
        ]


def detect(net: DetectorNet, image) -> Detection:
    """Run the detector and read out keypoints, uncertainty logits and depths.

    The full-resolution maps are a 2x nearest upsampling of the half-resolution
    ones, so each 2x2 block carries one logit.  The softmax mass per block and
    the block's mean pixel centre are then exactly those of the half-resolution
    grid, and the readout is done there.  ``weights`` lives on that grid.
    """
    x = dc.as_tensor(image)
    if x.ndim == 3:
        x = dc.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[3] != 3:
        raise dc.ShapeError(f"detect: expected (N, H, W, 3) image, got {x.shape}")
    n, h, w, _ = x.shape
    k = net.K
    maps = dc.transpose(net.half_res(x), (0, 3, 1, 2))  # (N, 3K, H/2, W/2)
    heat, unc, dep = maps[:, :k], maps[:, k : 2 * k], maps[:, 2 * k :]
    points, weights = soft_argmax(heat)
    logits = weighted_readout(weights, unc)
    depth = weighted_readout(weights, dep)
    return Detection(points, logits, depth, weights)


def reconstruct(net: DecoderNet, edge_map, masked) -> Tensor:
    """Decode (N, H, W) edge map + (N, H, W, 3) masked image into an image."""
    edge_map, masked = dc.as_tensor(edge_map), dc.as_tensor(masked)
    if edge_map.ndim == 2:
        edge_map = dc.reshape(edge_map, (1,) + edge_map.shape)
    if masked.ndim == 3:
        masked = dc.reshape(masked, (1,) + masked.shape)
    if edge_map.shape != masked.shape[:3]:
        raise dc.ShapeError(f"reconstruct: edge map {edge_map.shape} vs image {masked.shape}")
    x = dc.concat([masked, dc.reshape(edge_map, edge_map.shape + (1,))], axis=3)
    return net(x)


# ------------------------------------------------------------------ masking


@dataclass
class MaskSpec:
    patch_size: int = 16
    mask_ratio: float = 0.9


def mask_image(image: np.ndarray, spec: MaskSpec, rng: np.random.Generator):
    """Zero round(mask_ratio * P) of the P square patches, chosen without replacement.

    Returns (masked image, (H/ps, W/ps) boolean mask, True = removed).
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    ps = spec.patch_size
    if h % ps or w % ps:
        raise ValueError(f"image {h}x{w} not divisible by patch size {ps}")
    gh, gw = h // ps, w // ps
    n_patch = gh * gw
    n_mask = int(np.floor(spec.mask_ratio * n_patch + 0.5))
    chosen = rng.choice(n_patch, size=n_mask, replace=False)
    mask = np.zeros(n_patch, dtype=bool)
    mask[chosen] = True
    mask = mask.reshape(gh, gw)
    pix = np.repeat(np.repeat(mask, ps, axis=0), ps, axis=1)
    out = image.copy()
    out[pix] = 0.0
    return out, mask


# ----------------------------------------------------------------- features


def extract_features(image, levels: int = 3):
    """Grayscale average pyramid (full, 1/2, 1/4 ...), flattened and concatenated.

    Accepts (H, W, 3) or (N, H, W, 3); a Tensor input keeps the graph.
    """
    if isinstance(image, Tensor):
        x = image if image.ndim == 4 else dc.reshape(image, (1,) + image.shape)
        g = dc.matmul(x, GRAY.reshape(3, 1))  # (N, H, W, 1)
        feats = []
        for lvl in range(levels):
            feats.append(dc.reshape(g, (g.shape[0], -1)))
            if lvl + 1 < levels:
                g = dc.avg_pool(g, 2)
        out = dc.concat(feats, axis=1)
        return out if image.ndim == 4 else dc.reshape(out, (-1,))
    img = np.asarray(image, dtype=float)
    x = img if img.ndim == 4 else img[None]
    g = x @ GRAY
    feats = []
    for lvl in range(levels):
        feats.append(g.reshape(g.shape[0], -1))
        if lvl + 1 < levels:
            n, h, w = g.shape
            g = g.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    out = np.concatenate(feats, axis=1)
    return out if img.ndim == 4 else out[0]


class RandomConvFeatures:
    """Fixed random-weight conv extractor (alternative to the pyramid)."""

    def __init__(self, seed: int = 0, channels: int = 8):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0, 1 / np.sqrt(27), size=(3, 3, 3, channels))
        self.w2 = rng.normal(0, 1 / np.sqrt(9 * channels), size=(3, 3, channels, channels))

    def __call__(self, image):
        as_t = isinstance(image, Tensor)
        x = dc.as_tensor(image)
        if x.ndim == 3:
            x = dc.reshape(x, (1,) + x.shape)
        h = dc.relu(dc.conv2d(x, self.w1, 2))
        h = dc.relu(dc.conv2d(h, self.w2, 2))
        out = dc.reshape(h, (h.shape[0], -1))
        if np.ndim(image) == 3 or (as_t and image.ndim == 3):
            out = dc.reshape(out, (-1,))
        return out if as_t else out.data


def get_feature_extractor(name: str):
    if name == "pyramid":
        return extract_features
    if name == "random_conv":
        return RandomConvFeatures()
    raise ValueError(f"unknown feature extractor {name!r} (expected 'pyramid' or 'random_conv')")
