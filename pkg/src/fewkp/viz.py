"""PNG previews: keypoints over images and rendered edge maps."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from . import diffcore as dc
from .nets import detect
from .skeledge import render_skeleton
from .synthgen import to_uint8

PALETTE = [(255, 255, 255), (255, 80, 80), (80, 160, 255), (255, 220, 40), (60, 220, 90), (230, 90, 230)]


def overlay(image: np.ndarray, points: np.ndarray, edges, scale: int = 4, visible=None) -> Image.Image:
    """Upscaled image with the skeleton drawn from normalized points."""
    h, w = image.shape[:2]
    im = Image.fromarray(to_uint8(image), "RGB").resize((w * scale, h * scale), Image.NEAREST)
    dr = ImageDraw.Draw(im)
    px = [((x + 1) * w / 2 * scale, (y + 1) * h / 2 * scale) for x, y in points]
    for i, j in edges:
        dr.line([px[i], px[j]], fill=(255, 255, 255), width=1)
    for k, (x, y) in enumerate(px):
        hollow = visible is not None and not visible[k]
        c = PALETTE[k % len(PALETTE)]
        dr.ellipse([x - 3, y - 3, x + 3, y + 3], outline=c, fill=None if hollow else c)
    return im


def edge_image(edge_map: np.ndarray, scale: int = 4) -> Image.Image:
    m = np.asarray(edge_map, float)
    m = m / m.max() if m.max() > 0 else m
    g = to_uint8(m)
    h, w = g.shape
    return Image.fromarray(np.stack([g] * 3, -1), "RGB").resize((w * scale, h * scale), Image.NEAREST)


def grid(tiles: list[Image.Image], cols: int) -> Image.Image:
    tw, th = tiles[0].size
    rows = -(-len(tiles) // cols)
    out = Image.new("RGB", (tw * cols, th * rows))
    for n, t in enumerate(tiles):
        out.paste(t, ((n % cols) * tw, (n // cols) * th))
    return out


def render_preview(model, data, idx, path, uncertainty: bool = True) -> None:
    """Two rows per sample group: predicted skeleton over the image, then its edge map."""
    idx = np.asarray(idx)
    images = data.images(idx)
    h, w = images.shape[1:3]
    with dc.no_grad():
        d = detect(model.det, images)
        maps = render_skeleton(d.points, d.logits, data.skeleton.edges, model.edge, h, w, uncertainty).data
    tops = [overlay(images[i], d.points.data[i], data.skeleton.edges) for i in range(len(idx))]
    bottoms = [edge_image(maps[i]) for i in range(len(idx))]
    grid(tops + bottoms, len(idx)).save(path)


def render_annotations(data, i: int, path, points=None) -> None:
    """Ground truth (or given points) for sample i."""
    pts = data.points[i] if points is None else points
    overlay(data.image(i), pts, data.skeleton.edges, visible=data.visible[i]).save(path)
