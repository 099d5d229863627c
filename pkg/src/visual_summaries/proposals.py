"""Class-agnostic object proposals by hierarchical grouping.

Graph-based over-segmentation followed by greedy merging of adjacent
regions by color, texture, size and fill similarity; every region created
along the way contributes its bounding box.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from skimage.segmentation import felzenszwalb

COLOR_BINS = 25
TEXTURE_BINS = 10
ORIENTATIONS = 8


def _color_hist(pixels: np.ndarray) -> np.ndarray:
    hist = np.concatenate(
        [np.histogram(pixels[:, c], bins=COLOR_BINS, range=(0.0, 1.0))[0] for c in range(pixels.shape[1])]
    ).astype(np.float64)
    return hist / max(hist.sum(), 1e-12)


def _texture_maps(image: np.ndarray) -> np.ndarray:
    """Oriented Gaussian derivatives, rescaled to [0, 1], shape H x W x C*ORIENTATIONS."""
    maps = []
    for c in range(image.shape[2]):
        gy = ndimage.gaussian_filter(image[:, :, c], 1.0, order=(1, 0))
        gx = ndimage.gaussian_filter(image[:, :, c], 1.0, order=(0, 1))
        for k in range(ORIENTATIONS):
            theta = np.pi * k / ORIENTATIONS
            maps.append(np.cos(theta) * gx + np.sin(theta) * gy)
    out = np.stack(maps, axis=2)
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _texture_hist(values: np.ndarray) -> np.ndarray:
    hist = np.concatenate(
        [np.histogram(values[:, c], bins=TEXTURE_BINS, range=(0.0, 1.0))[0] for c in range(values.shape[1])]
    ).astype(np.float64)
    return hist / max(hist.sum(), 1e-12)


class _Region:
    __slots__ = ("box", "size", "color", "texture", "level")

    def __init__(self, box, size, color, texture, level):
        self.box = box
        self.size = size
        self.color = color
        self.texture = texture
        self.level = level


def _union_box(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def _similarity(a: _Region, b: _Region, image_area: int) -> float:
    color = np.minimum(a.color, b.color).sum()
    texture = np.minimum(a.texture, b.texture).sum()
    size = 1.0 - (a.size + b.size) / image_area
    ub = _union_box(a.box, b.box)
    fill = 1.0 - ((ub[2] - ub[0]) * (ub[3] - ub[1]) - a.size - b.size) / image_area
    return float(color + texture + size + fill)


def hierarchical_grouping(image: np.ndarray, scale: float = 100.0, sigma: float = 0.8, min_size: int = 20):
    """Run one grouping pass; returns ``[(box, level)]`` for every region created."""
    H, W = image.shape[:2]
    labels = felzenszwalb(image, scale=scale, sigma=sigma, min_size=min_size, channel_axis=2)
    _, labels = np.unique(labels, return_inverse=True)
    labels = labels.reshape(H, W)
    n = int(labels.max()) + 1
    tex = _texture_maps(image)
    regions = {}
    flat = labels.ravel()
    pix = image.reshape(-1, image.shape[2])
    tpix = tex.reshape(-1, tex.shape[2])
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(n + 1))
    for r in range(n):
        idx = order[bounds[r]:bounds[r + 1]]
        ys, xs = np.divmod(idx, W)
        box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        regions[r] = _Region(box, len(idx), _color_hist(pix[idx]), _texture_hist(tpix[idx]), 0)

    neighbours = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        for u, v in zip(a[diff], b[diff]):
            neighbours.add((min(u, v), max(u, v)))
    sims = {pair: _similarity(regions[pair[0]], regions[pair[1]], H * W) for pair in neighbours}

    created = [(r.box, 0) for r in regions.values()]
    next_id = n
    while sims:
        # highest similarity, ties by smallest pair
        (i, j), _ = max(sims.items(), key=lambda kv: (kv[1], -kv[0][0], -kv[0][1]))
        a, b = regions[i], regions[j]
        size = a.size + b.size
        merged = _Region(
            _union_box(a.box, b.box),
            size,
            (a.color * a.size + b.color * b.size) / size,
            (a.texture * a.size + b.texture * b.size) / size,
            max(a.level, b.level) + 1,
        )
        regions[next_id] = merged
        touched = set()
        for pair in [p for p in sims if i in p or j in p]:
            del sims[pair]
            other = pair[1] if pair[0] in (i, j) else pair[0]
            if other not in (i, j):
                touched.add(other)
        for k in touched:
            sims[(k, next_id)] = _similarity(regions[k], merged, H * W)
        created.append((merged.box, merged.level))
        next_id += 1
    return created


def box_iou(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def contrast_score(image: np.ndarray, box) -> float:
    """1 - histogram intersection between the box and a surrounding ring."""
    H, W = image.shape[:2]
    x0, y0, x1, y1 = box
    mx = max(2, (x1 - x0) // 4)
    my = max(2, (y1 - y0) // 4)
    X0, Y0, X1, Y1 = max(0, x0 - mx), max(0, y0 - my), min(W, x1 + mx), min(H, y1 + my)
    ring = np.zeros((H, W), bool)
    ring[Y0:Y1, X0:X1] = True
    ring[y0:y1, x0:x1] = False
    if not ring.any():
        return 0.0
    inside = _color_hist(image[y0:y1, x0:x1].reshape(-1, image.shape[2]))
    outside = _color_hist(image[ring])
    return float(1.0 - np.minimum(inside, outside).sum())


def selective_search(
    image: np.ndarray,
    max_count: int = 100,
    scales=(50.0, 100.0, 200.0),
    min_side: int = 8,
    dedupe_iou: float = 0.95,
):
    """Boxes ``(x0, y0, x1, y1)`` (exclusive ends) with objectness scores, best first."""
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if np.ptp(image.reshape(-1, image.shape[2]), axis=0).max() == 0:
        return [((0, 0, W, H), 1.0)]
    min_size = max(4, (H * W) // 400)
    boxes = []
    seen = set()
    for scale in scales:
        for box, _level in hierarchical_grouping(image, scale=scale, min_size=min_size):
            if box in seen:
                continue
            seen.add(box)
            if box[2] - box[0] < min_side or box[3] - box[1] < min_side:
                continue
            boxes.append(box)
    if not boxes:
        return [((0, 0, W, H), 1.0)]
    scored = sorted(((contrast_score(image, b), b) for b in boxes), key=lambda t: (-t[0], t[1]))
    kept = []
    for score, box in scored:
        if all(box_iou(box, k) <= dedupe_iou for k, _ in kept):
            kept.append((box, score))
        if len(kept) >= max_count:
            break
    return kept
