"""Visual summaries: rendering of validated part clusters and tag coherence."""
from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

log = logging.getLogger(__name__)

CELL = 128
MARGIN = 0.1
RED_ALPHA = 0.4
MAX_TAGS = 8


@dataclass
class SummaryPart:
    image_id: str
    box: tuple      # part box (x0, y0, x1, y1)
    region: tuple   # bounding box of the parent region

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "box": list(self.box), "region": list(self.region)}


@dataclass
class Summary:
    """A validated cluster of parts; ``parts[0]`` is the exemplar."""

    class_name: str
    index: int
    parts: list
    grid_path: str | None = None

    def __post_init__(self):
        if len(self.parts) < 2:
            raise ValueError("a summary needs at least two parts")
        for p in self.parts:
            b, r = p.box, p.region
            if not (b[0] < b[2] and b[1] < b[3] and r[0] < r[2] and r[1] < r[3]):
                raise ValueError(f"degenerate box in part {p}")

    @property
    def size(self) -> int:
        return len(self.parts)

    @property
    def exemplar(self) -> SummaryPart:
        return self.parts[0]

    @property
    def image_ids(self) -> list:
        return sorted({p.image_id for p in self.parts})

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "index": self.index,
            "size": self.size,
            "exemplar": self.exemplar.to_dict(),
            "parts": [p.to_dict() for p in self.parts],
            "grid": self.grid_path,
        }


def _as_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def crop_window(part: SummaryPart, shape, margin: float = MARGIN) -> tuple:
    """Region box grown by ``margin`` of its size per side, clipped to the image."""
    H, W = shape[:2]
    x0, y0, x1, y1 = part.region
    mx = int(round(margin * (x1 - x0)))
    my = int(round(margin * (y1 - y0)))
    return max(0, x0 - mx), max(0, y0 - my), min(W, x1 + mx), min(H, y1 + my)


def render_cell(image: np.ndarray, part: SummaryPart, cell: int = CELL, margin: float = MARGIN, alpha: float = RED_ALPHA):
    """One letterboxed cell and the cell-space rectangle that was tinted."""
    image = _as_uint8(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    cx0, cy0, cx1, cy1 = crop_window(part, image.shape, margin)
    crop = image[cy0:cy1, cx0:cx1, :3]
    h, w = crop.shape[:2]
    scale = cell / max(h, w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    resized = np.asarray(Image.fromarray(crop).resize((nw, nh), Image.BILINEAR), dtype=np.float64)
    oy, ox = (cell - nh) // 2, (cell - nw) // 2
    out = np.zeros((cell, cell, 3))
    out[oy:oy + nh, ox:ox + nw] = resized
    bx0, by0, bx1, by1 = part.box
    rx0 = ox + int(round((max(bx0, cx0) - cx0) * nw / w))
    rx1 = ox + int(round((min(bx1, cx1) - cx0) * nw / w))
    ry0 = oy + int(round((max(by0, cy0) - cy0) * nh / h))
    ry1 = oy + int(round((min(by1, cy1) - cy0) * nh / h))
    red = np.array([255.0, 0.0, 0.0])
    out[ry0:ry1, rx0:rx1] = (1 - alpha) * out[ry0:ry1, rx0:rx1] + alpha * red
    return np.round(out).astype(np.uint8), (rx0, ry0, rx1, ry1)


def grid_shape(n: int) -> tuple:
    cols = math.ceil(math.sqrt(n))
    return math.ceil(n / cols), cols


def render_summary(summary: Summary, images, cell: int = CELL, margin: float = MARGIN, alpha: float = RED_ALPHA) -> np.ndarray:
    """Row-major grid of part cells, exemplar first.

    ``images`` maps image id to an array or to an image file path.
    """
    rows, cols = grid_shape(summary.size)
    canvas = np.zeros((rows * cell, cols * cell, 3), np.uint8)
    for k, part in enumerate(summary.parts):
        if part.image_id not in images:
            raise FileNotFoundError(f"no image for {part.image_id!r}")
        src = images[part.image_id]
        if isinstance(src, (str, Path)):
            if not Path(src).exists():
                raise FileNotFoundError(src)
            src = np.asarray(Image.open(src).convert("RGB"))
        tile, _ = render_cell(src, part, cell, margin, alpha)
        r, c = divmod(k, cols)
        canvas[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = tile
    return canvas


def save_png(path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG", optimize=False)


# -- tags ------------------------------------------------------------------

def normalize_tag(tag: str, synonyms: dict | None = None) -> str:
    t = " ".join(str(tag).strip().lower().split())
    if synonyms:
        t = synonyms.get(t, t)
    return t


def load_tags(path, synonyms: dict | None = None, cap: int = MAX_TAGS) -> set:
    """Tags of one image from a YAML/JSON file: a list or ``{"tags": [...]}``."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if isinstance(data, dict):
        data = data.get("tags", [])
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a list of tags")
    if len(data) > cap:
        log.warning("%s lists %d tags, keeping the first %d", path, len(data), cap)
        data = data[:cap]
    return {normalize_tag(t, synonyms) for t in data if str(t).strip()}


def load_synonyms(path) -> dict:
    """Mapping ``variant -> canonical`` from a YAML file of ``canonical: [variants]``."""
    with open(path) as fh:
        groups = yaml.safe_load(fh) or {}
    out = {}
    for canon, variants in groups.items():
        c = normalize_tag(canon)
        for v in variants or []:
            out[normalize_tag(v)] = c
    return out


@dataclass
class TagVector:
    image_id: str
    vocabulary: tuple
    vector: np.ndarray = field(repr=False)

    @property
    def tags(self) -> set:
        return {t for t, v in zip(self.vocabulary, self.vector) if v}


def tag_vectors(tags: dict) -> dict:
    """One-hot vectors over the shared (sorted) vocabulary of ``tags``."""
    vocab = tuple(sorted(set().union(*tags.values()))) if tags else ()
    pos = {t: i for i, t in enumerate(vocab)}
    out = {}
    for image_id, ts in tags.items():
        v = np.zeros(len(vocab), np.uint8)
        for t in ts:
            v[pos[t]] = 1
        out[image_id] = TagVector(image_id, vocab, v)
    return out


def jaccard_distance(a, b) -> float:
    a, b = set(a), set(b)
    union = a | b
    if not union:
        return 0.0
    return 1.0 - len(a & b) / len(union)


def mean_pairwise_distance(tag_sets: list) -> float:
    d = [jaccard_distance(tag_sets[i], tag_sets[j]) for i in range(len(tag_sets)) for j in range(i + 1, len(tag_sets))]
    return float(np.mean(sorted(d)))


def _subset_seed(seed: int, members) -> list:
    return [int(seed), zlib.crc32("\n".join(sorted(members)).encode())]


def jaccard_coherence(summary_members: list, tags: dict, seed: int = 0) -> tuple:
    """Mean intra-summary tag distance and the same on random image subsets.

    ``summary_members`` holds the image ids of each summary of one class and
    ``tags`` the tag set of every tagged class image.  The random subset
    paired with a summary has the same number of images and is drawn with
    a seed derived from ``seed`` and the summary's members, so the result
    does not depend on the order of summaries or images.  Returns
    ``(mu_s, mu_r)``; NaN when no summary has two tagged members.
    """
    pool = sorted(tags)
    mu_s, mu_r = [], []
    for members in summary_members:
        tagged = sorted({m for m in members if m in tags})
        if len(tagged) < 2:
            log.warning("summary with %d tagged members excluded from coherence", len(tagged))
            continue
        mu_s.append(mean_pairwise_distance([tags[m] for m in tagged]))
        rng = np.random.default_rng(_subset_seed(seed, tagged))
        pick = rng.choice(len(pool), size=min(len(tagged), len(pool)), replace=False)
        mu_r.append(mean_pairwise_distance([tags[pool[i]] for i in sorted(pick)]))
    if not mu_s:
        return float("nan"), float("nan")
    # sorted sums keep the means exactly independent of summary order
    return float(np.mean(sorted(mu_s))), float(np.mean(sorted(mu_r)))


def write_class_manifest(path, class_name: str, summaries: list, mu_s=None, mu_r=None) -> dict:
    data = {
        "class": class_name,
        "K": len(summaries),
        "summaries": [s.to_dict() for s in summaries],
        "mu_s": mu_s,
        "mu_r": mu_r,
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)
    return data
