"""Synthetic desk-scale corpus.

Each object class is defined by a few recurring part templates (small
colored patterns) pasted at random positions on a cluttered background.
Ground-truth part boxes are kept so that cluster purity can be measured,
and tag files with controlled overlap can be written for tag-coherence
experiments.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from scipy import ndimage

PART = 16
IMAGE_SIZE = 64

CLASS_PARTS = {
    "background": (),
    "alpha": ("cross", "ring"),
    "beta": ("checker", "triangle"),
    "gamma": ("stripes", "dots"),
}
LABELS = list(CLASS_PARTS)


def _template(name: str) -> tuple[np.ndarray, np.ndarray]:
    """RGB pattern and alpha for a part template."""
    n = PART
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    c = n / 2
    rgb = np.zeros((n, n, 3))
    if name == "cross":
        alpha = (np.abs(yy - c) < 3) | (np.abs(xx - c) < 3)
        rgb[:] = (0.9, 0.1, 0.1)
    elif name == "ring":
        r = np.hypot(yy - c, xx - c)
        alpha = (r < 7.5) & (r > 4)
        rgb[:] = (0.1, 0.75, 0.15)
    elif name == "checker":
        alpha = np.ones((n, n), bool)
        cell = ((yy // 4).astype(int) + (xx // 4).astype(int)) % 2 == 0
        rgb[cell] = (0.1, 0.2, 0.9)
        rgb[~cell] = (0.95, 0.95, 0.95)
    elif name == "triangle":
        alpha = (yy > 2) & (np.abs(xx - c) < (yy - 2) * 0.55)
        rgb[:] = (0.95, 0.85, 0.1)
    elif name == "stripes":
        alpha = np.ones((n, n), bool)
        band = ((yy + xx) // 3).astype(int) % 2 == 0
        rgb[band] = (0.85, 0.1, 0.8)
        rgb[~band] = (0.2, 0.05, 0.2)
    elif name == "dots":
        alpha = np.ones((n, n), bool)
        dot = (np.hypot((yy % 5) - 2.5, (xx % 5) - 2.5) < 1.5)
        rgb[dot] = (0.1, 0.85, 0.9)
        rgb[~dot] = (0.05, 0.25, 0.3)
    else:
        raise KeyError(name)
    return rgb, alpha.astype(np.float64)


TEMPLATES = [p for parts in CLASS_PARTS.values() for p in parts]


@dataclass
class DeskImage:
    image: np.ndarray
    label: str
    parts: list  # [(template, (x0, y0, x1, y1))]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.45, 0.6)
    low = ndimage.gaussian_filter(rng.normal(size=(size, size, 3)), sigma=(6, 6, 0))
    low = low / (np.abs(low).max() + 1e-12) * 0.08
    img = base + low + rng.normal(scale=0.02, size=(size, size, 3))
    for _ in range(rng.integers(0, 3)):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(4, 10, 2)
        yy, xx = np.mgrid[0:size, 0:size]
        blob = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
        color = rng.uniform(0.05, 0.95, 3)
        img = img * (1 - 0.8 * blob[..., None]) + 0.8 * blob[..., None] * color
    return img


def _place(rng, size, n, occupied):
    for _ in range(200):
        y, x = rng.integers(1, size - PART - 1, 2)
        box = (int(x), int(y), int(x) + PART, int(y) + PART)
        if all(box[2] + 2 <= o[0] or o[2] + 2 <= box[0] or box[3] + 2 <= o[1] or o[3] + 2 <= box[1] for o in occupied):
            return box
    raise RuntimeError("could not place part")


def render_scene(rng: np.random.Generator, label: str, parts=None, size: int = IMAGE_SIZE) -> DeskImage:
    """One image of ``label`` containing ``parts`` (default: all class parts)."""
    if parts is None:
        parts = CLASS_PARTS[label]
    img = _background(rng, size)
    placed = []
    occupied = []
    for name in parts:
        box = _place(rng, size, len(parts), occupied)
        occupied.append(box)
        rgb, alpha = _template(name)
        rgb = np.clip(rgb + rng.normal(scale=0.03, size=3), 0, 1)
        x0, y0, x1, y1 = box
        a = alpha[..., None]
        img[y0:y1, x0:x1] = img[y0:y1, x0:x1] * (1 - a) + rgb * a
        ys, xs = np.nonzero(alpha)
        placed.append((name, (x0 + int(xs.min()), y0 + int(ys.min()), x0 + int(xs.max()) + 1, y0 + int(ys.max()) + 1)))
    return DeskImage(np.clip(img, 0, 1), label, placed)


def training_set(seed: int, per_class: int):
    """Images for fitting the reference classifier.

    Object classes mix full scenes with single-part scenes so that every
    part is sufficient evidence on its own.
    """
    rng = np.random.default_rng(seed)
    out = []
    for label, parts in CLASS_PARTS.items():
        for i in range(per_class):
            if not parts or i % 2 == 0:
                chosen = parts
            else:
                chosen = (parts[(i // 2) % len(parts)],)
            out.append(render_scene(rng, label, chosen))
    return out


def part_corpus(seed: int, per_class: int, classes=("alpha", "beta")) -> dict[str, list[DeskImage]]:
    """Full scenes (every class part present) for the explained classes."""
    rng = np.random.default_rng(seed)
    return {c: [render_scene(rng, c) for _ in range(per_class)] for c in classes}


def write_corpus(root, corpus: dict[str, list[DeskImage]]) -> Path:
    """Write ``<root>/<class>/<id>.png`` and a ground-truth JSON."""
    root = Path(root)
    truth = {}
    for label, items in corpus.items():
        (root / label).mkdir(parents=True, exist_ok=True)
        for i, item in enumerate(items):
            image_id = f"{label}_{i:03d}"
            Image.fromarray(np.round(item.image * 255).astype(np.uint8)).save(root / label / f"{image_id}.png")
            truth[f"{label}/{image_id}"] = {"label": label, "parts": [[n, list(b)] for n, b in item.parts]}
    with open(root / "ground_truth.json", "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
    return root


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_run_directory(out, per_class: int = 30, eval_per_class: int = 20, classes=("alpha", "beta"), seed: int = 0) -> Path:
    """Part corpus under ``images/``, a held-out split of every label under
    ``eval/`` and a ``config.yaml`` wiring them together."""
    out = Path(out)
    for c in classes:
        if not CLASS_PARTS.get(c):
            raise KeyError(f"unknown part class {c!r}")
    write_corpus(out / "images", part_corpus(seed, per_class, classes))
    rng = np.random.default_rng([seed, 1])
    held_out = {lab: [render_scene(rng, lab) for _ in range(eval_per_class)] for lab in LABELS}
    write_corpus(out / "eval", held_out)
    cfg = {"images": "images", "classes": list(classes), "cache": "cache", "seed": seed, "boost": {"eval_dir": "eval"}}
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)
    return out / "config.yaml"


def part_origin(box, parts, cover: float = 0.5) -> str:
    """Template whose ground-truth box covers the largest share (at least
    ``cover``) of ``box``; ``"none"`` otherwise."""
    x0, y0, x1, y1 = box
    area = (x1 - x0) * (y1 - y0)
    best, share = "none", 0.0
    for name, (a0, b0, a1, b1) in parts:
        ix = max(0, min(x1, a1) - max(x0, a0))
        iy = max(0, min(y1, b1) - max(y0, b0))
        f = ix * iy / area if area else 0.0
        if f > share:
            best, share = name, f
    return best if share >= cover else "none"


def summary_purity(parts, truth: dict) -> tuple[str, float]:
    """Majority template of a summary's parts and the fraction of parts from it.

    ``parts`` holds ``(image_id, box)`` pairs; ``truth`` is the ground-truth
    mapping written by :func:`write_corpus`.  Parts matching no template
    count against purity.
    """
    origins = [part_origin(box, truth[image_id]["parts"]) for image_id, box in parts]
    names = sorted(set(origins) - {"none"})
    if not names:
        return "none", 0.0
    top = max(names, key=origins.count)
    return top, origins.count(top) / len(origins)


def write_tag_files(root, groups: dict, group_shared: int = 6, class_shared: int = 2, per_image: int = 8) -> Path:
    """Tag files ``<root>/<image id>.yaml`` with controlled overlap.

    ``groups`` maps image id (``class/stem``) to a group name.  Every image
    gets ``class_shared`` tags common to its class, enough group tags that
    two members of one group share ``group_shared`` tags, and unique tags
    up to ``per_image``.
    """
    if group_shared < class_shared or group_shared > per_image:
        raise ValueError("need class_shared <= group_shared <= per_image")
    root = Path(root)
    for image_id, group in sorted(groups.items()):
        cls = image_id.split("/")[0]
        tags = [f"{cls} common {k}" for k in range(class_shared)]
        tags += [f"{group} tag {k}" for k in range(group_shared - class_shared)]
        tags += [f"{image_id} own {k}" for k in range(per_image - group_shared)]
        path = root / f"{image_id}.yaml"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            yaml.safe_dump(tags, fh)
    return root
