"""Regions of crisp masks and the object proposals that become parts."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy import ndimage

from .proposals import box_iou, selective_search

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class Region:
    image_id: str
    bitmap: np.ndarray  # bool, cropped to ``box``
    box: tuple          # (x0, y0, x1, y1), exclusive ends
    area: int

    def full_bitmap(self, shape) -> np.ndarray:
        out = np.zeros(shape, bool)
        x0, y0, x1, y1 = self.box
        out[y0:y1, x0:x1] = self.bitmap
        return out

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "box": list(self.box), "area": int(self.area)}


@dataclass
class Proposal:
    image_id: str
    box: tuple
    objectness: float
    index: int
    region: int | None = None
    overlap: float | None = None

    @property
    def area(self) -> int:
        return (self.box[2] - self.box[0]) * (self.box[3] - self.box[1])

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "box": list(self.box),
            "objectness": float(self.objectness),
            "index": int(self.index),
            "region": self.region,
            "overlap": None if self.overlap is None else float(self.overlap),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Proposal":
        return cls(
            image_id=d["image_id"],
            box=tuple(d["box"]),
            objectness=d["objectness"],
            index=d["index"],
            region=d.get("region"),
            overlap=d.get("overlap"),
        )


def default_min_area(shape) -> int:
    """0.5% of the image area."""
    return max(1, int(round(0.005 * shape[0] * shape[1])))


def extract_regions(mask, min_area: int | None = None, image_id: str = "") -> list[Region]:
    """4-connected components of the opened mask, largest first."""
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask must be binary")
        mask = mask.astype(bool)
    if min_area is None:
        min_area = default_min_area(mask.shape)
    opened = ndimage.binary_opening(mask, structure=np.ones((3, 3), bool))
    labels, n = ndimage.label(opened, structure=FOUR_CONNECTED)
    regions = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        bitmap = labels[sl] == k
        area = int(bitmap.sum())
        if area < min_area:
            continue
        box = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
        regions.append(Region(image_id, bitmap, box, area))
    regions.sort(key=lambda r: (-r.area, r.box[1], r.box[0]))
    return regions


def regions_to_mask(regions: list[Region], shape) -> np.ndarray:
    out = np.zeros(shape, bool)
    for r in regions:
        out |= r.full_bitmap(shape)
    return out


ProposalGenerator = Callable[[np.ndarray, int], list]


def generate_proposals(image, max_count: int = 100, image_id: str = "", generator: ProposalGenerator | None = None) -> list[Proposal]:
    """Class-agnostic boxes for ``image``; ``generator`` returns ``[(box, score)]``."""
    generator = generator or (lambda im, n: selective_search(im, max_count=n))
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    out = []
    for i, (box, score) in enumerate(generator(image, max_count)[:max_count]):
        x0, y0, x1, y1 = (int(v) for v in box)
        x0, y0 = max(0, x0), max(0, y0)
        x1, y1 = min(W, x1), min(H, y1)
        out.append(Proposal(image_id, (x0, y0, x1, y1), float(score), i))
    return out


def _overlap(box, region: Region, mode: str) -> float:
    x0, y0, x1, y1 = box
    rx0, ry0, rx1, ry1 = region.box
    ix0, iy0, ix1, iy1 = max(x0, rx0), max(y0, ry0), min(x1, rx1), min(y1, ry1)
    inter = 0
    if ix1 > ix0 and iy1 > iy0:
        inter = int(region.bitmap[iy0 - ry0:iy1 - ry0, ix0 - rx0:ix1 - rx0].sum())
    box_area = (x1 - x0) * (y1 - y0)
    if mode == "proposal":
        return inter / box_area if box_area else 0.0
    if mode == "iou":
        union = box_area + region.area - inter
        return inter / union if union else 0.0
    raise ValueError(f"unknown overlap mode {mode!r}")


def prune_proposals(
    proposals: list[Proposal],
    regions: list[Region],
    min_overlap: float = 0.75,
    max_area_ratio: float = 2.0,
    overlap_mode: str = "proposal",
) -> list[Proposal]:
    """Keep proposals lying on salient regions, then drop near-duplicates.

    A proposal survives the first step when its overlap with some region
    exceeds ``min_overlap``; it is assigned to the region of largest
    overlap.  Then, in descending objectness order, a proposal is dropped if
    it intersects an already accepted one whose area is within a factor
    ``max_area_ratio`` of its own.
    """
    image_ids = {p.image_id for p in proposals} | {r.image_id for r in regions}
    if len(image_ids) > 1:
        raise ValueError(f"proposals and regions span several images: {sorted(image_ids)}")
    candidates = []
    for p in proposals:
        best, best_ov = None, -1.0
        for j, r in enumerate(regions):
            ov = _overlap(p.box, r, overlap_mode)
            if ov > best_ov:
                best, best_ov = j, ov
        if best is not None and best_ov > min_overlap:
            candidates.append(replace(p, region=best, overlap=best_ov))
    candidates.sort(key=lambda p: (-p.objectness, p.index))
    accepted: list[Proposal] = []
    for p in candidates:
        clash = False
        for q in accepted:
            if box_iou(p.box, q.box) > 0:
                big, small = max(p.area, q.area), min(p.area, q.area)
                if big / small < max_area_ratio:
                    clash = True
                    break
        if not clash:
            accepted.append(p)
    accepted.sort(key=lambda p: p.index)
    return accepted
