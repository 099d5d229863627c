"""Box descriptors for part matching."""
from __future__ import annotations

import numpy as np
from skimage.transform import resize

PATCH = 64
CELL = 8
SIGNED_BINS = 18
TRUNCATION = 0.2


def crop_resize(image: np.ndarray, box, size: int = PATCH) -> np.ndarray:
    x0, y0, x1, y1 = box
    crop = image[y0:y1, x0:x1]
    return resize(crop, (size, size) + crop.shape[2:], order=1, mode="edge", anti_aliasing=False)


def hog31(patch: np.ndarray, cell: int = CELL) -> np.ndarray:
    """31-dimensional per-cell gradient features (18 signed, 9 unsigned, 4 energy).

    Follows the Felzenszwalb-style layout: the dominant color channel's
    gradient is hard-binned by signed orientation, each cell histogram is
    normalized by its four 2x2 block energies and truncated.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim == 2:
        patch = patch[:, :, None]
    gx = np.zeros_like(patch)
    gy = np.zeros_like(patch)
    gx[:, 1:-1] = patch[:, 2:] - patch[:, :-2]
    gy[1:-1, :] = patch[2:, :] - patch[:-2, :]
    mag_c = np.hypot(gx, gy)
    best = np.argmax(mag_c, axis=2)[..., None]
    gx = np.take_along_axis(gx, best, 2)[..., 0]
    gy = np.take_along_axis(gy, best, 2)[..., 0]
    mag = np.take_along_axis(mag_c, best, 2)[..., 0]
    angle = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((angle / (2 * np.pi) * SIGNED_BINS).astype(int), SIGNED_BINS - 1)
    ch, cw = patch.shape[0] // cell, patch.shape[1] // cell
    mag = mag[: ch * cell, : cw * cell]
    bins = bins[: ch * cell, : cw * cell]
    cy = np.arange(ch * cell) // cell
    cx = np.arange(cw * cell) // cell
    hist = np.zeros((ch, cw, SIGNED_BINS))
    np.add.at(hist, (cy[:, None], cx[None, :], bins), mag)
    unsigned = hist[..., :9] + hist[..., 9:]
    energy = np.sum(unsigned ** 2, axis=2)
    e = np.pad(energy, 1, mode="edge")
    block = e[:-1, :-1] + e[1:, :-1] + e[:-1, 1:] + e[1:, 1:]  # (ch+1, cw+1)
    norms = np.stack(
        [block[:-1, :-1], block[:-1, 1:], block[1:, :-1], block[1:, 1:]], axis=2
    )
    inv = 1.0 / np.sqrt(norms + 1e-8)
    signed_n = np.minimum(hist[..., None, :] * inv[..., :, None], TRUNCATION)
    unsigned_n = np.minimum(unsigned[..., None, :] * inv[..., :, None], TRUNCATION)
    feats = np.concatenate(
        [
            0.5 * signed_n.sum(axis=2),
            0.5 * unsigned_n.sum(axis=2),
            0.2357 * signed_n.sum(axis=3),
        ],
        axis=2,
    )
    return feats.ravel()


def normalize(vec: np.ndarray) -> np.ndarray | None:
    """Centered, unit-norm copy; None for a degenerate (constant) descriptor."""
    v = np.asarray(vec, dtype=np.float64) - np.mean(vec)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n < 1e-10:
        return None
    return v / n


def hog_descriptors(image: np.ndarray, boxes) -> tuple[np.ndarray, np.ndarray]:
    """Unit descriptors for ``boxes`` and a validity flag per box."""
    out = np.zeros((len(boxes), (PATCH // CELL) ** 2 * 31))
    valid = np.zeros(len(boxes), bool)
    for i, box in enumerate(boxes):
        if box[2] - box[0] < 2 or box[3] - box[1] < 2:
            continue
        v = normalize(hog31(crop_resize(image, box)))
        if v is not None:
            out[i] = v
            valid[i] = True
    return out, valid


def oracle_descriptors(oracle, layer: str):
    """Descriptor function using the classifier's features of each resized box."""
    def describe(image: np.ndarray, boxes):
        h, w = oracle.manifest.input_size
        out = np.zeros((len(boxes), oracle.feature_layers[layer]))
        valid = np.zeros(len(boxes), bool)
        for i, box in enumerate(boxes):
            crop = image[box[1]:box[3], box[0]:box[2]]
            patch = resize(crop, (h, w) + crop.shape[2:], order=1, mode="edge", anti_aliasing=False)
            v = normalize(oracle.features(patch, layer))
            if v is not None:
                out[i] = v
                valid[i] = True
        return out, valid
    return describe
