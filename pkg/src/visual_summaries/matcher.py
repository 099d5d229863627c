"""Proposal matching across images and the class-level similarity matrix.

``match_pair`` scores every proposal pair of two images by appearance
times local offset consistency.  ``assemble_corr`` gathers all pairwise
results of a class into one sparse symmetric matrix over every proposal,
and ``restrict_corr`` keeps the rows/columns of the saliency-pruned parts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import sparse

from .descriptors import hog_descriptors

Descriptor = Callable[[np.ndarray, list], tuple]


class CorrError(ValueError):
    pass


@dataclass
class MatchMatrix:
    image_i: str
    image_j: str
    values: np.ndarray  # M_i x M_j, in [0, 1]


def _canonical_order(boxes) -> np.ndarray:
    """Rank of every box in coordinate order (index-free tie-breaking)."""
    keys = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    order = np.lexsort(keys.T[::-1])
    rank = np.empty(len(keys), int)
    rank[order] = np.arange(len(keys))
    return rank


def _centers(boxes, shape) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    H, W = shape[:2]
    return np.stack([(b[:, 0] + b[:, 2]) / 2 / W, (b[:, 1] + b[:, 3]) / 2 / H], axis=1)


def appearance(desc_i, valid_i, desc_j, valid_j) -> np.ndarray:
    """Cosine similarity mapped to [0, 1]; degenerate rows/columns are 0."""
    A = np.clip((desc_i @ desc_j.T + 1.0) / 2.0, 0.0, 1.0)
    A[~valid_i, :] = 0.0
    A[:, ~valid_j] = 0.0
    return A


def local_offset_consistency(A, centers_i, centers_j, rank_i, rank_j, bandwidth=0.1, neighbours=10) -> np.ndarray:
    """Geometry factor: agreement of each candidate offset with the offsets
    of the neighbouring proposals' best appearance matches."""
    Mi, Mj = A.shape
    # best appearance match of every proposal in i, ties by box order
    by_rank = np.argsort(rank_j)
    best = by_rank[np.argmax(A[:, by_rank], axis=1)]
    has_match = A.max(axis=1) > 0
    best_offset = centers_j[best] - centers_i
    offsets = centers_j[None, :, :] - centers_i[:, None, :]  # Mi x Mj x 2
    dist = np.linalg.norm(centers_i[:, None, :] - centers_i[None, :, :], axis=2)
    G = np.ones((Mi, Mj))
    for k in range(Mi):
        others = [q for q in range(Mi) if q != k and has_match[q]]
        if not others:
            continue
        others.sort(key=lambda q: (dist[k, q], rank_i[q]))
        nb = others[:neighbours]
        diff = offsets[k][None, :, :] - best_offset[nb][:, None, :]  # K x Mj x 2
        G[k] = np.mean(np.exp(-np.sum(diff ** 2, axis=2) / (2 * bandwidth ** 2)), axis=0)
    return G


def match_pair(
    image_i: np.ndarray,
    boxes_i,
    image_j: np.ndarray,
    boxes_j,
    bandwidth: float = 0.1,
    neighbours: int = 10,
    descriptor: Descriptor = hog_descriptors,
    ids=("i", "j"),
    cache: dict | None = None,
) -> MatchMatrix:
    """Local-offset matching of two images' proposal boxes."""
    if len(boxes_i) == 0 or len(boxes_j) == 0:
        raise ValueError("match_pair needs at least one proposal per image")

    def describe(key, image, boxes):
        if cache is not None and key in cache:
            return cache[key]
        out = descriptor(image, list(boxes))
        if cache is not None:
            cache[key] = out
        return out

    di, vi = describe(ids[0], image_i, boxes_i)
    dj, vj = describe(ids[1], image_j, boxes_j)
    A = appearance(di, vi, dj, vj)
    G = local_offset_consistency(
        A,
        _centers(boxes_i, image_i.shape),
        _centers(boxes_j, image_j.shape),
        _canonical_order(boxes_i),
        _canonical_order(boxes_j),
        bandwidth,
        neighbours,
    )
    return MatchMatrix(ids[0], ids[1], A * G)


@dataclass
class CorrMatrix:
    """Sparse symmetric similarity over proposals; ``index[row] = (image_id, proposal_index)``."""

    matrix: sparse.csr_matrix
    index: list

    @property
    def size(self) -> int:
        return len(self.index)

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def triplets(self) -> list:
        coo = self.matrix.tocoo()
        trip = sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))
        return trip

    def dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full((self.size, self.size), fill, dtype=np.float64)
        for r, c, v in self.triplets():
            out[r, c] = v
        return out

    def is_symmetric(self) -> bool:
        diff = self.matrix - self.matrix.T
        return diff.nnz == 0 or np.max(np.abs(diff.data)) == 0

    def row_of(self) -> dict:
        return {tuple(k): i for i, k in enumerate(self.index)}

    def save(self, stem) -> None:
        """``<stem>.triplets.txt`` (row col value, sorted) and ``<stem>.index.json``."""
        stem = Path(stem)
        with open(str(stem) + ".triplets.txt", "w") as fh:
            fh.write(f"# rows={self.size} nnz={self.nnz}\n")
            for r, c, v in self.triplets():
                fh.write(f"{r} {c} {v!r}\n")
        with open(str(stem) + ".index.json", "w") as fh:
            json.dump([list(k) for k in self.index], fh)

    @classmethod
    def load(cls, stem) -> "CorrMatrix":
        stem = Path(stem)
        with open(str(stem) + ".index.json") as fh:
            index = [tuple(k) for k in json.load(fh)]
        rows, cols, vals = [], [], []
        with open(str(stem) + ".triplets.txt") as fh:
            for line in fh:
                if line.startswith("#") or not line.strip():
                    continue
                r, c, v = line.split()
                rows.append(int(r))
                cols.append(int(c))
                vals.append(float(v))
        n = len(index)
        m = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return cls(m, index)


def percentile_threshold(matrices, q: float = 90.0) -> float:
    """``q``-th percentile of all positive compatibilities."""
    vals = np.concatenate([m.values[m.values > 0].ravel() for m in matrices] or [np.zeros(0)])
    if vals.size == 0:
        return np.inf
    return float(np.percentile(vals, q))


def assemble_corr(matrices, proposal_index, tau) -> CorrMatrix:
    """Build Corr from per-pair matrices.

    ``proposal_index`` maps image id to the ordered list of proposal
    indices of that image; rows follow image order then proposal order.
    ``tau`` is a number or ``"percentile:<q>"``.  Both directions of a pair
    may be supplied; they are merged by elementwise max before thresholding.
    """
    matrices = list(matrices)
    if isinstance(tau, str):
        kind, _, q = tau.partition(":")
        if kind != "percentile":
            raise ValueError(f"bad threshold spec {tau!r}")
        tau = percentile_threshold(matrices, float(q))
    index = []
    offset = {}
    for image_id, props in proposal_index.items():
        offset[image_id] = len(index)
        for p in props:
            index.append((image_id, int(p)))
    if len(set(index)) != len(index):
        raise CorrError("index-map collision")
    pairs: dict = {}
    for m in matrices:
        if m.image_i == m.image_j:
            continue
        if m.image_i not in offset or m.image_j not in offset:
            raise CorrError(f"unknown image in pair ({m.image_i}, {m.image_j})")
        exp_shape = (len(proposal_index[m.image_i]), len(proposal_index[m.image_j]))
        if m.values.shape != exp_shape:
            raise CorrError(f"pair ({m.image_i}, {m.image_j}) has shape {m.values.shape}, expected {exp_shape}")
        forward = m.image_i < m.image_j
        key = (m.image_i, m.image_j) if forward else (m.image_j, m.image_i)
        seen = pairs.setdefault(key, {})
        if forward in seen:
            raise CorrError(f"pair {key} supplied twice in the same direction")
        seen[forward] = m.values if forward else m.values.T
    rows, cols, data = [], [], []
    for (a, b), seen in sorted(pairs.items()):
        vals = np.maximum.reduce(list(seen.values()))
        k, l = np.nonzero(vals >= tau)
        v = vals[k, l]
        r = offset[a] + k
        c = offset[b] + l
        rows += [r, c]
        cols += [c, r]
        data += [v, v]
    n = len(index)
    if rows:
        m = sparse.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    else:
        m = sparse.csr_matrix((n, n))
    m.sort_indices()
    return CorrMatrix(m, index)


def restrict_corr(corr: CorrMatrix, kept) -> CorrMatrix:
    """Principal submatrix on ``kept`` (iterable of (image_id, proposal_index)), in Corr row order."""
    row_of = corr.row_of()
    rows = []
    for key in kept:
        key = (key[0], int(key[1]))
        if key not in row_of:
            raise CorrError(f"unknown proposal {key}")
        rows.append(row_of[key])
    rows = sorted(set(rows))
    sub = corr.matrix[rows][:, rows].tocsr()
    sub.sort_indices()
    return CorrMatrix(sub, [corr.index[r] for r in rows])
