"""Affinity propagation over the part similarity matrix and SSIM-based
rejection of inconsistent clusters."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal, sparse
from scipy.sparse.csgraph import connected_components
from skimage.color import rgb2gray
from skimage.transform import resize

log = logging.getLogger(__name__)


@dataclass
class ClusterResult:
    exemplars: list            # exemplar point per cluster
    members: list              # sorted member points per cluster
    converged: bool = True
    iterations: int = 0
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    @property
    def n_clusters(self) -> int:
        return len(self.exemplars)


def net_similarity(S: np.ndarray, exemplars) -> float:
    """Sum of preferences of ``exemplars`` plus every other point's best similarity to one of them."""
    E = sorted(set(int(e) for e in exemplars))
    if not E:
        return -np.inf
    n = S.shape[0]
    others = [i for i in range(n) if i not in set(E)]
    total = float(np.sum(S[E, E]))
    if others:
        total += float(np.sum(np.max(S[np.ix_(others, E)], axis=1)))
    return total


def _dense_similarity(similarity, preference) -> np.ndarray:
    """Dense matrix with absent sparse entries as -inf and preferences on the diagonal."""
    if sparse.issparse(similarity):
        M = similarity.tocoo()
        S = np.full(M.shape, -np.inf)
        S[M.row, M.col] = M.data
    else:
        S = np.array(similarity, dtype=np.float64)
    n = S.shape[0]
    pref = np.broadcast_to(np.asarray(preference, dtype=np.float64), (n,))
    if not np.all(np.isfinite(pref)):
        raise ValueError("preference must be finite")
    S[np.arange(n), np.arange(n)] = pref
    return S


def _assign(S: np.ndarray, E: np.ndarray) -> np.ndarray:
    labels = E[np.argmax(S[:, E], axis=1)]
    labels[E] = E
    return labels


def _refine(S: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Move each exemplar to the member maximizing within-cluster similarity, then reassign."""
    E = np.unique(labels)
    new = []
    for e in E:
        members = np.flatnonzero(labels == e)
        scores = np.sum(S[np.ix_(members, members)], axis=0)
        new.append(members[int(np.argmax(scores))])
    E = np.array(sorted(new))
    return _assign(S, E)


def _ap_component(S: np.ndarray, damping: float, max_iter: int, stable_window: int):
    n = S.shape[0]
    off = S[~np.eye(n, dtype=bool)]
    finite_off = off[np.isfinite(off)]
    if finite_off.size and np.all(finite_off == finite_off[0]) and np.all(np.diag(S) == S[0, 0]) and finite_off.size == off.size:
        # fully degenerate: all similarities and preferences equal
        if S[0, 0] >= finite_off[0]:
            return np.arange(n), True, 0
        return np.zeros(n, int), True, 0

    # tiny deterministic jitter breaks exact ties that make messages oscillate
    rng = np.random.default_rng(0)
    finite = np.isfinite(S)
    jitter = (np.finfo(float).eps * np.abs(S) + 100 * np.finfo(float).tiny) * rng.standard_normal((n, n))
    S_work = np.where(finite, S + np.where(finite, jitter, 0.0), S)
    R = np.zeros((n, n))
    A = np.zeros((n, n))
    rows = np.arange(n)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        AS = A + S_work
        idx = np.argmax(AS, axis=1)
        first = AS[rows, idx]
        AS[rows, idx] = -np.inf
        second = np.max(AS, axis=1)
        Rn = S_work - first[:, None]
        Rn[rows, idx] = S_work[rows, idx] - second
        R = damping * R + (1 - damping) * Rn

        Rp = np.maximum(R, 0)
        Rp[rows, rows] = R[rows, rows]
        An = np.sum(Rp, axis=0)[None, :] - Rp
        dA = An[rows, rows].copy()
        An = np.minimum(An, 0)
        An[rows, rows] = dA
        A = damping * A + (1 - damping) * An

        E = (R[rows, rows] + A[rows, rows]) > 0
        history.append(E)
        if len(history) > stable_window:
            history.pop(0)
            if E.any() and all(np.array_equal(E, h) for h in history):
                converged = True
                break
    E = np.flatnonzero((R[rows, rows] + A[rows, rows]) > 0)
    if E.size == 0:
        E = np.array([int(np.argmax(R[rows, rows] + A[rows, rows]))])
    labels = _refine(S, _assign(S, E))
    return labels, converged, it


def exhaustive_exemplars(S: np.ndarray):
    """Best exemplar set by enumerating all non-empty subsets.

    Returns ``(net_similarity, exemplars)``; among equal optima the
    smallest set, then the lexicographically first, wins.
    """
    n = S.shape[0]
    best, best_set = -np.inf, None
    for r in range(1, n + 1):
        for E in itertools.combinations(range(n), r):
            v = net_similarity(S, E)
            if v > best:
                best, best_set = v, E
    return best, best_set


def affinity_propagation(
    similarity,
    preference=None,
    damping: float = 0.9,
    max_iter: int = 1000,
    stable_window: int = 50,
    exact_limit: int = 12,
) -> ClusterResult:
    """Exemplar clustering by responsibility/availability message passing.

    ``similarity`` is dense (with ``-inf`` for forbidden pairs) or scipy
    sparse, in which case absent entries are forbidden.  ``preference``
    defaults to the median of the finite off-diagonal similarities.
    Connected components of the finite-similarity graph are clustered
    independently.  For components of at most ``exact_limit`` points the
    message-passing result is checked against exhaustive exemplar search
    and replaced when the latter is strictly better.
    """
    if not 0.5 <= damping < 1:
        raise ValueError("damping must lie in [0.5, 1)")
    n = similarity.shape[0]
    if n == 0:
        return ClusterResult([], [], True, 0, np.zeros(0, int))
    if preference is None:
        S0 = _dense_similarity(similarity, 0.0)
        off = S0[~np.eye(n, dtype=bool)]
        off = off[np.isfinite(off)]
        preference = float(np.median(off)) if off.size else 0.0
    S = _dense_similarity(similarity, preference)
    if not np.allclose(np.where(np.isfinite(S), S, 0), np.where(np.isfinite(S.T), S.T, 0)) or not np.array_equal(
        np.isfinite(S), np.isfinite(S.T)
    ):
        raise ValueError("similarity must be symmetric")
    graph = np.isfinite(S) & ~np.eye(n, dtype=bool)
    n_comp, comp = connected_components(graph, directed=False)
    labels = np.empty(n, int)
    converged = True
    iterations = 0
    for c in range(n_comp):
        idx = np.flatnonzero(comp == c)
        if idx.size == 1:
            labels[idx] = idx
            continue
        sub = S[np.ix_(idx, idx)]
        lab, conv, it = _ap_component(sub, damping, max_iter, stable_window)
        if idx.size <= exact_limit:
            best, E = exhaustive_exemplars(sub)
            if best > net_similarity(sub, np.unique(lab)) + 1e-12:
                lab = _assign(sub, np.array(E))
        labels[idx] = idx[lab]
        converged &= conv
        iterations = max(iterations, it)
    exemplars = sorted(np.unique(labels).tolist())
    members = [np.flatnonzero(labels == e).tolist() for e in exemplars]
    if not converged:
        log.warning("affinity propagation did not converge in %d iterations", max_iter)
    return ClusterResult(exemplars, members, converged, iterations, labels)


# -- SSIM ------------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float | None = None, window: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity of two equally sized grayscale images.

    Local statistics use a ``window x window`` Gaussian (``sigma``) over
    positions where the window fits entirely inside the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"need 2-D images of at least {window}x{window}")
    if data_range is None:
        data_range = 1.0 if max(a.max(), b.max()) <= 1.0 and min(a.min(), b.min()) >= 0 else 255.0
    w = _gaussian_window(window, sigma)

    def filt(x):
        return signal.correlate2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def part_patch(image: np.ndarray, box, size: int = 64) -> np.ndarray:
    """Grayscale ``size x size`` patch of a part box."""
    x0, y0, x1, y1 = box
    crop = np.asarray(image, dtype=np.float64)[y0:y1, x0:x1]
    if crop.ndim == 3:
        crop = rgb2gray(crop) if crop.shape[2] == 3 else crop[:, :, 0]
    return resize(crop, (size, size), order=1, mode="edge", anti_aliasing=False)


@dataclass
class ClusterVerdict:
    exemplar: int
    members: list
    pair_ssim: list
    median: float
    kept: bool


def prune_clusters(clusters: ClusterResult, patches, ratio: float = 0.9, mode: str = "ratio", pair_fn=None):
    """Drop singletons, then clusters whose median pairwise SSIM is below
    ``ratio`` times the median over all intra-cluster pairs of the class.

    ``mode="percentile"`` instead uses the ``100 * (1 - ratio)``-th
    percentile of the class-wide pairwise values as the bar.  ``pair_fn``
    replaces SSIM as the pairwise score.  Returns ``(verdicts, global_median)``.
    """
    pair_fn = pair_fn or ssim
    verdicts = []
    for e, mem in zip(clusters.exemplars, clusters.members):
        if len(mem) < 2:
            continue
        vals = [pair_fn(patches[a], patches[b]) for a, b in itertools.combinations(mem, 2)]
        verdicts.append(ClusterVerdict(e, list(mem), vals, float(np.median(vals)), False))
    all_vals = [v for vd in verdicts for v in vd.pair_ssim]
    if not all_vals:
        return [], float("nan")
    global_median = float(np.median(all_vals))
    if mode == "ratio":
        bar = ratio * global_median
    elif mode == "percentile":
        bar = float(np.percentile(all_vals, 100 * (1 - ratio)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    for vd in verdicts:
        vd.kept = vd.median >= bar
    return verdicts, global_median
