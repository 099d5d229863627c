"""Per-summary linear classifiers and their fusion with the network softmax."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

C_GRID = (0.01, 0.1, 1.0, 10.0)
ALPHA_GRID = tuple(np.round(np.arange(0, 1.0001, 0.05), 2))


class SVMError(RuntimeError):
    pass


@dataclass
class LinearSVM:
    weight: np.ndarray
    bias: float
    iterations: int = 0
    converged: bool = True

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weight + self.bias


def fit_linear_svm(X, y, C=1.0, tol: float = 1e-6, max_passes: int = 20000, standardize: bool = True) -> LinearSVM:
    """L2-regularized hinge-loss SVM by dual coordinate descent.

    Minimizes ``0.5 |w|^2 + sum_i C_i max(0, 1 - y_i (w x_i + b))`` where
    the bias is learned as the weight of a constant feature.  ``C`` may be
    a scalar or per-sample weights.  Coordinates are visited in index
    order; training stops once the duality gap falls below ``tol`` times
    the primal objective (or every projected gradient is below ``tol``).
    With ``standardize`` the problem is solved on z-scored features and the
    solution mapped back to the original feature space.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if set(np.unique(y)) - {-1.0, 1.0}:
        raise SVMError("labels must be +1/-1")
    n, d = X.shape
    mu, sd = np.zeros(d), np.ones(d)
    if standardize:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
    Xa = np.hstack([(X - mu) / sd, np.ones((n, 1))])
    Cv = np.broadcast_to(np.asarray(C, dtype=np.float64), (n,)).copy()
    Qd = np.einsum("ij,ij->i", Xa, Xa)
    alpha = np.zeros(n)
    w = np.zeros(d + 1)
    converged = False
    passes = 0
    for passes in range(1, max_passes + 1):
        worst = 0.0
        for i in range(n):
            G = y[i] * (w @ Xa[i]) - 1.0
            if alpha[i] == 0.0:
                pg = min(G, 0.0)
            elif alpha[i] == Cv[i]:
                pg = max(G, 0.0)
            else:
                pg = G
            worst = max(worst, abs(pg))
            if pg != 0.0 and Qd[i] > 0:
                old = alpha[i]
                alpha[i] = min(max(old - G / Qd[i], 0.0), Cv[i])
                w += (alpha[i] - old) * y[i] * Xa[i]
        primal = 0.5 * w @ w + np.sum(Cv * np.maximum(0.0, 1.0 - y * (Xa @ w)))
        dual = alpha.sum() - 0.5 * w @ w
        if worst < tol or primal - dual <= tol * abs(primal):
            converged = True
            break
    if not converged:
        log.warning("svm did not reach tolerance %.1e in %d passes", tol, max_passes)
    weight = w[:-1] / sd
    bias = float(w[-1] - weight @ mu)
    return LinearSVM(weight, bias, passes, converged)


def balanced_weights(y) -> np.ndarray:
    """Inverse-frequency sample weights with mean 1."""
    y = np.asarray(y)
    out = np.empty(len(y))
    for v in np.unique(y):
        sel = y == v
        out[sel] = len(y) / (2.0 * sel.sum())
    return out


def _balanced_accuracy(y, pred) -> float:
    return float(np.mean([np.mean(pred[y == v] == v) for v in np.unique(y)]))


def cross_validate_c(X, y, grid=C_GRID, folds: int = 3, tol: float = 1e-6) -> tuple:
    """Regularization constant with best mean balanced accuracy over ``folds``
    stratified folds (ties go to the smaller constant)."""
    y = np.asarray(y)
    fold = np.empty(len(y), int)
    for v in (-1, 1):
        idx = np.flatnonzero(y == v)
        fold[idx] = np.arange(len(idx)) % folds
    best_c, best = grid[0], -1.0
    for c in grid:
        scores = []
        for f in range(folds):
            tr, te = fold != f, fold == f
            if len(np.unique(y[tr])) < 2 or not te.any():
                continue
            m = fit_linear_svm(X[tr], y[tr], c * balanced_weights(y[tr]), tol)
            scores.append(_balanced_accuracy(y[te], np.where(m.decision(X[te]) >= 0, 1, -1)))
        score = float(np.mean(scores)) if scores else 0.0
        if score > best + 1e-12:
            best_c, best = c, score
    return best_c, best


@dataclass
class SummaryClassifier:
    class_id: int
    summary_index: int
    weight: np.ndarray
    bias: float
    C: float
    cv_score: float
    n_positive: int = 0
    n_negative: int = 0

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weight + self.bias

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "summary_index": self.summary_index,
            "weight": [float(v) for v in self.weight],
            "bias": float(self.bias),
            "C": self.C,
            "cv_score": self.cv_score,
            "n_positive": self.n_positive,
            "n_negative": self.n_negative,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SummaryClassifier":
        d = dict(d)
        d["weight"] = np.asarray(d["weight"], dtype=np.float64)
        return cls(**d)


def _sample_negatives(rng, pools: list, cap: int) -> list:
    """Up to ``cap`` negatives spread evenly over the non-empty ``pools``."""
    pools = [sorted(p) for p in pools if p]
    total = sum(len(p) for p in pools)
    if total <= cap:
        return sorted(x for p in pools for x in p)
    out = []
    share = [int(cap * len(p) / total) for p in pools]
    for k in range(cap - sum(share)):
        share[k % len(pools)] += 1
    for p, s in zip(pools, share):
        pick = rng.choice(len(p), size=min(s, len(p)), replace=False)
        out += [p[i] for i in sorted(pick)]
    return sorted(out)


def train_summary_classifiers(
    summaries: list,
    features: dict,
    labels: dict,
    neg_cap: int = 20,
    grid=C_GRID,
    seed: int = 0,
    tol: float = 1e-6,
) -> list:
    """One classifier per summary.

    ``summaries`` holds ``(class_id, summary_index, member image ids)``;
    ``features`` maps every image id to its feature vector and ``labels``
    to its class id.  Negatives are images of other classes and images of
    other summaries of the same class, capped at ``neg_cap`` times the
    positives.
    """
    out = []
    for class_id, index, members in summaries:
        pos = sorted(set(members))
        if len(pos) < 2:
            log.warning("summary %s/%s has fewer than 2 images, skipped", class_id, index)
            continue
        pos_set = set(pos)
        other_class = [k for k in features if labels[k] != class_id]
        same_class = sorted(
            {m for c, i, mem in summaries if c == class_id and i != index for m in mem} - pos_set
        )
        rng = np.random.default_rng([seed, int(class_id), int(index)])
        neg = _sample_negatives(rng, [other_class, same_class], neg_cap * len(pos))
        if not neg:
            log.warning("summary %s/%s has no negatives, skipped", class_id, index)
            continue
        X = np.array([features[k] for k in pos + neg], dtype=np.float64)
        y = np.array([1] * len(pos) + [-1] * len(neg))
        if np.all(X == X[0]):
            log.warning("summary %s/%s has identical features, skipped", class_id, index)
            continue
        C, cv = cross_validate_c(X, y, grid, tol=tol)
        m = fit_linear_svm(X, y, C * balanced_weights(y), tol)
        out.append(SummaryClassifier(int(class_id), int(index), m.weight, m.bias, C, cv, len(pos), len(neg)))
    return out


def covered_classes(classifiers: list, num_classes: int) -> np.ndarray:
    mask = np.zeros(num_classes, bool)
    for c in classifiers:
        mask[c.class_id] = True
    return mask


def specialized_scores(feature, classifiers: list, num_classes: int) -> np.ndarray:
    """Per-class best summary decision, shifted by the minimum over covered
    classes and normalized to sum to 1 (uncovered classes get 0)."""
    if not classifiers:
        raise SVMError("no classifiers")
    best = np.full(num_classes, -np.inf)
    for c in classifiers:
        best[c.class_id] = max(best[c.class_id], float(c.decision(feature)))
    covered = np.isfinite(best)
    out = np.zeros(num_classes)
    vals = best[covered] - best[covered].min()
    total = vals.sum()
    out[covered] = vals / total if total > 0 else 1.0 / covered.sum()
    return out


def fuse(softmax, specialized, alpha: float, covered=None, mode: str = "covered") -> np.ndarray:
    """Convex combination of network and specialized scores.

    ``mode="covered"`` blends only the covered classes, leaves the others at
    their softmax value and renormalizes; ``mode="all"`` blends every class.
    """
    p = np.asarray(softmax, dtype=np.float64)
    s = np.asarray(specialized, dtype=np.float64)
    if p.shape != s.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {s.shape}")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 0:
        return p.copy()
    if mode == "all":
        return (1 - alpha) * p + alpha * s
    if mode != "covered":
        raise ValueError(f"unknown fusion mode {mode!r}")
    covered = np.ones(p.shape[-1], bool) if covered is None else np.asarray(covered, bool)
    out = p.copy()
    out[..., covered] = (1 - alpha) * p[..., covered] + alpha * s[..., covered]
    return out / out.sum(axis=-1, keepdims=True)


def accuracy(scores, labels) -> float:
    return float(np.mean(np.argmax(np.asarray(scores), axis=1) == np.asarray(labels)))


def select_alpha(softmax, specialized, labels, covered=None, grid=ALPHA_GRID, mode: str = "covered") -> tuple:
    """Grid search on a validation split; ties go to the smaller alpha.

    Returns ``(alpha, accuracy, [(alpha, accuracy)])``.  Since the grid
    starts at 0 the selected model is never worse than the network alone.
    """
    grid = sorted(float(a) for a in grid)
    if grid[0] != 0.0:
        grid = [0.0] + grid
    curve = [(a, accuracy(fuse(softmax, specialized, a, covered, mode), labels)) for a in grid]
    best = curve[0]
    for a, acc in curve[1:]:
        if acc > best[1]:
            best = (a, acc)
    return best[0], best[1], curve


def save_classifiers(path, classifiers: list, extra: dict | None = None) -> None:
    data = {"classifiers": [c.to_dict() for c in classifiers], **(extra or {})}
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, sort_keys=True)


def load_classifiers(path) -> list:
    with open(path) as fh:
        return [SummaryClassifier.from_dict(d) for d in json.load(fh)["classifiers"]]
