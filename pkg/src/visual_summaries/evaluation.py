"""Classification-drop evaluation of masks and summary-count statistics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .maskopt import MaskOptParams, blur_bank_for, crisp_from_lattice, upsample
from .oracle import Oracle, check_image

log = logging.getLogger(__name__)


def drop_score(oracle: Oracle, image, mask, class_id: int, params: MaskOptParams | None = None) -> float | None:
    """Percent of the class score removed by blurring ``image`` under ``mask``.

    The perturbation is the one used during mask optimization.  Returns
    None (with a warning) when the original score is zero.
    """
    params = params or MaskOptParams()
    image = check_image(image)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != image.shape[:2]:
        mask = upsample(mask, image.shape[:2])
    original = float(oracle.classify(image)[class_id])
    if original == 0.0:
        log.warning("class score is zero, image excluded from drop")
        return None
    if not mask.any():
        return 0.0
    perturbed = float(oracle.classify(blur_bank_for(image, params).apply(np.clip(mask, 0, 1)))[class_id])
    return 100.0 * (original - perturbed) / original


def matched_area_threshold_baseline(smooth: np.ndarray, target_area: int, size: tuple | None = None) -> np.ndarray:
    """Binary mask of the ``target_area`` highest lattice entries (ties in scan order).

    With ``size`` the lattice mask is upsampled like any crisp mask.
    """
    smooth = np.asarray(smooth, dtype=np.float64)
    n = smooth.size
    if not 0 <= target_area <= n:
        raise ValueError(f"target_area {target_area} outside [0, {n}]")
    order = np.argsort(-smooth.ravel(), kind="stable")
    out = np.zeros(n, bool)
    out[order[:target_area]] = True
    out = out.reshape(smooth.shape)
    if size is not None and tuple(size) != smooth.shape:
        return crisp_from_lattice(out, size)
    return out


@dataclass
class DropReport:
    method: str
    drops: dict = field(default_factory=dict)  # image id -> percent

    @property
    def values(self) -> np.ndarray:
        return np.array([self.drops[k] for k in sorted(self.drops)])

    @property
    def mean(self) -> float:
        v = np.sort(self.values)
        return float(np.mean(v)) if v.size else float("nan")

    @property
    def variance(self) -> float:
        v = np.sort(self.values)
        return float(np.var(v)) if v.size else float("nan")

    def row(self) -> dict:
        return {"method": self.method, "n": len(self.drops), "mean_drop": self.mean, "variance": self.variance}


def evaluate_drop_table(oracle: Oracle, images: dict, masks: dict, params: MaskOptParams | None = None) -> list:
    """One DropReport per method.

    ``images`` maps image id to ``(image, class_id)``; ``masks`` maps method
    name to ``{image id: mask}``.  Images excluded by any method (zero
    class score or missing mask) are excluded for all methods.
    """
    per_method = {}
    for method in masks:
        per_method[method] = {}
        for image_id in sorted(images):
            if image_id not in masks[method]:
                continue
            image, class_id = images[image_id]
            d = drop_score(oracle, image, masks[method][image_id], class_id, params)
            if d is not None:
                per_method[method][image_id] = d
    common = set(images)
    for drops in per_method.values():
        common &= set(drops)
    return [DropReport(m, {k: v for k, v in drops.items() if k in common}) for m, drops in per_method.items()]


def write_drop_csv(path, reports: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "image_id", "drop"])
        for r in reports:
            for k in sorted(r.drops):
                w.writerow([r.method, k, repr(float(r.drops[k]))])
        for r in reports:
            w.writerow([r.method, "__mean__", repr(r.mean)])
            w.writerow([r.method, "__variance__", repr(r.variance)])


def format_drop_table(reports: list) -> str:
    lines = [f"{'method':<16} {'n':>4} {'%Drop':>10} {'(Var)':>10}"]
    for r in reports:
        lines.append(f"{r.method:<16} {len(r.drops):>4} {r.mean:>10.4f} {r.variance:>10.4f}")
    return "\n".join(lines)


# Published average number of summaries and top-1 accuracy (%) per architecture
ARCHITECTURE_SUMMARY_COUNTS = [
    ("AlexNet", [5.0], 57.1),
    ("VGG16", [5.5], 72.4),
    ("GoogleNet", [6.0], 74.5),
    ("Resnet50", [6.33], 76.2),
]


@dataclass
class SummaryStats:
    rows: list               # [(model, mean summary count, accuracy)]
    spearman: float
    degenerate: bool = False


def summary_stats(entries) -> SummaryStats:
    """Mean summary count per model paired with accuracy, plus Spearman's rho.

    ``entries`` is an iterable of ``(model, per-class counts, accuracy)``.
    With fewer than two models or tied-out ranks the correlation is
    reported as 0 and flagged degenerate.
    """
    rows = [(str(m), float(np.mean(counts)), float(acc)) for m, counts, acc in entries]
    if len(rows) < 2:
        return SummaryStats(rows, 0.0, True)
    counts = [r[1] for r in rows]
    accs = [r[2] for r in rows]
    if len(set(counts)) < 2 or len(set(accs)) < 2:
        return SummaryStats(rows, 0.0, True)
    rho = float(stats.spearmanr(counts, accs).statistic)
    if not np.isfinite(rho):
        return SummaryStats(rows, 0.0, True)
    return SummaryStats(rows, rho, False)


def write_stats_csv(path, result: SummaryStats) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mean_summaries", "accuracy"])
        for r in result.rows:
            w.writerow([r[0], repr(r[1]), repr(r[2])])
        w.writerow(["__spearman__", repr(result.spearman), "degenerate" if result.degenerate else ""])
