"""Crisp perturbation masks.

A mask ``m`` lives on a coarse lattice in ``[0, 1]``.  It is bilinearly
upsampled to the image and drives a spatially varying Gaussian blur whose
standard deviation at pixel ``u`` is ``sigma0 * m(u)``: high values delete
evidence.  The optimizer minimizes

    f_c(blur(x; m)) + area_weight * area(m) + tv_weight * tv(m)
                    + binarize_weight * sum |1 - m| m

over a table of phases, each phase overriding some of the weights.  By
default the three regularizers are averaged over the lattice rather than
summed, and ``sigma0`` is expressed at a 224-pixel reference resolution.  The
classifier gradient is pulled back through the blur analytically, so only
the :class:`~visual_summaries.oracle.Oracle` interface is needed.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .oracle import Oracle, check_image

log = logging.getLogger(__name__)


class MaskOptError(RuntimeError):
    pass


DEFAULT_PHASES = (
    (300, {}),
    (150, {"tv_weight": 1.0, "binarize_weight": 2.0}),
)


@dataclass(frozen=True)
class MaskOptParams:
    area_weight: float = 0.01
    tv_weight: float = 1e-4
    binarize_weight: float = 0.0
    beta: float = 3.0
    # maximum blur std in pixels, given at ``reference_size``; rescaled to
    # the shorter image side unless ``reference_size`` is None
    sigma0: float = 10.0
    reference_size: int | None = 224
    sigma_step: float = 0.5
    truncate: float = 3.0
    phases: tuple = DEFAULT_PHASES
    optimizer: str = "adam"
    step_size: float = 0.1
    momentum: float = 0.9
    # None: one lattice entry per image pixel
    mask_shape: tuple | None = None
    threshold: float = 0.5
    init_value: float = 0.5
    # "perturbed": penalize sum(m), the blurred area.  "preserved": the
    # literal sum(1 - m) orientation.
    area_mode: str = "perturbed"
    # "mean": weights multiply per-entry averages; "sum": raw lattice sums
    term_scale: str = "mean"
    score_space: str = "softmax"

    def __post_init__(self):
        for name in ("area_weight", "tv_weight", "binarize_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.beta < 1:
            raise ValueError("beta must be >= 1")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be > 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not self.phases:
            raise ValueError("at least one phase is required")
        for iters, overrides in self.phases:
            if int(iters) <= 0:
                raise ValueError("phase iteration counts must be > 0")
            for key in overrides:
                if key not in _OVERRIDABLE:
                    raise ValueError(f"phase override {key!r} is not a weight/exponent")
        if self.area_mode not in ("perturbed", "preserved"):
            raise ValueError(f"unknown area_mode {self.area_mode!r}")
        if self.term_scale not in ("sum", "mean"):
            raise ValueError(f"unknown term_scale {self.term_scale!r}")
        if self.optimizer not in ("momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def total_iterations(self) -> int:
        return sum(int(n) for n, _ in self.phases)

    def blur_scale(self, image_shape) -> float:
        if self.reference_size is None:
            return 1.0
        return min(image_shape[:2]) / float(self.reference_size)

    def lattice_shape(self, image_shape) -> tuple:
        return tuple(self.mask_shape) if self.mask_shape is not None else tuple(image_shape[:2])

    def for_phase(self, index: int) -> "MaskOptParams":
        return replace(self, **self.phases[index][1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phases"] = [[int(n), dict(o)] for n, o in self.phases]
        d["mask_shape"] = None if self.mask_shape is None else list(self.mask_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaskOptParams":
        d = dict(d)
        if "phases" in d:
            d["phases"] = tuple((int(n), dict(o)) for n, o in d["phases"])
        if d.get("mask_shape") is not None:
            d["mask_shape"] = tuple(d["mask_shape"])
        return cls(**d)

    @classmethod
    def smooth_baseline(cls, **kw) -> "MaskOptParams":
        """The unregularized-shape objective: area term only, no TV, no binarization."""
        base = cls(**kw)
        phases = tuple((n, {"tv_weight": 0.0, "binarize_weight": 0.0}) for n, _ in base.phases)
        return replace(base, tv_weight=0.0, binarize_weight=0.0, phases=phases)


_OVERRIDABLE = {"area_weight", "tv_weight", "binarize_weight", "beta", "step_size", "momentum"}


# -- lattice <-> image ------------------------------------------------------

def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D bilinear resampling matrix (half-pixel centers, edge clamped)."""
    U = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(U, 1.0)
        return U
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    rows = np.arange(n_out)
    np.add.at(U, (rows, i0), 1 - t)
    np.add.at(U, (rows, i1), t)
    return U


def upsample(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling of a lattice mask to ``size = (H, W)``."""
    mask = np.asarray(mask, dtype=np.float64)
    Uy = _interp_matrix(size[0], mask.shape[0])
    Ux = _interp_matrix(size[1], mask.shape[1])
    return Uy @ mask @ Ux.T


def crisp_from_lattice(binary_lattice: np.ndarray, size: tuple[int, int], threshold: float = 0.5) -> np.ndarray:
    """Image-resolution crisp mask from a binary lattice mask."""
    up = upsample(binary_lattice.astype(np.float64), size)
    return up >= threshold


# -- blur ------------------------------------------------------------------

class BlurBank:
    """Image blurred at evenly spaced sigmas ``0 .. sigma0``.

    Intermediate widths interpolate linearly between neighbouring levels,
    which keeps the perturbation differentiable in the mask.
    """

    def __init__(self, image, sigma0: float, step: float = 0.5, truncate: float = 3.0):
        image = check_image(image)
        self.sigma0 = float(sigma0)
        self.levels = max(1, int(np.ceil(self.sigma0 / step - 1e-9)))
        self.sigmas = np.linspace(0.0, self.sigma0, self.levels + 1)
        stack = [image]
        for s in self.sigmas[1:]:
            stack.append(gaussian_blur(image, s, truncate))
        self.stack = np.stack(stack)  # (levels+1, H, W, C)

    def _locate(self, m_img: np.ndarray):
        s = np.clip(m_img, 0.0, 1.0) * self.levels
        k = np.minimum(np.floor(s).astype(int), self.levels - 1)
        t = s - k
        return k, t

    def apply(self, m_img: np.ndarray) -> np.ndarray:
        k, t = self._locate(m_img)
        rows, cols = np.indices(m_img.shape)
        lo = self.stack[k, rows, cols]
        hi = self.stack[k + 1, rows, cols]
        return lo + t[..., None] * (hi - lo)

    def derivative(self, m_img: np.ndarray) -> np.ndarray:
        """d blur / d m at every pixel, shape ``H x W x C``."""
        k, _ = self._locate(m_img)
        rows, cols = np.indices(m_img.shape)
        return (self.stack[k + 1, rows, cols] - self.stack[k, rows, cols]) * self.levels


def gaussian_blur(image: np.ndarray, sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Isotropic blur, kernel truncated at ``truncate * sigma`` and renormalized, reflected borders."""
    if sigma <= 0:
        return np.array(image, dtype=np.float64, copy=True)
    return ndimage.gaussian_filter(
        np.asarray(image, dtype=np.float64), sigma=(sigma, sigma, 0), truncate=truncate, mode="reflect"
    )


def perturb(image, mask, sigma0: float = 10.0, step: float = 0.5, truncate: float = 3.0, bank: BlurBank | None = None):
    """Blur ``image`` with per-pixel width ``sigma0 * m(u)``."""
    image = check_image(image)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    m_img = upsample(np.clip(mask, 0, 1), image.shape[:2])
    if bank is None:
        bank = BlurBank(image, sigma0, step, truncate)
    return bank.apply(m_img)


def blur_bank_for(image, params: MaskOptParams) -> BlurBank:
    """Blur bank with the image-size-adjusted ``sigma0`` of ``params``."""
    image = check_image(image)
    k = params.blur_scale(image.shape)
    return BlurBank(image, params.sigma0 * k, params.sigma_step * k, params.truncate)


# -- objective -------------------------------------------------------------

def tv_term(mask: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Sum of ``|forward difference|**beta`` over both axes, and its gradient."""
    dy = mask[1:, :] - mask[:-1, :]
    dx = mask[:, 1:] - mask[:, :-1]
    value = float(np.sum(np.abs(dy) ** beta) + np.sum(np.abs(dx) ** beta))
    gy = beta * np.abs(dy) ** (beta - 1) * np.sign(dy)
    gx = beta * np.abs(dx) ** (beta - 1) * np.sign(dx)
    grad = np.zeros_like(mask)
    grad[1:, :] += gy
    grad[:-1, :] -= gy
    grad[:, 1:] += gx
    grad[:, :-1] -= gx
    return value, grad


def binarize_term(mask: np.ndarray) -> tuple[float, np.ndarray]:
    value = float(np.sum(np.abs(1 - mask) * mask))
    # on [0, 1] |1 - m| m = m - m^2
    return value, 1 - 2 * mask


def area_term(mask: np.ndarray, mode: str) -> tuple[float, np.ndarray]:
    if mode == "perturbed":
        return float(np.sum(np.abs(mask))), np.sign(mask) + (mask == 0)
    return float(np.sum(np.abs(1 - mask))), -(np.sign(1 - mask) + (mask == 1))


@dataclass
class ObjectiveTerms:
    total: float
    terms: dict
    gradient: np.ndarray


class _Problem:
    """Per-image state reused across optimizer iterations."""

    def __init__(self, oracle: Oracle, image, class_id: int, params: MaskOptParams):
        self.oracle = oracle
        self.image = check_image(image)
        self.class_id = class_id
        self.size = self.image.shape[:2]
        self.bank = blur_bank_for(self.image, params)
        self._ops = {}

    def ops(self, shape):
        if shape not in self._ops:
            self._ops[shape] = (
                _interp_matrix(self.size[0], shape[0]),
                _interp_matrix(self.size[1], shape[1]),
            )
        return self._ops[shape]

    def evaluate(self, mask: np.ndarray, params: MaskOptParams, with_gradient: bool = True) -> ObjectiveTerms:
        Uy, Ux = self.ops(mask.shape)
        m_img = Uy @ mask @ Ux.T
        phi = self.bank.apply(m_img)
        if params.score_space == "logit":
            score = float(self.oracle.logits(phi)[self.class_id])
        else:
            score = float(self.oracle.classify(phi)[self.class_id])
        area, g_area = area_term(mask, params.area_mode)
        tv, g_tv = tv_term(mask, params.beta)
        binz, g_bin = binarize_term(mask)
        scale = 1.0 / mask.size if params.term_scale == "mean" else 1.0
        total = score + scale * (
            params.area_weight * area
            + params.tv_weight * tv
            + params.binarize_weight * binz
        )
        terms = {"score": score, "area": area, "tv": tv, "binarize": binz}
        if not np.isfinite(total):
            raise MaskOptError(f"non-finite objective: {terms}")
        if not with_gradient:
            return ObjectiveTerms(total, terms, None)
        g_phi = self.oracle.class_score_gradient(phi, self.class_id, space=params.score_space)
        g_img = np.sum(g_phi * self.bank.derivative(m_img), axis=2)
        grad = Uy.T @ g_img @ Ux + scale * (
            params.area_weight * g_area
            + params.tv_weight * g_tv
            + params.binarize_weight * g_bin
        )
        if not np.all(np.isfinite(grad)):
            raise MaskOptError(f"non-finite gradient (terms {terms})")
        return ObjectiveTerms(total, terms, grad)


def objective_terms(oracle: Oracle, mask, image, class_id: int, params: MaskOptParams) -> ObjectiveTerms:
    """Objective value, its four terms and the gradient w.r.t. the lattice mask."""
    mask = np.asarray(mask, dtype=np.float64)
    return _Problem(oracle, image, class_id, params).evaluate(mask, params)


# -- optimization ----------------------------------------------------------

@dataclass
class MaskResult:
    crisp: np.ndarray          # bool, image resolution
    lattice: np.ndarray        # final continuous lattice mask
    binary_lattice: np.ndarray  # bool, lattice resolution
    trace: list = field(default_factory=list)
    original_score: float = float("nan")
    perturbed_score: float = float("nan")
    final_terms: dict = field(default_factory=dict)

    @property
    def drop(self) -> float:
        return 100.0 * (self.original_score - self.perturbed_score) / self.original_score

    def nonbinary_fraction(self, margin: float = 0.1) -> float:
        return float(np.mean(np.minimum(self.lattice, 1 - self.lattice) > margin))


def extract_mask(oracle: Oracle, image, class_id: int, params: MaskOptParams | None = None) -> MaskResult:
    """Run the phase schedule with projected gradient descent and binarize."""
    params = params or MaskOptParams()
    image = check_image(image)
    class_id = oracle._check_class(class_id)
    problem = _Problem(oracle, image, class_id, params)
    mask = np.full(params.lattice_shape(image.shape), float(params.init_value))
    velocity = np.zeros_like(mask)
    second = np.zeros_like(mask)
    trace = []
    it = 0
    for phase_idx in range(len(params.phases)):
        p = params.for_phase(phase_idx)
        for _ in range(int(params.phases[phase_idx][0])):
            obj = problem.evaluate(mask, p)
            trace.append({"iteration": it, "phase": phase_idx, "total": obj.total, **obj.terms})
            if p.optimizer == "adam":
                velocity = p.momentum * velocity + (1 - p.momentum) * obj.gradient
                second = 0.999 * second + 0.001 * obj.gradient ** 2
                vhat = velocity / (1 - p.momentum ** (it + 1))
                shat = second / (1 - 0.999 ** (it + 1))
                mask = mask - p.step_size * vhat / (np.sqrt(shat) + 1e-8)
            else:
                velocity = p.momentum * velocity - p.step_size * obj.gradient
                mask = mask + velocity
            np.clip(mask, 0.0, 1.0, out=mask)
            it += 1
    final = problem.evaluate(mask, params.for_phase(len(params.phases) - 1), with_gradient=False)
    binary = mask >= params.threshold
    crisp = crisp_from_lattice(binary, image.shape[:2])
    if crisp.all():
        # keep at least one untouched pixel
        up = upsample(mask, image.shape[:2])
        crisp.flat[int(np.argmin(up))] = False
    original = float(oracle.classify(image)[class_id])
    perturbed = float(oracle.classify(problem.bank.apply(crisp.astype(np.float64)))[class_id])
    return MaskResult(
        crisp=crisp,
        lattice=mask,
        binary_lattice=binary,
        trace=trace,
        original_score=original,
        perturbed_score=perturbed,
        final_terms=final.terms,
    )


# -- persistence -----------------------------------------------------------

def save_mask_png(path, crisp: np.ndarray) -> None:
    Image.fromarray((np.asarray(crisp, dtype=bool) * 255).astype(np.uint8), mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def write_trace_csv(path, trace: list) -> None:
    cols = ["iteration", "score", "area", "tv", "binarize"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in trace:
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in cols[1:]])


def save_mask_result(stem, result: MaskResult, params: MaskOptParams, class_id: int) -> dict:
    """Write ``<stem>.png``, ``<stem>.json`` sidecar and ``<stem>.trace.csv``."""
    stem = Path(stem)
    save_mask_png(stem.with_suffix(".png"), result.crisp)
    np.save(stem.with_suffix(".lattice.npy"), result.lattice)
    write_trace_csv(stem.with_suffix(".trace.csv"), result.trace)
    sidecar = {
        "class_id": int(class_id),
        "params": params.to_dict(),
        "final_terms": {k: float(v) for k, v in result.final_terms.items()},
        "original_score": result.original_score,
        "perturbed_score": result.perturbed_score,
        "drop": result.drop,
        "foreground_fraction": float(np.mean(result.crisp)),
    }
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return sidecar
