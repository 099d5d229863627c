"""Freeze reference SSIM values computed by scikit-image.

Writes ``tests/data/ssim_reference.json``: seeded patch pairs (as the seed
and recipe that regenerate them) and the skimage value for each.
"""
import json
from pathlib import Path

import numpy as np
from skimage.metrics import structural_similarity

OUT = Path(__file__).resolve().parents[1] / "tests/data/ssim_reference.json"


def make_pair(kind: str, seed: int):
    rng = np.random.default_rng(seed)
    a = rng.random((64, 64))
    if kind == "noise":
        b = rng.random((64, 64))
    elif kind == "noisy_copy":
        b = np.clip(a + 0.1 * rng.standard_normal((64, 64)), 0, 1)
    elif kind == "smooth":
        yy, xx = np.mgrid[0:64, 0:64] / 63.0
        a = 0.5 + 0.4 * np.sin(6 * xx + rng.uniform(0, 3)) * np.cos(4 * yy)
        b = 0.5 + 0.4 * np.sin(6 * xx + rng.uniform(0, 3)) * np.cos(4 * yy)
    elif kind == "contrast":
        b = 0.5 * a + 0.25
    else:
        raise ValueError(kind)
    return a, b


def reference(a, b):
    return float(
        structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
    )


def main():
    cases = []
    for kind in ("noise", "noisy_copy", "smooth", "contrast"):
        for seed in (0, 1):
            a, b = make_pair(kind, seed)
            cases.append({"kind": kind, "seed": seed, "ssim": reference(a, b)})
    OUT.write_text(json.dumps({"cases": cases}, indent=1) + "\n")
    print(f"wrote {len(cases)} cases to {OUT}")


if __name__ == "__main__":
    main()
