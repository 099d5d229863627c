import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from visual_summaries import desk
from visual_summaries.maskopt import (
    DEFAULT_PHASES,
    BlurBank,
    MaskOptParams,
    _interp_matrix,
    area_term,
    binarize_term,
    crisp_from_lattice,
    extract_mask,
    load_mask_png,
    objective_terms,
    perturb,
    save_mask_result,
    tv_term,
    upsample,
)
from visual_summaries.oracle import ConstantOracle


def direct_blur(image, sigma, truncate=3.0):
    """Per-pixel Gaussian kernel sum with mirrored borders."""
    if sigma == 0:
        return image.copy()
    r = int(truncate * sigma + 0.5)
    x = np.arange(-r, r + 1)
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k1 /= k1.sum()
    k = np.outer(k1, k1)
    pad = np.pad(image, ((r, r), (r, r), (0, 0)), mode="symmetric")
    out = np.zeros_like(image)
    H, W = image.shape[:2]
    for y in range(H):
        for xx in range(W):
            win = pad[y:y + 2 * r + 1, xx:xx + 2 * r + 1]
            out[y, xx] = np.einsum("ij,ijc->c", k, win)
    return out


@pytest.fixture(scope="module")
def natural():
    return desk.render_scene(np.random.default_rng(4), "beta").image[:24, :24]


def test_blur_levels_match_direct_kernel(natural):
    bank = BlurBank(natural, sigma0=2.0, step=0.5)
    assert bank.levels == 4
    for k, s in enumerate(bank.sigmas):
        np.testing.assert_allclose(bank.stack[k], direct_blur(natural, s), atol=1e-12)


def test_perturb_identity_and_full_blur(natural):
    np.testing.assert_array_equal(perturb(natural, np.zeros((24, 24)), sigma0=2.0), natural)
    np.testing.assert_allclose(perturb(natural, np.ones((24, 24)), sigma0=2.0), direct_blur(natural, 2.0), atol=1e-12)


def test_checkerboard_mask(natural):
    yy, xx = np.mgrid[0:24, 0:24]
    mask = (((yy // 6) + (xx // 6)) % 2).astype(float)
    out = perturb(natural, mask, sigma0=2.0)
    full = direct_blur(natural, 2.0)
    on = mask == 1
    np.testing.assert_allclose(out[on], full[on], atol=1e-12)
    assert np.mean(np.abs(out[~on] - natural[~on])) < 1e-6


def test_intermediate_widths_interpolate(natural):
    bank = BlurBank(natural, sigma0=2.0, step=0.5)
    m = np.full((24, 24), 0.3)  # 1.2 levels: between sigma 0.5 and 1.0
    expected = 0.8 * direct_blur(natural, 0.5) + 0.2 * direct_blur(natural, 1.0)
    np.testing.assert_allclose(bank.apply(m), expected, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 7), elements=st.floats(0, 1)))
def test_perturb_stays_in_image_range(mask):
    img = np.random.default_rng(0).random((6, 7, 3))
    out = perturb(img, mask, sigma0=1.5)
    assert out.min() >= img.min() - 1e-12
    assert out.max() <= img.max() + 1e-12


def test_interp_matrix_rows_sum_to_one():
    for n_out, n_in in [(7, 3), (3, 7), (5, 5), (64, 28)]:
        M = _interp_matrix(n_out, n_in)
        np.testing.assert_allclose(M.sum(axis=1), 1.0)
    np.testing.assert_array_equal(_interp_matrix(6, 6), np.eye(6))
    m = np.random.default_rng(0).random((5, 5))
    np.testing.assert_array_equal(upsample(m, (5, 5)), m)


def test_crisp_from_lattice():
    lat = np.zeros((4, 4), bool)
    lat[1:3, 1:3] = True
    up = crisp_from_lattice(lat, (8, 8))
    assert up.shape == (8, 8)
    assert up[3:5, 3:5].all()
    assert not up[0].any()


def test_regularizer_values():
    assert tv_term(np.full((5, 5), 0.3), 3.0)[0] == 0
    assert binarize_term(np.array([[0.0, 1.0], [1.0, 0.0]]))[0] == 0
    assert binarize_term(np.full((4, 5), 0.5))[0] == pytest.approx(0.25 * 20)
    assert area_term(np.full((2, 2), 0.25), "perturbed")[0] == pytest.approx(1.0)
    assert area_term(np.full((2, 2), 0.25), "preserved")[0] == pytest.approx(3.0)
    # forward difference of contiguous pixels
    m = np.array([[0.0, 1.0]])
    assert tv_term(m, 3.0)[0] == pytest.approx(1.0)


@pytest.mark.parametrize("fn", [lambda m: tv_term(m, 3.0), lambda m: tv_term(m, 2.0), binarize_term])
def test_regularizer_gradients(fn):
    rng = np.random.default_rng(1)
    m = rng.uniform(0.1, 0.9, (6, 5))
    _, g = fn(m)
    h = 1e-6
    for _ in range(10):
        i, j = rng.integers(0, 6), rng.integers(0, 5)
        a, b = m.copy(), m.copy()
        a[i, j] += h
        b[i, j] -= h
        fd = (fn(a)[0] - fn(b)[0]) / (2 * h)
        assert fd == pytest.approx(g[i, j], rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("shape", [None, (16, 16)])
def test_objective_gradient_finite_differences(random_oracle64, shape):
    rng = np.random.default_rng(2)
    img = rng.random((32, 32, 3))
    p = MaskOptParams(tv_weight=1.0, binarize_weight=2.0, mask_shape=shape, reference_size=None, sigma0=3.0)
    m = rng.uniform(0.05, 0.95, p.lattice_shape(img.shape))
    ob = objective_terms(random_oracle64, m, img, 0, p)
    assert set(ob.terms) == {"score", "area", "tv", "binarize"}
    # the blur is piecewise linear in m; an upsampled entry moves many pixels,
    # so a smaller step keeps them clear of the level boundaries
    h = 1e-5 if shape is None else 1e-7
    for _ in range(20):
        idx = tuple(rng.integers(0, s) for s in m.shape)
        a, b = m.copy(), m.copy()
        a[idx] += h
        b[idx] -= h
        fd = (objective_terms(random_oracle64, a, img, 0, p).total - objective_terms(random_oracle64, b, img, 0, p).total) / (2 * h)
        g = ob.gradient[idx]
        assert abs(fd - g) / max(abs(fd), abs(g), 1e-12) < 1e-4


def test_params_schedule_and_validation():
    p = MaskOptParams()
    assert p.total_iterations == 450
    assert p.phases == DEFAULT_PHASES
    assert p.for_phase(1).binarize_weight == 2.0
    assert p.for_phase(1).tv_weight == 1.0
    assert MaskOptParams.from_dict(p.to_dict()) == p
    s = MaskOptParams.smooth_baseline()
    assert all(s.for_phase(i).tv_weight == 0 and s.for_phase(i).binarize_weight == 0 for i in range(2))
    assert p.blur_scale((112, 200)) == 0.5
    for bad in [dict(area_weight=-1), dict(beta=0.5), dict(threshold=1.0), dict(phases=()), dict(phases=((10, {"sigma0": 1}),)), dict(area_mode="x")]:
        with pytest.raises(ValueError):
            MaskOptParams(**bad)


def test_extract_mask_with_constant_oracle(tmp_path):
    # no evidence to delete: the area term empties the mask
    img = np.random.default_rng(0).random((16, 16, 3))
    p = MaskOptParams(phases=((30, {}), (10, {"tv_weight": 1.0, "binarize_weight": 2.0})), reference_size=None, sigma0=2.0)
    res = extract_mask(ConstantOracle([1, 1]), img, 0, p)
    assert len(res.trace) == 40
    assert res.crisp.shape == (16, 16) and res.crisp.dtype == bool
    assert not res.crisp.any()
    assert res.nonbinary_fraction() == 0.0
    side = save_mask_result(tmp_path / "m", res, p, 0)
    np.testing.assert_array_equal(load_mask_png(tmp_path / "m.png"), res.crisp)
    with open(tmp_path / "m.trace.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iteration", "score", "area", "tv", "binarize"]
    assert len(rows) == 41
    assert side["class_id"] == 0


def test_extract_mask_deletes_evidence(desk_oracle, desk_scene):
    res = extract_mask(desk_oracle, desk_scene.image, 1)
    assert res.drop >= 95
    assert res.nonbinary_fraction() < 0.05
    assert 0 < res.crisp.mean() < 0.5
    # the mask covers the class parts
    for _, (x0, y0, x1, y1) in desk_scene.parts:
        assert res.crisp[y0:y1, x0:x1].mean() > 0.3
