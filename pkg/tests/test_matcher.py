from itertools import combinations

import numpy as np
import pytest

from visual_summaries import desk
from visual_summaries.matcher import (
    CorrError,
    MatchMatrix,
    assemble_corr,
    match_pair,
    percentile_threshold,
    restrict_corr,
)
from visual_summaries.regionizer import generate_proposals


def boxes(image, n=25):
    return [p.box for p in generate_proposals(image, n)]


@pytest.fixture(scope="module")
def scene_pair():
    rng = np.random.default_rng(21)
    a = desk.render_scene(rng, "alpha").image
    b = desk.render_scene(rng, "alpha").image
    return a, boxes(a), b, boxes(b)


def test_copy_match_is_identity(scene_pair):
    a, ba, _, _ = scene_pair
    Q = match_pair(a, ba, a.copy(), ba).values
    np.testing.assert_array_equal(np.argmax(Q, axis=1), np.arange(len(ba)))


def test_values_in_unit_interval(scene_pair):
    a, ba, b, bb = scene_pair
    Q = match_pair(a, ba, b, bb).values
    assert Q.shape == (len(ba), len(bb))
    assert np.all(np.isfinite(Q)) and Q.min() >= 0 and Q.max() <= 1


def test_noise_pairs_fall_below_class_threshold(scene_pair):
    a, ba, b, bb = scene_pair
    tau = percentile_threshold([match_pair(a, ba, b, bb), match_pair(b, bb, a, ba)])
    for seed in range(4):
        rng = np.random.default_rng(seed)
        x, y = rng.random((64, 64, 3)), rng.random((64, 64, 3))
        assert match_pair(x, boxes(x), y, boxes(y)).values.max() < tau


def test_proposal_order_invariance(scene_pair):
    a, ba, b, bb = scene_pair
    Q = match_pair(a, ba, b, bb).values
    pi = np.random.default_rng(0).permutation(len(ba))
    pj = np.random.default_rng(1).permutation(len(bb))
    Qp = match_pair(a, [ba[k] for k in pi], b, [bb[k] for k in pj]).values
    np.testing.assert_allclose(Qp, Q[np.ix_(pi, pj)], atol=1e-12)


def test_degenerate_box_row_is_zero():
    img = np.random.default_rng(0).random((32, 32, 3))
    img[:10, :10] = 0.3
    Q = match_pair(img, [(0, 0, 10, 10), (10, 10, 30, 30)], img, [(10, 10, 30, 30)]).values
    assert Q[0, 0] == 0 and Q[1, 0] > 0
    with pytest.raises(ValueError):
        match_pair(img, [], img, [(0, 0, 8, 8)])


def toy_matrices(rng, sizes, both=True):
    ids = sorted(sizes)
    out = []
    for a, b in combinations(ids, 2):
        out.append(MatchMatrix(a, b, rng.random((sizes[a], sizes[b]))))
        if both:
            out.append(MatchMatrix(b, a, rng.random((sizes[b], sizes[a]))))
    return out


def dense_oracle(matrices, sizes, tau):
    ids = sorted(sizes)
    off = dict(zip(ids, np.cumsum([0] + [sizes[i] for i in ids])[:-1]))
    n = sum(sizes.values())
    D = np.zeros((n, n))
    for m in matrices:
        for k in range(m.values.shape[0]):
            for l in range(m.values.shape[1]):
                r, c = off[m.image_i] + k, off[m.image_j] + l
                D[r, c] = D[c, r] = max(D[r, c], m.values[k, l])
    return np.where(D >= tau, D, 0.0)


@pytest.mark.parametrize("tau", [0.0, 0.5, 0.9])
def test_assemble_matches_dense_oracle(tau):
    rng = np.random.default_rng(7)
    sizes = {"a": 3, "b": 4, "c": 2, "d": 5}
    mats = toy_matrices(rng, sizes)
    corr = assemble_corr(mats, {k: list(range(v)) for k, v in sizes.items()}, tau)
    D = dense_oracle(mats, sizes, tau)
    assert corr.size == 14
    # toy values are strictly positive, so stored entries are the oracle's nonzeros
    assert corr.nnz == np.count_nonzero(D)
    np.testing.assert_array_equal(corr.dense(), D)
    assert corr.is_symmetric()
    assert np.all(np.diag(corr.dense()) == 0)


def test_two_images_block_structure():
    rng = np.random.default_rng(0)
    mats = [MatchMatrix("a", "b", rng.uniform(0.1, 0.9, (3, 3)))]
    corr = assemble_corr(mats, {"a": [0, 1, 2], "b": [0, 1, 2]}, 0.0)
    D = corr.dense()
    assert corr.size == 6 and corr.nnz == 18
    assert not D[:3, :3].any() and not D[3:, 3:].any()
    np.testing.assert_array_equal(D[:3, 3:], mats[0].values)


def test_threshold_above_range_is_empty():
    mats = toy_matrices(np.random.default_rng(1), {"a": 2, "b": 3})
    corr = assemble_corr(mats, {"a": [0, 1], "b": [0, 1, 2]}, 1.0)
    assert corr.nnz == 0 and corr.size == 5


def test_percentile_threshold_spec():
    mats = toy_matrices(np.random.default_rng(2), {"a": 4, "b": 4})
    tau = percentile_threshold(mats, 90)
    vals = np.concatenate([m.values.ravel() for m in mats])
    assert tau == pytest.approx(np.percentile(vals, 90))
    corr = assemble_corr(mats, {"a": list(range(4)), "b": list(range(4))}, "percentile:90")
    assert corr.dense().max() > 0
    assert corr.matrix.data.min() >= tau
    assert percentile_threshold([]) == np.inf


def test_assemble_errors():
    m = MatchMatrix("a", "b", np.ones((2, 2)) * 0.5)
    with pytest.raises(CorrError):
        assemble_corr([m], {"a": [0, 0], "b": [0, 1]}, 0.1)
    with pytest.raises(CorrError):
        assemble_corr([m, m], {"a": [0, 1], "b": [0, 1]}, 0.1)
    with pytest.raises(CorrError):
        assemble_corr([m], {"a": [0, 1, 2], "b": [0, 1]}, 0.1)
    with pytest.raises(CorrError):
        assemble_corr([m], {"a": [0, 1]}, 0.1)
    with pytest.raises(ValueError):
        assemble_corr([m], {"a": [0, 1], "b": [0, 1]}, "median")


@pytest.fixture()
def toy_corr():
    sizes = {"a": 3, "b": 4, "c": 3}
    return assemble_corr(toy_matrices(np.random.default_rng(3), sizes), {k: [10 + i for i in range(v)] for k, v in sizes.items()}, 0.4)


def test_restrict_identity_and_empty(toy_corr):
    full = restrict_corr(toy_corr, toy_corr.index)
    assert full.index == toy_corr.index
    np.testing.assert_array_equal(full.dense(), toy_corr.dense())
    empty = restrict_corr(toy_corr, [])
    assert empty.size == 0 and empty.nnz == 0
    with pytest.raises(CorrError):
        restrict_corr(toy_corr, [("a", 99)])


def test_restrict_random_subsets(toy_corr):
    rng = np.random.default_rng(4)
    D = toy_corr.dense()
    for _ in range(20):
        rows = sorted(rng.choice(toy_corr.size, rng.integers(1, toy_corr.size), replace=False).tolist())
        kept = [toy_corr.index[r] for r in rng.permutation(rows)]
        sub = restrict_corr(toy_corr, kept)
        assert sub.index == [toy_corr.index[r] for r in rows]
        np.testing.assert_array_equal(sub.dense(), D[np.ix_(rows, rows)])
        assert sub.is_symmetric()


def test_save_load_roundtrip(toy_corr, tmp_path):
    toy_corr.save(tmp_path / "corr")
    back = type(toy_corr).load(tmp_path / "corr")
    assert back.index == toy_corr.index
    assert back.triplets() == toy_corr.triplets()
    lines = (tmp_path / "corr.triplets.txt").read_text().splitlines()
    body = [tuple(map(float, l.split()[:2])) for l in lines[1:]]
    assert body == sorted(body)
