import hashlib
import logging

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from visual_summaries.summaries import (
    CELL,
    Summary,
    SummaryPart,
    crop_window,
    grid_shape,
    jaccard_coherence,
    jaccard_distance,
    load_synonyms,
    load_tags,
    render_cell,
    render_summary,
    save_png,
    tag_vectors,
    write_class_manifest,
)

# sha256 of the rendered pixel buffer of ``golden_summary``
GOLDEN_RENDER_SHA256 = "8e6956d6100b29c49089d7c549825d74da28cc60c0e3afb9c9f27ee931a6cc64"


def gray_image(seed, size=64):
    rng = np.random.default_rng(seed)
    return (rng.random((size, size, 3)) * 0.6 + 0.2)


def golden_summary():
    parts = [
        SummaryPart("a", (10, 10, 20, 30), (5, 5, 40, 40)),
        SummaryPart("b", (0, 0, 16, 16), (0, 0, 32, 20)),
        SummaryPart("c", (30, 30, 60, 50), (20, 25, 64, 64)),
        SummaryPart("a", (40, 2, 50, 12), (36, 0, 60, 16)),
        SummaryPart("b", (5, 40, 25, 60), (0, 36, 30, 64)),
        SummaryPart("c", (2, 2, 12, 12), (0, 0, 20, 20)),
    ]
    images = {k: gray_image(i) for i, k in enumerate("abc")}
    return Summary("alpha", 0, parts), images


def test_grid_layout():
    s, images = golden_summary()
    canvas = render_summary(s, images)
    assert grid_shape(6) == (2, 3)
    assert canvas.shape == (2 * CELL, 3 * CELL, 3) and canvas.dtype == np.uint8
    assert grid_shape(1) == (1, 1) and grid_shape(5) == (2, 3) and grid_shape(10) == (3, 4)
    # exemplar first, row-major
    first, _ = render_cell(images["a"], s.parts[0])
    np.testing.assert_array_equal(canvas[:CELL, :CELL], first)
    fifth, _ = render_cell(images["b"], s.parts[4])
    np.testing.assert_array_equal(canvas[CELL:, CELL:2 * CELL], fifth)


def test_overlay_exactly_on_part_box():
    img = np.full((64, 64, 3), 0.5)
    part = SummaryPart("a", (16, 16, 48, 32), (0, 0, 64, 64))
    tile, (x0, y0, x1, y1) = render_cell(img, part, margin=0.0)
    # square crop of the whole image scales by 2
    assert (x0, y0, x1, y1) == (32, 32, 96, 64)
    grey = round(0.5 * 255)
    tinted = np.array([round(0.6 * grey + 0.4 * 255), round(0.6 * grey), round(0.6 * grey)])
    inside = np.zeros((CELL, CELL), bool)
    inside[y0:y1, x0:x1] = True
    assert np.all(tile[inside] == tinted)
    assert np.all(tile[~inside] == grey)


def test_part_equal_to_region_tints_whole_cell():
    img = gray_image(3)
    part = SummaryPart("a", (8, 8, 40, 40), (8, 8, 40, 40))
    tile, rect = render_cell(img, part, margin=0.0)
    assert rect == (0, 0, CELL, CELL)
    assert np.all(tile[..., 0] >= 0.4 * 255 - 0.5)
    assert np.all(tile[..., 0].astype(int) > tile[..., 1])


def test_letterbox_keeps_aspect():
    img = gray_image(4)
    part = SummaryPart("a", (0, 0, 10, 10), (0, 0, 64, 32))
    tile, _ = render_cell(img, part, margin=0.0)
    assert not tile[:32].any() and not tile[96:].any()
    assert tile[32:96].any()


def test_crop_window_margin_clipped():
    part = SummaryPart("a", (12, 12, 14, 14), (10, 10, 30, 20))
    assert crop_window(part, (64, 64)) == (8, 9, 32, 21)
    assert crop_window(SummaryPart("a", (0, 0, 5, 5), (0, 0, 64, 64)), (64, 64)) == (0, 0, 64, 64)


def test_render_is_deterministic(tmp_path):
    s, images = golden_summary()
    a, b = render_summary(s, images), render_summary(s, images)
    save_png(tmp_path / "a.png", a)
    save_png(tmp_path / "b.png", b)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert hashlib.sha256(a.tobytes()).hexdigest() == GOLDEN_RENDER_SHA256


def test_render_from_files_and_missing(tmp_path):
    s, images = golden_summary()
    paths = {}
    for k, im in images.items():
        save_png(tmp_path / f"{k}.png", np.round(im * 255).astype(np.uint8))
        paths[k] = tmp_path / f"{k}.png"
    np.testing.assert_array_equal(render_summary(s, paths), render_summary(s, images))
    paths["c"] = tmp_path / "gone.png"
    with pytest.raises(FileNotFoundError):
        render_summary(s, paths)
    with pytest.raises(FileNotFoundError):
        render_summary(s, {"a": images["a"]})


def test_summary_invariants(tmp_path):
    with pytest.raises(ValueError):
        Summary("x", 0, [SummaryPart("a", (0, 0, 4, 4), (0, 0, 8, 8))])
    with pytest.raises(ValueError):
        Summary("x", 0, [SummaryPart("a", (4, 0, 4, 4), (0, 0, 8, 8))] * 2)
    s, _ = golden_summary()
    assert s.size == 6 and s.exemplar is s.parts[0] and s.image_ids == ["a", "b", "c"]
    data = write_class_manifest(tmp_path / "m.json", "alpha", [s], 0.2, 0.5)
    assert data["K"] == 1 and data["summaries"][0]["exemplar"]["image_id"] == "a"


# -- tags --

def test_jaccard_examples():
    assert jaccard_distance({"a", "b"}, {"b", "c"}) == pytest.approx(2 / 3)
    assert jaccard_distance({"a"}, {"a"}) == 0
    assert jaccard_distance(set(), set()) == 0
    assert jaccard_distance({"a"}, set()) == 1


@settings(max_examples=60, deadline=None)
@given(st.sets(st.sampled_from("abcdefgh")), st.sets(st.sampled_from("abcdefgh")))
def test_jaccard_properties(a, b):
    d = jaccard_distance(a, b)
    assert 0 <= d <= 1
    assert d == jaccard_distance(b, a)


def test_identical_tags_give_zero():
    tags = {f"i{k}": {"x", "y"} for k in range(5)}
    mu_s, mu_r = jaccard_coherence([["i0", "i1", "i2"]], tags)
    assert mu_s == 0 and mu_r == 0


def test_coherence_order_invariance():
    rng = np.random.default_rng(0)
    vocab = [f"t{k}" for k in range(20)]
    tags = {f"i{k:02d}": set(rng.choice(vocab, 6, replace=False)) for k in range(30)}
    summaries = [[f"i{k:02d}" for k in rng.choice(30, 5, replace=False)] for _ in range(4)]
    ref = jaccard_coherence(summaries, tags, seed=3)
    shuffled_tags = {k: tags[k] for k in rng.permutation(sorted(tags))}
    shuffled = [list(rng.permutation(m)) for m in reversed(summaries)]
    assert jaccard_coherence(shuffled, shuffled_tags, seed=3) == ref


def test_small_summaries_excluded(caplog):
    tags = {"a": {"x"}, "b": {"y"}, "c": {"x"}}
    with caplog.at_level(logging.WARNING):
        mu = jaccard_coherence([["a", "zz"], ["a", "c"]], tags)
    assert "excluded" in caplog.text
    assert mu[0] == 0
    assert all(np.isnan(v) for v in jaccard_coherence([["a"]], tags))


def test_tag_files_cap_and_synonyms(tmp_path, caplog):
    (tmp_path / "syn.yaml").write_text(yaml.safe_dump({"car": ["automobile", "Motor Car"]}))
    syn = load_synonyms(tmp_path / "syn.yaml")
    assert syn == {"automobile": "car", "motor car": "car"}
    (tmp_path / "a.yaml").write_text(yaml.safe_dump(["Automobile", "wheel", " motor  car ", "road"]))
    assert load_tags(tmp_path / "a.yaml", syn) == {"car", "wheel", "road"}
    (tmp_path / "b.yaml").write_text(yaml.safe_dump({"tags": [f"t{k}" for k in range(11)]}))
    with caplog.at_level(logging.WARNING):
        got = load_tags(tmp_path / "b.yaml")
    assert got == {f"t{k}" for k in range(8)}
    assert "keeping the first 8" in caplog.text
    (tmp_path / "c.yaml").write_text("just a string\n")
    with pytest.raises(ValueError):
        load_tags(tmp_path / "c.yaml")


def test_tag_vectors_share_vocabulary():
    vecs = tag_vectors({"a": {"x", "y"}, "b": {"y", "z"}})
    assert vecs["a"].vocabulary == vecs["b"].vocabulary == ("x", "y", "z")
    assert vecs["a"].vector.tolist() == [1, 1, 0]
    assert vecs["b"].tags == {"y", "z"}
