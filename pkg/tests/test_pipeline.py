import json
import shutil

import pytest
import yaml
from click.testing import CliRunner

from visual_summaries import desk, pipeline
from visual_summaries.cli import main
from visual_summaries.pipeline import (
    ConfigError,
    MissingDependency,
    Runner,
    StageError,
    digest,
    load_config,
    run,
    write_json,
)


def test_config_defaults_and_resolution(small_run_dir):
    cfg = load_config(small_run_dir / "config.yaml")
    assert cfg.images == small_run_dir / "images"
    assert cfg.cache == small_run_dir / "cache"
    assert cfg.boost["eval_dir"] == str(small_run_dir / "eval")
    assert cfg.classes == ["alpha", "beta"]
    assert cfg.cluster["damping"] == 0.9 and cfg.matcher["tau"] == "percentile:90"
    assert cfg.mask_params.total_iterations == 30
    over = load_config(small_run_dir / "config.yaml", classes="alpha", workers=3, seed=None)
    assert over.classes == ["alpha"] and over.workers == 3 and over.seed == 0


@pytest.mark.parametrize(
    "patch, message",
    [
        ({"bogus": 1}, "unknown config keys"),
        ({"cluster": {"dampng": 0.9}}, "unknown key cluster.dampng"),
        ({"cluster": {"damping": 1.0}}, "damping"),
        ({"classes": ["gamma"]}, "no image directory"),
        ({"classes": []}, "non-empty"),
        ({"maskopt": {"beta": 0.1}}, "maskopt"),
        ({"matcher": {"tau": "top:5"}}, "tau"),
        ({"boost": {"eval_dir": "nowhere"}}, "not found"),
    ],
)
def test_config_errors(small_run_dir, tmp_path, patch, message):
    raw = yaml.safe_load((small_run_dir / "config.yaml").read_text())
    raw["images"] = str(small_run_dir / "images")
    raw.update(patch)
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(raw))
    with pytest.raises(ConfigError, match=message):
        load_config(p)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")


def test_digest_is_order_free():
    assert digest({"a": 1, "b": [1, 2]}) == digest({"b": [1, 2], "a": 1})
    assert digest({"a": 1}) != digest({"a": 2})


def test_json_writer_is_stable(tmp_path):
    write_json(tmp_path / "a.json", {"b": float("nan"), "a": [1.5, 2]})
    assert (tmp_path / "a.json").read_text() == '{\n "a": [\n  1.5,\n  2\n ],\n "b": null\n}\n'


def test_missing_dependency_names_stage(small_run_dir, tmp_path):
    cfg = load_config(small_run_dir / "config.yaml", cache=str(tmp_path / "empty"))
    with pytest.raises(MissingDependency, match="stage 'cluster' needs 'match' artifacts"):
        Runner(cfg).run("cluster")


@pytest.fixture(scope="module")
def masked_cache(small_run_dir, tmp_path_factory):
    cache = tmp_path_factory.mktemp("cache")
    cfg = load_config(small_run_dir / "config.yaml", cache=str(cache))
    manifest = Runner(cfg).run("masks")
    return cfg, manifest


def test_masks_stage_and_cache_hits(masked_cache):
    cfg, manifest = masked_cache
    entry = manifest["stages"]["masks"]
    assert entry["status"] == "ok" and len(entry["items"]) == 8
    item = entry["items"]["alpha/alpha_000"]
    assert {f.rsplit("/", 1)[1] for f in item["files"]} == {
        "meta.json",
        "mask.png",
        "mask.json",
        "mask.lattice.npy",
        "mask.trace.csv",
    }
    runner = Runner(cfg)
    again = runner.run("masks")
    assert runner.hits["masks"] == {"hits": 8, "computed": 0}
    assert again == manifest
    timings = json.loads((cfg.cache / "timings-masks.json").read_text())
    assert "masks" in timings["seconds"]


def test_workers_give_identical_results(small_run_dir, masked_cache, tmp_path):
    cfg, manifest = masked_cache
    other = load_config(small_run_dir / "config.yaml", cache=str(tmp_path / "w2"), workers=2)
    assert Runner(other).run("masks") == manifest


def test_failure_policy(small_run_dir, tmp_path, monkeypatch):
    real = pipeline.extract_mask
    calls = {"n": 0}

    def flaky(oracle, image, class_id, params):
        calls["n"] += 1
        if calls["n"] == 1:
            raise RuntimeError("boom")
        return real(oracle, image, class_id, params)

    monkeypatch.setattr(pipeline, "extract_mask", flaky)
    # 1 failure in 8 items exceeds the 10% tolerance
    cfg = load_config(small_run_dir / "config.yaml", cache=str(tmp_path / "c8"))
    with pytest.raises(StageError, match="1 of 8"):
        Runner(cfg).run("masks")
    manifest = json.loads((tmp_path / "c8" / "manifest-masks.json").read_text())
    assert manifest["stages"]["masks"]["status"] == "failed"
    assert manifest["stages"]["masks"]["failures"][0]["error"] == "RuntimeError: boom"

    # 1 in 10 is tolerated
    root = tmp_path / "ten"
    desk.write_run_directory(root, per_class=5, eval_per_class=1)
    raw = yaml.safe_load((root / "config.yaml").read_text())
    raw["maskopt"] = {"phases": [[2, {}]]}
    (root / "config.yaml").write_text(yaml.safe_dump(raw))
    calls["n"] = 0
    manifest = Runner(load_config(root / "config.yaml")).run("masks")
    entry = manifest["stages"]["masks"]
    assert entry["status"] == "ok" and len(entry["items"]) == 9 and len(entry["failures"]) == 1


def test_full_run_with_tags(small_run_dir, tmp_path):
    root = tmp_path / "run"
    shutil.copytree(small_run_dir, root, ignore=shutil.ignore_patterns("cache"))
    truth = json.loads((root / "images" / "ground_truth.json").read_text())
    desk.write_tag_files(root / "tags", {i: i.split("/")[0] for i in truth})
    raw = yaml.safe_load((root / "config.yaml").read_text())
    raw["tags"] = {"dir": "tags"}
    (root / "config.yaml").write_text(yaml.safe_dump(raw))
    cfg = load_config(root / "config.yaml")
    manifest = run("all", cfg)
    assert [manifest["stages"][s]["status"] for s in pipeline.STAGES] == ["ok"] * 8
    counts = []
    for cls in ("alpha", "beta"):
        item = manifest["stages"]["render"]["items"][cls]
        key = item["key"]
        data = json.loads((cfg.cache / "render" / key[:2] / key / "summaries.json").read_text())
        assert data["class"] == cls and data["K"] == len(data["summaries"])
        counts.append(data["K"])
        if data["K"]:
            # one tag group per class: every member shares all but its own tags
            assert data["mu_s"] == pytest.approx(0.4)
    assert sum(counts) > 0
    assert (cfg.cache / "reports" / "drop_table.csv").exists()
    boost = manifest["stages"]["boost"]["items"]["all"]["info"]
    assert boost["n_val"] + boost["n_test"] == 4 * 3
    assert boost["val_fused"] >= boost["val_base"]


def test_boost_skipped_without_eval_dir(small_run_dir, tmp_path, monkeypatch):
    raw = yaml.safe_load((small_run_dir / "config.yaml").read_text())
    raw["images"] = str(small_run_dir / "images")
    raw["boost"] = {"eval_dir": None}
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(raw))
    runner = Runner(load_config(p, cache=str(tmp_path / "c")))
    monkeypatch.setattr(runner, "resolve", lambda stage, needed_by: {})
    assert runner.plan("boost") == []
    assert any("boost.eval_dir" in w for w in runner.warnings)


# -- command line --

def test_cli_exit_codes(small_run_dir, tmp_path):
    cli = CliRunner()
    res = cli.invoke(main, ["masks", "--config", str(tmp_path / "missing.yaml")])
    assert res.exit_code == 3 and "config error" in res.output
    res = cli.invoke(main, ["cluster", "--config", str(small_run_dir / "config.yaml"), "--cache", str(tmp_path / "c")])
    assert res.exit_code == 2
    assert "stage 'cluster' needs 'match' artifacts; run the match stage first" in res.output
    res = cli.invoke(main, ["run", "--stage", "bogus", "--config", str(small_run_dir / "config.yaml")])
    assert res.exit_code == 2  # click usage error


def test_cli_stage_and_rerun(small_run_dir, tmp_path):
    cli = CliRunner()
    args = ["run", "--stage", "masks", "--config", str(small_run_dir / "config.yaml"), "--cache", str(tmp_path / "c"), "--classes", "alpha"]
    res = cli.invoke(main, args)
    assert res.exit_code == 0, res.output
    assert "masks      ok     items=4 failures=0" in res.output
    first = (tmp_path / "c" / "manifest-masks.json").read_bytes()
    assert cli.invoke(main, args).exit_code == 0
    assert (tmp_path / "c" / "manifest-masks.json").read_bytes() == first
    assert cli.invoke(main, args + ["--force"]).exit_code == 0
    assert (tmp_path / "c" / "manifest-masks.json").read_bytes() == first


def test_cli_make_corpus_and_stats(tmp_path):
    cli = CliRunner()
    res = cli.invoke(main, ["make-corpus", str(tmp_path / "x"), "--per-class", "2", "--eval-per-class", "1"])
    assert res.exit_code == 0
    assert len(list((tmp_path / "x" / "images" / "alpha").glob("*.png"))) == 2
    assert len(list((tmp_path / "x" / "eval").glob("*/*.png"))) == 4
    assert cli.invoke(main, ["make-corpus", str(tmp_path / "y"), "--classes", "zeta"]).exit_code != 0
    res = cli.invoke(main, ["stats", "--out", str(tmp_path / "s.csv")])
    assert res.exit_code == 0 and "spearman 1.0000" in res.output
    (tmp_path / "t.json").write_text(json.dumps([{"model": "a", "counts": [2], "accuracy": 1}, {"model": "b", "counts": [2], "accuracy": 2}]))
    assert "(degenerate)" in cli.invoke(main, ["stats", str(tmp_path / "t.json")]).output
