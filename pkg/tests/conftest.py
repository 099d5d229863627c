import importlib.util
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from visual_summaries import desk
from visual_summaries.oracle import ModelManifest, TinyConvNet, TorchOracle
from visual_summaries.pipeline import DEFAULT_MODEL, Runner, load_config, write_reports

DATA = Path(__file__).parent / "data"

# Shortened optimization schedule for pipeline plumbing tests
FAST_MASKOPT = {"phases": [[20, {}], [10, {"tv_weight": 1.0, "binarize_weight": 2.0}]]}

_ACCEPTANCE: dict = {}


def ssim_reference_recipes():
    """``make_pair(kind, seed)`` from the script that froze the SSIM reference values."""
    path = Path(__file__).parents[1] / "scripts" / "make_ssim_reference.py"
    spec = importlib.util.spec_from_file_location("make_ssim_reference", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod.make_pair


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_oracle():
    return TorchOracle.from_manifest(DEFAULT_MODEL)


@pytest.fixture(scope="session")
def desk_oracle64():
    return TorchOracle.from_manifest(DEFAULT_MODEL, precision=64)


@pytest.fixture(scope="session")
def random_oracle64():
    """Tiny convnet with seeded random weights, run in float64."""
    torch = pytest.importorskip("torch")
    torch.manual_seed(0)
    manifest = ModelManifest(
        architecture="tiny_convnet",
        labels=["a", "b", "c"],
        input_size=(32, 32),
        mean=[0.5, 0.5, 0.5],
        std=[0.25, 0.25, 0.25],
        feature_layers={"fc1": 32, "pool": 32},
    )
    return TorchOracle(TinyConvNet(3), manifest, precision=64)


@pytest.fixture(scope="session")
def desk_scene():
    return desk.render_scene(np.random.default_rng(5), "alpha")


def _run_all(root: Path, cache: Path, **overrides):
    cfg = load_config(root / "config.yaml", cache=str(cache), **overrides)
    runner = Runner(cfg)
    manifest = runner.run("all")
    write_reports(runner)
    return cfg, manifest


@pytest.fixture(scope="session")
def e2e(tmp_path_factory):
    """Full default pipeline on the 30-images-per-class part corpus."""
    root = tmp_path_factory.mktemp("e2e")
    desk.write_run_directory(root, per_class=30, eval_per_class=20)
    cfg, manifest = _run_all(root, root / "cache")
    with open(root / "images" / "ground_truth.json") as fh:
        truth = json.load(fh)
    return {"root": root, "cfg": cfg, "manifest": manifest, "truth": truth}


@pytest.fixture(scope="session")
def small_run_dir(tmp_path_factory):
    """A 4-images-per-class corpus with a shortened mask schedule."""
    root = tmp_path_factory.mktemp("small")
    cfg_path = desk.write_run_directory(root, per_class=4, eval_per_class=3)
    cfg = yaml.safe_load(cfg_path.read_text())
    cfg["maskopt"] = FAST_MASKOPT
    cfg_path.write_text(yaml.safe_dump(cfg))
    return root
