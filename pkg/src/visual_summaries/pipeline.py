"""Stage orchestration with content-addressed artifacts.

Every item of every stage (one image for masks/regions/proposals/evaluate,
one class for match/cluster/render, the whole run for boost) is stored in
``<cache>/<stage>/<kk>/<key>/`` where ``key`` hashes the item's inputs:
parameters, upstream keys, input file digests and the package version.
An item directory is built under a temporary name and renamed into place,
so readers never see partial artifacts.  ``meta.json`` is written last and
marks a complete item.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import shutil
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter

import numpy as np
import yaml
from PIL import Image

from . import __version__
from .clusterer import affinity_propagation, part_patch, prune_clusters
from .desk import load_image
from .evaluation import (
    DropReport,
    drop_score,
    format_drop_table,
    matched_area_threshold_baseline,
    write_drop_csv,
)
from .maskopt import MaskOptParams, extract_mask, load_mask_png, save_mask_result, upsample
from .matcher import CorrMatrix, assemble_corr, match_pair, percentile_threshold, restrict_corr
from .oracle import TorchOracle
from .regionizer import Proposal, Region, extract_regions, generate_proposals, prune_proposals
from .specialize import (
    ALPHA_GRID,
    C_GRID,
    covered_classes,
    fuse,
    save_classifiers,
    select_alpha,
    specialized_scores,
    train_summary_classifiers,
)
from .summaries import (
    Summary,
    SummaryPart,
    jaccard_coherence,
    load_synonyms,
    load_tags,
    render_summary,
    save_png,
    write_class_manifest,
)

log = logging.getLogger(__name__)

STAGES = ("masks", "regions", "proposals", "match", "cluster", "render", "evaluate", "boost")
FAILURE_TOLERANCE = 0.10
DEFAULT_MODEL = Path(__file__).parent / "data" / "desk_model" / "model.yaml"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


class MissingDependency(StageError):
    def __init__(self, stage: str, needed: str):
        super().__init__(f"stage {stage!r} needs {needed!r} artifacts; run the {needed} stage first")
        self.stage = stage
        self.needed = needed


# -- configuration -----------------------------------------------------------

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "precision": 32,
    "maskopt": {},
    "proposals": {"max_count": 100},
    "regions": {"min_area": None, "min_overlap": 0.75, "max_area_ratio": 2.0, "overlap_mode": "proposal"},
    "matcher": {"tau": "percentile:90", "bandwidth": 0.1, "neighbours": 10},
    "cluster": {
        "preference": None,
        "damping": 0.9,
        "max_iter": 1000,
        "stable_window": 50,
        "ssim_ratio": 0.9,
        "ssim_mode": "ratio",
        "patch": 64,
    },
    "render": {"cell": 128, "margin": 0.1, "alpha": 0.4},
    "tags": {"dir": None, "synonyms": None},
    "evaluate": {"class_mode": "ground_truth"},
    "boost": {
        "eval_dir": None,
        "layer": "fc1",
        "neg_cap": 20,
        "c_grid": list(C_GRID),
        "alpha_grid": [float(a) for a in ALPHA_GRID],
        "mode": "covered",
        "val_fraction": 0.5,
    },
}


@dataclass
class RunConfig:
    model: Path
    images: Path
    classes: list
    cache: Path
    seed: int = 0
    workers: int = 1
    precision: int = 32
    maskopt: dict = field(default_factory=dict)
    proposals: dict = field(default_factory=dict)
    regions: dict = field(default_factory=dict)
    matcher: dict = field(default_factory=dict)
    cluster: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    boost: dict = field(default_factory=dict)

    @property
    def mask_params(self) -> MaskOptParams:
        return MaskOptParams.from_dict(self.maskopt)

    def params(self) -> dict:
        """Parameters that influence results (paths and worker count excluded)."""
        return {
            "seed": self.seed,
            "precision": self.precision,
            **{k: getattr(self, k) for k in DEFAULTS if isinstance(DEFAULTS[k], dict)},
        }


def _merge(base: dict, over: dict, where: str) -> dict:
    out = dict(base)
    for k, v in (over or {}).items():
        if base and k not in base:
            raise ConfigError(f"unknown key {where}.{k}")
        out[k] = v
    return out


def load_config(path=None, **overrides) -> RunConfig:
    """Read a YAML run configuration; keyword overrides win (None is ignored).

    Relative paths are resolved against the configuration file.
    """
    raw = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"bad config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        base = path.parent
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = {"model", "images", "classes", "cache"} | set(DEFAULTS)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else (base / p)

    if "images" not in raw:
        raise ConfigError("config needs an 'images' directory")
    images = resolve(raw["images"])
    model = resolve(raw["model"]) if raw.get("model") else DEFAULT_MODEL
    cache = resolve(raw.get("cache", "cache"))
    classes = raw.get("classes")
    if isinstance(classes, str):
        classes = [c for c in classes.split(",") if c]
    if not classes:
        raise ConfigError("config needs a non-empty 'classes' list")
    blocks = {}
    for name, default in DEFAULTS.items():
        if isinstance(default, dict):
            value = raw.get(name) or {}
            if not isinstance(value, dict):
                raise ConfigError(f"{name} must be a mapping")
            blocks[name] = _merge(default, value, name)
    for block, key in (("tags", "dir"), ("tags", "synonyms"), ("boost", "eval_dir")):
        if blocks[block].get(key) is not None:
            blocks[block][key] = str(resolve(blocks[block][key]))
    cfg = RunConfig(
        model=model,
        images=images,
        classes=list(classes),
        cache=cache,
        seed=int(raw.get("seed", DEFAULTS["seed"])),
        workers=int(raw.get("workers", DEFAULTS["workers"])),
        precision=int(raw.get("precision", DEFAULTS["precision"])),
        **blocks,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    if not cfg.model.exists():
        raise ConfigError(f"model manifest {cfg.model} not found")
    if not cfg.images.is_dir():
        raise ConfigError(f"image directory {cfg.images} not found")
    for c in cfg.classes:
        if not (cfg.images / c).is_dir():
            raise ConfigError(f"no image directory for class {c!r}")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.precision not in (32, 64):
        raise ConfigError("precision must be 32 or 64")
    try:
        cfg.mask_params
    except (TypeError, ValueError) as e:
        raise ConfigError(f"maskopt: {e}") from e
    cl = cfg.cluster
    if not 0.5 <= float(cl["damping"]) < 1:
        raise ConfigError("cluster.damping must lie in [0.5, 1)")
    if cl["ssim_mode"] not in ("ratio", "percentile"):
        raise ConfigError("cluster.ssim_mode must be 'ratio' or 'percentile'")
    tau = cfg.matcher["tau"]
    if isinstance(tau, str) and not tau.startswith("percentile:"):
        raise ConfigError("matcher.tau must be a number or 'percentile:<q>'")
    if not 0 <= float(cfg.render["alpha"]) <= 1:
        raise ConfigError("render.alpha must lie in [0, 1]")
    if cfg.evaluate["class_mode"] not in ("ground_truth", "predicted"):
        raise ConfigError("evaluate.class_mode must be 'ground_truth' or 'predicted'")
    if cfg.boost["mode"] not in ("covered", "all"):
        raise ConfigError("boost.mode must be 'covered' or 'all'")
    for block, key in (("tags", "dir"), ("tags", "synonyms"), ("boost", "eval_dir")):
        p = getattr(cfg, block).get(key)
        if p is not None and not Path(p).exists():
            raise ConfigError(f"{block}.{key} {p} not found")


# -- hashing and storage ---------------------------------------------------------

def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(obj), fh, indent=1, sort_keys=True)
        fh.write("\n")


class ArtifactStore:
    def __init__(self, root):
        self.root = Path(root)

    def dir(self, stage: str, key: str) -> Path:
        return self.root / stage / key[:2] / key

    def has(self, stage: str, key: str) -> bool:
        return (self.dir(stage, key) / "meta.json").exists()

    def meta(self, stage: str, key: str) -> dict:
        with open(self.dir(stage, key) / "meta.json") as fh:
            return json.load(fh)

    def files(self, stage: str, key: str) -> list:
        d = self.dir(stage, key)
        return sorted(str(p.relative_to(self.root)) for p in d.rglob("*") if p.is_file())

    def build(self, stage: str, key: str, inputs: dict, fn, force: bool = False):
        """Return ``(meta, hit)``; ``fn(tmpdir)`` returns the item's info dict."""
        if not force and self.has(stage, key):
            return self.meta(stage, key), True
        tmp = self.root / stage / ".tmp" / f"{key}-{uuid.uuid4().hex}"
        tmp.mkdir(parents=True)
        try:
            info = fn(tmp)
            meta = {"stage": stage, "key": key, "inputs": inputs, "info": info}
            write_json(tmp / "meta.json", meta)
            final = self.dir(stage, key)
            final.parent.mkdir(parents=True, exist_ok=True)
            if final.exists():
                shutil.rmtree(final)
            os.replace(tmp, final)
        finally:
            if tmp.exists():
                shutil.rmtree(tmp, ignore_errors=True)
        return self.meta(stage, key), False


# -- stage runner ------------------------------------------------------------------

@dataclass
class Item:
    item_id: str
    inputs: dict
    fn: object

    @property
    def key(self) -> str:
        return digest(self.inputs)


class Runner:
    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.store = ArtifactStore(cfg.cache)
        self.avail: dict = {}      # stage -> {item id: key} of present artifacts
        self.stage_info: dict = {}  # stage -> manifest entry
        self.timings: dict = {}
        self.hits: dict = {}
        self.warnings: list = []
        self._oracle = None
        self._digests: dict = {}

    # inputs ----------------------------------------------------------------------
    @property
    def oracle(self) -> TorchOracle:
        if self._oracle is None:
            self._oracle = TorchOracle.from_manifest(self.cfg.model, precision=self.cfg.precision)
        return self._oracle

    def images(self) -> dict:
        """``{image id: path}`` with ids ``<class>/<stem>``."""
        out = {}
        for c in self.cfg.classes:
            for p in sorted((self.cfg.images / c).glob("*.png")):
                out[f"{c}/{p.stem}"] = p
        return out

    def class_of(self, image_id: str) -> str:
        return image_id.split("/", 1)[0]

    def class_id(self, name: str) -> int:
        labels = self.oracle.labels
        if name not in labels:
            raise ConfigError(f"class {name!r} is not a model label {labels}")
        return labels.index(name)

    def digest_of(self, path) -> str:
        path = str(path)
        if path not in self._digests:
            self._digests[path] = file_digest(path)
        return self._digests[path]

    def path(self, stage: str, item_id: str, name: str) -> Path:
        return self.store.dir(stage, self.avail[stage][item_id]) / name

    def _warn(self, msg: str) -> None:
        log.warning(msg)
        self.warnings.append(msg)

    # planning ----------------------------------------------------------------
    def plan(self, stage: str) -> list:
        return getattr(self, f"_plan_{stage}")()

    def resolve(self, stage: str, needed_by: str) -> dict:
        """Present artifacts of ``stage`` for the current configuration."""
        if stage not in self.avail:
            try:
                items = self.plan(stage)
            except MissingDependency as e:
                raise MissingDependency(needed_by, stage) from e
            present = {it.item_id: it.key for it in items if self.store.has(stage, it.key)}
            if items and not present:
                raise MissingDependency(needed_by, stage)
            missing = len(items) - len(present)
            if missing:
                self._warn(f"{stage}: {missing} upstream item(s) missing, skipped by {needed_by}")
            self.avail[stage] = present
        return self.avail[stage]

    def run_stage(self, stage: str) -> dict:
        t0 = perf_counter()
        items = self.plan(stage)
        results, failures, hits = {}, [], 0

        def work(item: Item):
            try:
                meta, hit = self.store.build(stage, item.key, item.inputs, item.fn, self.force)
                return item, meta, hit, None
            except Exception as e:  # noqa: BLE001 - per-item failures are tolerated up to a limit
                log.exception("%s failed on %s", stage, item.item_id)
                return item, None, False, f"{type(e).__name__}: {e}"

        if self.cfg.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                outcomes = list(pool.map(work, items))
        else:
            outcomes = [work(it) for it in items]
        for item, meta, hit, err in outcomes:
            if err is not None:
                failures.append({"item": item.item_id, "error": err})
                continue
            hits += hit
            results[item.item_id] = {
                "key": item.key,
                "files": self.store.files(stage, item.key),
                "info": meta["info"],
            }
        self.avail[stage] = {k: v["key"] for k, v in results.items()}
        self.timings[stage] = perf_counter() - t0
        self.hits[stage] = {"hits": hits, "computed": len(results) - hits}
        entry = {"items": results, "failures": failures, "status": "ok"}
        if items and len(failures) > FAILURE_TOLERANCE * len(items):
            entry["status"] = "failed"
            self.stage_info[stage] = entry
            raise StageError(f"{stage}: {len(failures)} of {len(items)} items failed")
        self.stage_info[stage] = entry
        return entry

    def run(self, stage: str) -> dict:
        stages = STAGES if stage == "all" else (stage,)
        if stage != "all" and stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        try:
            for s in stages:
                self.run_stage(s)
        finally:
            self.write_manifest(stage)
        return self.manifest(stage)

    def manifest(self, stage: str) -> dict:
        return {
            "version": __version__,
            "stage": stage,
            "config": self.cfg.params(),
            "classes": self.cfg.classes,
            "stages": self.stage_info,
            "warnings": sorted(set(self.warnings)),
        }

    def write_manifest(self, stage: str) -> Path:
        self.cfg.cache.mkdir(parents=True, exist_ok=True)
        path = self.cfg.cache / f"manifest-{stage}.json"
        write_json(path, self.manifest(stage))
        write_json(self.cfg.cache / f"timings-{stage}.json", {"seconds": self.timings, "cache": self.hits})
        return path

    # stages ----------------------------------------------------------------
    def _base_inputs(self, stage: str, params: dict) -> dict:
        return {"stage": stage, "version": __version__, "params": params}

    def _plan_masks(self) -> list:
        params = self.cfg.mask_params
        model_fp = self.oracle.fingerprint()
        items = []
        for image_id, path in self.images().items():
            cid = self.class_id(self.class_of(image_id))
            inputs = {
                **self._base_inputs("masks", params.to_dict()),
                "image": self.digest_of(path),
                "model": model_fp,
                "precision": self.cfg.precision,
                "class_id": cid,
            }

            def fn(out, path=path, cid=cid):
                image = load_image(path)
                result = extract_mask(self.oracle, image, cid, params)
                side = save_mask_result(out / "mask", result, params, cid)
                return {
                    "drop": side["drop"],
                    "foreground": side["foreground_fraction"],
                    "nonbinary": result.nonbinary_fraction(),
                    "lattice_area": int(result.binary_lattice.sum()),
                }

            items.append(Item(image_id, inputs, fn))
        return items

    def _plan_regions(self) -> list:
        masks = self.resolve("masks", "regions")
        params = self.cfg.regions
        items = []
        for image_id, mkey in masks.items():
            inputs = {**self._base_inputs("regions", {"min_area": params["min_area"]}), "mask": mkey}

            def fn(out, image_id=image_id, mkey=mkey):
                crisp = load_mask_png(self.store.dir("masks", mkey) / "mask.png")
                regions = extract_regions(crisp, params["min_area"], image_id)
                save_regions(out, regions, crisp.shape)
                return {"count": len(regions), "areas": [r.area for r in regions]}

            items.append(Item(image_id, inputs, fn))
        return items

    def _plan_proposals(self) -> list:
        regions = self.resolve("regions", "proposals")
        images = self.images()
        pp = {**self.cfg.proposals, **{k: self.cfg.regions[k] for k in ("min_overlap", "max_area_ratio", "overlap_mode")}}
        items = []
        for image_id, rkey in regions.items():
            inputs = {**self._base_inputs("proposals", pp), "image": self.digest_of(images[image_id]), "regions": rkey}

            def fn(out, image_id=image_id, rkey=rkey):
                image = load_image(images[image_id])
                props = generate_proposals(image, int(pp["max_count"]), image_id)
                regs = load_regions(self.store.dir("regions", rkey), image_id)
                parts = prune_proposals(props, regs, pp["min_overlap"], pp["max_area_ratio"], pp["overlap_mode"])
                write_json(out / "proposals.json", {
                    "proposals": [p.to_dict() for p in props],
                    "parts": [p.to_dict() for p in parts],
                })
                return {"proposals": len(props), "parts": len(parts)}

            items.append(Item(image_id, inputs, fn))
        return items

    def _class_items(self, stage: str) -> dict:
        out = {}
        for image_id, key in sorted(self.resolve(stage, "").items()):
            out.setdefault(self.class_of(image_id), {})[image_id] = key
        return out

    def _plan_match(self) -> list:
        self.resolve("proposals", "match")
        images = self.images()
        params = self.cfg.matcher
        items = []
        for cls, keys in self._class_items("proposals").items():
            inputs = {
                **self._base_inputs("match", params),
                "proposals": keys,
                "images": {i: self.digest_of(images[i]) for i in keys},
            }

            def fn(out, keys=keys):
                props = {i: load_proposals(self.store.dir("proposals", k)) for i, k in keys.items()}
                arrays = {i: load_image(images[i]) for i in keys}
                cache: dict = {}
                mats = []
                ids = sorted(keys)
                for a in ids:
                    for b in ids:
                        if a == b or not props[a][0] or not props[b][0]:
                            continue
                        mats.append(match_pair(
                            arrays[a], [p.box for p in props[a][0]],
                            arrays[b], [p.box for p in props[b][0]],
                            bandwidth=float(params["bandwidth"]), neighbours=int(params["neighbours"]),
                            ids=(a, b), cache=cache,
                        ))
                tau = params["tau"]
                corr = assemble_corr(mats, {i: [p.index for p in props[i][0]] for i in ids}, tau)
                kept = [(i, p.index) for i in ids for p in props[i][1]]
                pruned = restrict_corr(corr, kept)
                corr.save(out / "corr")
                pruned.save(out / "corr_parts")
                if isinstance(tau, str):
                    tau = percentile_threshold(mats, float(tau.split(":")[1]))
                return {"tau": float(tau), "rows": corr.size, "nnz": corr.nnz, "part_rows": pruned.size, "part_nnz": pruned.nnz}

            items.append(Item(cls, inputs, fn))
        return items

    def _plan_cluster(self) -> list:
        match = self.resolve("match", "cluster")
        self.resolve("proposals", "cluster")
        proposals = self._class_items("proposals")
        images = self.images()
        params = self.cfg.cluster
        items = []
        for cls, mkey in match.items():
            pkeys = proposals.get(cls, {})
            inputs = {**self._base_inputs("cluster", params), "match": mkey, "proposals": pkeys}

            def fn(out, mkey=mkey, pkeys=pkeys):
                corr = CorrMatrix.load(self.store.dir("match", mkey) / "corr_parts")
                boxes = {}
                for i, k in pkeys.items():
                    for p in load_proposals(self.store.dir("proposals", k))[1]:
                        boxes[(i, p.index)] = p
                res = affinity_propagation(
                    corr.matrix,
                    preference=params["preference"],
                    damping=float(params["damping"]),
                    max_iter=int(params["max_iter"]),
                    stable_window=int(params["stable_window"]),
                )
                arrays = {}
                patches = []
                for i, idx in corr.index:
                    if i not in arrays:
                        arrays[i] = load_image(images[i])
                    patches.append(part_patch(arrays[i], boxes[(i, idx)].box, int(params["patch"])))
                verdicts, gmed = prune_clusters(res, patches, float(params["ssim_ratio"]), params["ssim_mode"])
                by_exemplar = {v.exemplar: v for v in verdicts}
                clusters = []
                for e, mem in zip(res.exemplars, res.members):
                    v = by_exemplar.get(e)
                    clusters.append({
                        "exemplar": list(corr.index[e]),
                        "members": [list(corr.index[m]) for m in mem],
                        "ssim_median": None if v is None else v.median,
                        "kept": bool(v is not None and v.kept),
                    })
                write_json(out / "clusters.json", {
                    "converged": res.converged,
                    "iterations": res.iterations,
                    "global_median": gmed,
                    "clusters": clusters,
                })
                return {"clusters": len(clusters), "kept": sum(c["kept"] for c in clusters), "converged": res.converged}

            items.append(Item(cls, inputs, fn))
        return items

    def _tag_inputs(self) -> dict:
        tdir = self.cfg.tags.get("dir")
        if tdir is None:
            return {}
        files = sorted(Path(tdir).rglob("*.y*ml")) + sorted(Path(tdir).rglob("*.json"))
        syn = self.cfg.tags.get("synonyms")
        return {
            "tags": {str(p.relative_to(tdir)): self.digest_of(p) for p in files},
            "synonyms": self.digest_of(syn) if syn else None,
        }

    def _load_class_tags(self, cls: str) -> dict:
        tdir = self.cfg.tags.get("dir")
        syn = load_synonyms(self.cfg.tags["synonyms"]) if self.cfg.tags.get("synonyms") else None
        out = {}
        for image_id in self.images():
            if self.class_of(image_id) != cls:
                continue
            stem = Path(tdir) / image_id
            for ext in (".yaml", ".yml", ".json"):
                p = stem.with_suffix(ext)
                if p.exists():
                    out[image_id] = load_tags(p, syn)
                    break
        return out

    def _plan_render(self) -> list:
        clusters = self.resolve("cluster", "render")
        self.resolve("regions", "render")
        regions = self._class_items("regions")
        images = self.images()
        params = self.cfg.render
        tag_inputs = self._tag_inputs()
        items = []
        for cls, ckey in clusters.items():
            rkeys = regions.get(cls, {})
            inputs = {
                **self._base_inputs("render", params),
                "cluster": ckey,
                "regions": rkeys,
                "images": {i: self.digest_of(images[i]) for i in rkeys},
                "seed": self.cfg.seed,
                **tag_inputs,
            }

            def fn(out, cls=cls, ckey=ckey, rkeys=rkeys):
                with open(self.store.dir("cluster", ckey) / "clusters.json") as fh:
                    data = json.load(fh)
                pkeys = self._class_items("proposals").get(cls, {})
                parts_of = {}
                for i, k in pkeys.items():
                    for p in load_proposals(self.store.dir("proposals", k))[1]:
                        parts_of[(i, p.index)] = p
                region_boxes = {i: load_region_boxes(self.store.dir("regions", k)) for i, k in rkeys.items()}
                summaries = []
                for c in data["clusters"]:
                    if not c["kept"]:
                        continue
                    ex = tuple(c["exemplar"])
                    order = [ex] + [tuple(m) for m in c["members"] if tuple(m) != ex]
                    parts = []
                    for i, idx in order:
                        p = parts_of[(i, idx)]
                        parts.append(SummaryPart(i, tuple(p.box), tuple(region_boxes[i][p.region])))
                    s = Summary(cls, len(summaries), parts)
                    s.grid_path = f"summary_{s.index:02d}.png"
                    save_png(out / s.grid_path, render_summary(s, images, int(params["cell"]), float(params["margin"]), float(params["alpha"])))
                    summaries.append(s)
                mu_s = mu_r = None
                if self.cfg.tags.get("dir"):
                    tags = self._load_class_tags(cls)
                    mu_s, mu_r = jaccard_coherence([s.image_ids for s in summaries], tags, self.cfg.seed)
                write_class_manifest(out / "summaries.json", cls, summaries, _json_safe(mu_s), _json_safe(mu_r))
                return {"K": len(summaries), "sizes": [s.size for s in summaries], "mu_s": _json_safe(mu_s), "mu_r": _json_safe(mu_r)}

            items.append(Item(cls, inputs, fn))
        return items

    def _plan_evaluate(self) -> list:
        masks = self.resolve("masks", "evaluate")
        images = self.images()
        params = self.cfg.mask_params
        smooth = MaskOptParams.smooth_baseline(**vars(params))
        mode = self.cfg.evaluate["class_mode"]
        model_fp = self.oracle.fingerprint()
        items = []
        for image_id, mkey in masks.items():
            inputs = {
                **self._base_inputs("evaluate", {"maskopt": params.to_dict(), "class_mode": mode}),
                "mask": mkey,
                "image": self.digest_of(images[image_id]),
                "model": model_fp,
            }

            def fn(out, image_id=image_id, mkey=mkey):
                image = load_image(images[image_id])
                cid = self.class_id(self.class_of(image_id))
                if mode == "predicted":
                    cid = int(np.argmax(self.oracle.classify(image)))
                mdir = self.store.dir("masks", mkey)
                ours = load_mask_png(mdir / "mask.png")
                lattice = np.load(mdir / "mask.lattice.npy")
                area = int((lattice >= params.threshold).sum())
                sm = extract_mask(self.oracle, image, cid, smooth)
                thresh = matched_area_threshold_baseline(sm.lattice, area, image.shape[:2])
                smooth_img = upsample(sm.lattice, image.shape[:2])
                drops = {
                    "ours": drop_score(self.oracle, image, ours.astype(np.float64), cid, params),
                    "smooth": drop_score(self.oracle, image, smooth_img, cid, params),
                    "thresh": drop_score(self.oracle, image, thresh.astype(np.float64), cid, params),
                }
                np.save(out / "smooth.lattice.npy", sm.lattice)
                Image.fromarray((thresh * 255).astype(np.uint8), mode="L").save(out / "thresh.png")
                return {"class_id": cid, "area": area, "drops": drops}

            items.append(Item(image_id, inputs, fn))
        return items

    def _plan_boost(self) -> list:
        render = self.resolve("render", "boost")
        bp = self.cfg.boost
        if bp.get("eval_dir") is None:
            self._warn("boost: no boost.eval_dir configured, stage skipped")
            return []
        eval_dir = Path(bp["eval_dir"])
        eval_images = {}
        for d in sorted(p for p in eval_dir.iterdir() if p.is_dir()):
            for p in sorted(d.glob("*.png")):
                eval_images[f"{d.name}/{p.stem}"] = p
        images = self.images()
        inputs = {
            **self._base_inputs("boost", {k: v for k, v in bp.items() if k != "eval_dir"}),
            "render": render,
            "images": {i: self.digest_of(p) for i, p in images.items()},
            "eval": {i: self.digest_of(p) for i, p in eval_images.items()},
            "model": self.oracle.fingerprint(),
            "seed": self.cfg.seed,
        }

        def fn(out):
            orc = self.oracle
            labels = orc.labels
            layer = bp["layer"]
            feats = {i: orc.features(load_image(p), layer) for i, p in images.items()}
            train_labels = {i: self.class_id(self.class_of(i)) for i in images}
            summaries = []
            for cls, rkey in sorted(render.items()):
                with open(self.store.dir("render", rkey) / "summaries.json") as fh:
                    data = json.load(fh)
                for s in data["summaries"]:
                    members = sorted({p["image_id"] for p in s["parts"]})
                    summaries.append((self.class_id(cls), s["index"], members))
            classifiers = train_summary_classifiers(
                summaries, feats, train_labels, int(bp["neg_cap"]), tuple(bp["c_grid"]), self.cfg.seed
            )
            save_classifiers(out / "classifiers.json", classifiers, {"layer": layer, "labels": labels})
            ids = sorted(eval_images)
            for i in ids:
                if i.split("/", 1)[0] not in labels:
                    raise ConfigError(f"evaluation label {i.split('/', 1)[0]!r} is not a model label")
            y = np.array([labels.index(i.split("/", 1)[0]) for i in ids])
            arrays = [load_image(eval_images[i]) for i in ids]
            base = np.array([orc.classify(a) for a in arrays])
            n = len(labels)
            if classifiers:
                spec = np.array([specialized_scores(orc.features(a, layer), classifiers, n) for a in arrays])
                covered = covered_classes(classifiers, n)
            else:
                spec = np.zeros_like(base)
                covered = np.zeros(n, bool)
            rng = np.random.default_rng(self.cfg.seed)
            perm = rng.permutation(len(ids))
            n_val = int(round(float(bp["val_fraction"]) * len(ids)))
            val, test = np.sort(perm[:n_val]), np.sort(perm[n_val:])
            if classifiers and n_val:
                alpha, val_acc, curve = select_alpha(base[val], spec[val], y[val], covered, bp["alpha_grid"], bp["mode"])
            else:
                alpha, curve = 0.0, []
                val_acc = float(np.mean(np.argmax(base[val], 1) == y[val])) if n_val else float("nan")
            fused = fuse(base, spec, alpha, covered, bp["mode"]) if classifiers else base
            base_pred, fused_pred = np.argmax(base, 1), np.argmax(fused, 1)
            with open(out / "predictions.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["image_id", "split", "label", "base", "fused"])
                for k, i in enumerate(ids):
                    w.writerow([i, "val" if k in set(val.tolist()) else "test", labels[y[k]], labels[base_pred[k]], labels[fused_pred[k]]])
            with open(out / "class_accuracy.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["class", "n_test", "base", "fused", "delta"])
                for c in range(n):
                    sel = test[y[test] == c]
                    if not sel.size:
                        continue
                    b = float(np.mean(base_pred[sel] == c))
                    f = float(np.mean(fused_pred[sel] == c))
                    w.writerow([labels[c], int(sel.size), repr(b), repr(f), repr(f - b)])
            base_val = float(np.mean(base_pred[val] == y[val])) if n_val else float("nan")
            return {
                "classifiers": len(classifiers),
                "alpha": alpha,
                "alpha_curve": curve,
                "val_base": base_val,
                "val_fused": val_acc,
                "test_base": float(np.mean(base_pred[test] == y[test])) if test.size else None,
                "test_fused": float(np.mean(fused_pred[test] == y[test])) if test.size else None,
                "n_val": int(val.size),
                "n_test": int(test.size),
            }

        return [Item("all", inputs, fn)]


# -- artifact helpers --------------------------------------------------------

def save_regions(out: Path, regions: list, shape) -> None:
    labels = np.zeros(shape, np.uint16)
    for k, r in enumerate(regions, start=1):
        labels |= (r.full_bitmap(shape) * k).astype(np.uint16)
    Image.fromarray(labels).save(out / "regions.png")
    write_json(out / "regions.json", [r.to_dict() for r in regions])


def load_regions(d: Path, image_id: str) -> list:
    labels = np.asarray(Image.open(d / "regions.png"), dtype=np.int64)
    with open(d / "regions.json") as fh:
        meta = json.load(fh)
    out = []
    for k, m in enumerate(meta, start=1):
        x0, y0, x1, y1 = m["box"]
        out.append(Region(image_id, labels[y0:y1, x0:x1] == k, tuple(m["box"]), int(m["area"])))
    return out


def load_region_boxes(d: Path) -> list:
    with open(d / "regions.json") as fh:
        return [tuple(m["box"]) for m in json.load(fh)]


def load_proposals(d: Path) -> tuple:
    with open(d / "proposals.json") as fh:
        data = json.load(fh)
    return [Proposal.from_dict(p) for p in data["proposals"]], [Proposal.from_dict(p) for p in data["parts"]]


def drop_reports(runner: Runner) -> list:
    """Per-method DropReports from the evaluate stage artifacts."""
    entry = runner.stage_info.get("evaluate") or {}
    reports = {m: DropReport(m) for m in ("ours", "smooth", "thresh")}
    for image_id, item in sorted(entry.get("items", {}).items()):
        drops = item["info"]["drops"]
        if any(v is None for v in drops.values()):
            continue
        for m, v in drops.items():
            reports[m].drops[image_id] = v
    return list(reports.values())


def write_reports(runner: Runner) -> Path | None:
    """Drop table (CSV and text) next to the run manifest."""
    if "evaluate" not in runner.stage_info:
        return None
    reports = drop_reports(runner)
    out = runner.cfg.cache / "reports"
    out.mkdir(parents=True, exist_ok=True)
    write_drop_csv(out / "drop_table.csv", reports)
    (out / "drop_table.txt").write_text(format_drop_table(reports) + "\n")
    return out


def run(stage: str, cfg: RunConfig, force: bool = False) -> dict:
    runner = Runner(cfg, force)
    manifest = runner.run(stage)
    write_reports(runner)
    return manifest
