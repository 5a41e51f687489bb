"""Experiment grid: two-stage vs target-only training, adding auxiliary
sources, sampling policy, convergence, margins and post-processing, all on
one config. ``run_ablation`` writes one row per (arm, seed) plus a
median-over-seeds summary."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import postprocess as pp
from .dataset import (SourceManifest, build_records, merge_label_spaces, read_manifest, remap_for_target,
                      split_train_val)
from .embedhead import CKPT_MAGIC, CKPT_VERSION, embed
from .errors import ConfigError, DataError
from .evaluation import build_judgments, evaluate
from .retrieval import EMB_MAGIC, EMB_VERSION, RANKING_VERSION, load_embeddings, rank_gallery
from .synthgen import SynthConfig, SynthDataset, generate, generate_views
from .trainer import StageConfig, margin_probe, stage1_config, stage2_config, train_stage1, train_stage2

log = logging.getLogger(__name__)

TARGET = 1
# the synthetic benchmark uses a narrower embedding than the default head to
# keep the 5-seed grid within minutes on one core
BENCH_EMBED_DIM = 128


@dataclass
class Benchmark:
    synth: SynthConfig = field(default_factory=SynthConfig)
    val_classes: int = 10
    queries_per_class: int | None = None
    stage1: StageConfig = field(default_factory=lambda: stage1_config(embed_dim=BENCH_EMBED_DIM))
    stage2: StageConfig = field(default_factory=lambda: stage2_config(embed_dim=BENCH_EMBED_DIM))
    target: int = TARGET

    def with_seed(self, seed: int) -> "Benchmark":
        return replace(self, synth=replace(self.synth, seed=seed),
                       stage1=replace(self.stage1, seed=seed), stage2=replace(self.stage2, seed=seed))


@dataclass
class Prepared:
    data: SynthDataset
    split: object
    target_train: SourceManifest


def prepare(bench: Benchmark, data: SynthDataset | None = None, seed: int | None = None) -> Prepared:
    """Split the target source. ``data`` defaults to ``generate(bench.synth)``
    and the split seed to ``bench.synth.seed``."""
    data = generate(bench.synth) if data is None else data
    seed = bench.synth.seed if seed is None else seed
    split = split_train_val(data.manifest(bench.target), bench.val_classes, seed, bench.queries_per_class)
    return Prepared(data, split, SourceManifest(bench.target, split.train))


def _features_for(data, manifest):
    pos = {r.image_id: i for i, r in enumerate(data.manifest(manifest.source_id).records)}
    return data.features[manifest.source_id][[pos[r.image_id] for r in manifest.records]]


def validation_map(params, prep: Prepared, ks=(1, 5, 10), max_rank=None):
    """mAP / Rank@K of held-out target classes against the full training gallery.
    ``params=None`` ranks the raw features."""
    src = prep.target_train.source_id
    q_man = SourceManifest(src, prep.split.val_query)
    g_man = SourceManifest(src, prep.split.val_gallery)
    q, g = _features_for(prep.data, q_man), _features_for(prep.data, g_man)
    if params is not None:
        q, g = embed(params, q), embed(params, g)
    judg = build_judgments([r.local_class for r in q_man.records], [r.local_class for r in g_man.records],
                           query_ids=[r.image_id for r in q_man.records],
                           gallery_ids=[r.image_id for r in g_man.records])
    return evaluate(rank_gallery(q, g), judg, ks, max_rank)


def _pooled(prep: Prepared, aux):
    mans = [prep.target_train] + [prep.data.manifest(a) for a in aux]
    space = merge_label_spaces(mans)
    feats = {m.source_id: _features_for(prep.data, m) for m in mans}
    return build_records(mans, space, feats), space


def run_two_stage(prep: Prepared, bench: Benchmark, aux, sampler: str = "naive"):
    records, space = _pooled(prep, aux)
    p1, log1 = train_stage1(records, space, replace(bench.stage1, sampler=sampler))
    tspace, table = remap_for_target(space, prep.target_train.source_id)
    target_records = [r for r in records if r.source_id == prep.target_train.source_id]
    p2, log2 = train_stage2(p1, target_records, tspace, bench.stage2, translate=table)
    return {"stage1": p1, "stage2": p2, "log1": log1, "log2": log2, "space": space, "table": table,
            "target_records": target_records}


def run_target_only(prep: Prepared, bench: Benchmark, epochs: int | None = None):
    records, space = _pooled(prep, ())
    cfg = bench.stage1 if epochs is None else replace(bench.stage1, epochs=epochs)
    params, tlog = train_stage1(records, space, cfg)
    return {"params": params, "log": tlog, "records": records, "space": space}


@dataclass
class PostBenchmark:
    """Held-out identities; each identity's first camera track is its query set."""
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(
        sources=1, identities=[60], images=[720], cameras=[8], noise=0.5, viewpoint_scale=0.5))
    models: int = 2
    views: int = 2
    model_noise: float = 0.6
    view_noise: float = 0.8
    config: pp.PipelineConfig = field(default_factory=lambda: pp.PipelineConfig(
        dbscan=pp.DbscanConfig(eps=0.4), protocol="cross-camera"))

    def with_seed(self, seed: int) -> "PostBenchmark":
        return replace(self, synth=replace(self.synth, seed=seed))


def post_inputs(bench: PostBenchmark) -> pp.PipelineInputs:
    data = generate(bench.synth)
    recs = data.manifests[0].records
    first: dict = {}
    q_idx, g_idx = [], []
    for i, r in enumerate(recs):
        cam, t0 = first.setdefault(r.local_class, (r.camera_id, r.timestamp))
        same_track = r.camera_id == cam and 0 <= r.timestamp - t0 < bench.synth.track_length
        (q_idx if same_track else g_idx).append(i)
    views = generate_views(data.features[1], bench.models, bench.views, bench.model_noise,
                           bench.view_noise, bench.synth.seed)
    meta = {}
    for name, idx in (("query", q_idx), ("gallery", g_idx)):
        meta[f"{name}_labels"] = [recs[i].local_class for i in idx]
        meta[f"{name}_cams"] = [recs[i].camera_id for i in idx]
        meta[f"{name}_times"] = [recs[i].timestamp for i in idx]
        meta[f"{name}_ids"] = [recs[i].image_id for i in idx]
    return pp.PipelineInputs([[v[q_idx] for v in m] for m in views],
                             [[v[g_idx] for v in m] for m in views], **meta)


def inputs_from_files(query_paths, gallery_paths) -> pp.PipelineInputs:
    """``*_paths[model][view]`` embedding files. Labels, cameras, timestamps
    and ids come from the first file's sidecar (keys label, camera_id,
    timestamp, image_id)."""
    q = [[load_embeddings(p) for p in model] for model in query_paths]
    g = [[load_embeddings(p) for p in model] for model in gallery_paths]
    for stores in (q, g):
        if len({len(s) for m in stores for s in m}) != 1:
            raise DataError("all models and views must have the same number of rows")
    if len(q) != len(g) or any(len(a) != len(b) for a, b in zip(q, g)):
        raise DataError("query and gallery need the same models and views")

    def col(store, key):
        vals = store.column(key)
        return None if any(v is None for v in vals) else vals

    meta = {}
    for name, stores in (("query", q), ("gallery", g)):
        first = stores[0][0]
        meta[f"{name}_labels"] = col(first, "label")
        meta[f"{name}_cams"] = col(first, "camera_id")
        meta[f"{name}_times"] = col(first, "timestamp")
        meta[f"{name}_ids"] = col(first, "image_id")
    return pp.PipelineInputs([[s.embeddings for s in m] for m in q], [[s.embeddings for s in m] for m in g], **meta)


def run_postprocess(bench: PostBenchmark, steps=pp.STEP_ORDER):
    return pp.pipeline(post_inputs(bench), steps, bench.config)


# ablation grid

def version_info() -> str:
    lines = {
        "package": "vreid",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "embedding_format": f"{EMB_MAGIC.decode()} v{EMB_VERSION}",
        "checkpoint_format": f"{CKPT_MAGIC.decode()} v{CKPT_VERSION}",
        "ranking_format": RANKING_VERSION,
    }
    return "".join(f"{k}={v}\n" for k, v in lines.items())


_STAGE_SCHEMA = {"type": "object", "additionalProperties": False, "properties": {
    "epochs": {"type": "integer", "minimum": 0}, "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "minimum": 0}, "milestones": {"type": "array", "items": {"type": "integer"}},
    "gamma": {"type": "number"}, "momentum": {"type": "number"}, "weight_decay": {"type": "number"},
    "seed": {"type": "integer"}, "sampler": {"enum": ["naive", "balanced"]},
    "draws": {"type": ["integer", "null"], "minimum": 1}, "embed_dim": {"type": "integer", "minimum": 1}}}

_PATHS = {"type": "array", "items": {"type": "array", "items": {"type": "string"}, "minItems": 1}}

_POST_SCHEMA = {"type": "object", "additionalProperties": False, "properties": {
    "synth": {"type": "object"}, "models": {"type": "integer", "minimum": 1},
    "views": {"type": "integer", "minimum": 1}, "model_noise": {"type": "number", "minimum": 0},
    "view_noise": {"type": "number", "minimum": 0}, "query": _PATHS, "gallery": _PATHS,
    "dbscan": {"type": "object", "additionalProperties": False,
               "properties": {"eps": {"type": "number"}, "min_pts": {"type": "integer"}}},
    "rerank": {"type": "object", "additionalProperties": False,
               "properties": {"k1": {"type": "integer"}, "k2": {"type": "integer"}, "lambda": {"type": "number"}}},
    "tau": {"type": ["number", "null"]}, "qe_inclusive": {"type": "boolean"},
    "protocol": {"enum": ["plain", "cross-camera"]}}}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["output_dir"],
    "properties": {
        "output_dir": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "data": {"type": "object", "additionalProperties": False, "properties": {
            "synth": {"type": "object"},
            "manifests": {"type": "array", "minItems": 1, "items": {
                "type": "object", "additionalProperties": False, "required": ["path", "source_id", "features"],
                "properties": {"path": {"type": "string"}, "source_id": {"type": "integer", "minimum": 1},
                               "features": {"type": "string"}}}},
            "target": {"type": "integer", "minimum": 1},
            "val_classes": {"type": "integer", "minimum": 1},
            "queries_per_class": {"type": ["integer", "null"], "minimum": 1}}},
        "stage1": _STAGE_SCHEMA,
        "stage2": _STAGE_SCHEMA,
        "post": _POST_SCHEMA,
        "eval": {"type": "object", "additionalProperties": False, "properties": {
            "ks": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
            "max_rank": {"type": ["integer", "null"], "minimum": 1}}},
        "arms": {"type": "array", "items": {"oneOf": [
            {"type": "object", "additionalProperties": False, "required": ["name", "kind"], "properties": {
                "name": {"type": "string"}, "kind": {"const": "train"},
                "aux": {"type": "array", "items": {"type": "integer"}},
                "two_stage": {"type": "boolean"}, "sampler": {"enum": ["naive", "balanced"]},
                "synth": {"type": "object"}, "stage1": _STAGE_SCHEMA, "stage2": _STAGE_SCHEMA}},
            {"type": "object", "additionalProperties": False, "required": ["name", "kind"], "properties": {
                "name": {"type": "string"}, "kind": {"const": "post"},
                "steps": {"type": "array", "items": {"type": "string"}}, "post": _POST_SCHEMA}},
        ]}},
    },
}

_LONG_TAIL = {"long_tail_exponent": 2.0}


def default_arms() -> list[dict]:
    """The grid behind the acceptance experiments."""
    arms = [
        {"name": "target_only", "kind": "train", "aux": []},
        {"name": "two_stage", "kind": "train", "aux": [2, 3, 4], "two_stage": True},
        {"name": "stage1_T+2", "kind": "train", "aux": [2]},
        {"name": "stage1_T+3", "kind": "train", "aux": [3]},
        {"name": "stage1_T+4", "kind": "train", "aux": [4]},
        {"name": "stage1_T+2+3", "kind": "train", "aux": [2, 3]},
        {"name": "stage1_all", "kind": "train", "aux": [2, 3, 4]},
        # from-scratch target training on the fine-tuning schedule
        {"name": "scratch_12", "kind": "train", "aux": [], "stage1": {"epochs": 12, "milestones": [8]}},
        {"name": "longtail_naive", "kind": "train", "aux": [2, 3, 4], "sampler": "naive", "synth": _LONG_TAIL},
        {"name": "longtail_balanced", "kind": "train", "aux": [2, 3, 4], "sampler": "balanced",
         "synth": _LONG_TAIL},
    ]
    steps = list(pp.STEP_ORDER)
    for i in range(len(steps) + 1):
        name = "post_base" if i == 0 else f"post_{steps[i - 1]}"
        arms.append({"name": name, "kind": "post", "steps": steps[:i]})
    arms.append({"name": "post_rerank_only", "kind": "post", "steps": ["rerank"]})
    return arms


def default_experiment(output_dir: str = "ablation") -> dict:
    return {"output_dir": output_dir, "seeds": [0, 1, 2, 3, 4], "arms": default_arms()}


def _post_json(b: PostBenchmark) -> dict:
    c = b.config
    return {"synth": b.synth.to_json(), "models": b.models, "views": b.views,
            "model_noise": b.model_noise, "view_noise": b.view_noise,
            "dbscan": {"eps": c.dbscan.eps, "min_pts": c.dbscan.min_pts},
            "rerank": {"k1": c.rerank.k1, "k2": c.rerank.k2, "lambda": c.rerank.lam},
            "tau": None if math.isinf(c.tau) else c.tau, "qe_inclusive": c.qe_inclusive, "protocol": c.protocol}


def _merge(base: dict, over: dict | None) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


_PER_SOURCE = ("identities", "images", "cameras", "domain_distortion")


def _synth_merge(base: dict, over: dict | None) -> dict:
    """Overlay a partial synth config; per-source defaults the override does
    not set are broadcast when uniform, so changing ``sources`` alone works."""
    out = _merge(base, over)
    n = out.get("sources", 1)
    for key in _PER_SOURCE:
        val = out.get(key)
        if key in (over or {}) or not isinstance(val, list) or len(val) == n:
            continue
        if len(set(val)) != 1:
            raise ConfigError(f"synth override sets sources={n} but not {key} (default {val})")
        out[key] = val[0]
    return SynthConfig.from_json(out).to_json()


def _post_merge(base: dict, over: dict | None) -> dict:
    out = _merge(base, over)
    out["synth"] = _synth_merge(base["synth"], (over or {}).get("synth"))
    return out


def resolve_experiment(obj: dict) -> dict:
    """Validate against the schema and fill every default, so the returned
    dict is a complete record of what will run."""
    try:
        jsonschema.validate(obj, EXPERIMENT_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"experiment config invalid at {path}: {e.message}") from None
    bench, post = Benchmark(), PostBenchmark()
    data = obj.get("data", {})
    ev = obj.get("eval", {})
    res = {
        "output_dir": obj["output_dir"],
        "seeds": list(obj.get("seeds", [0, 1, 2, 3, 4])),
        "data": {"target": data.get("target", TARGET), "val_classes": data.get("val_classes", bench.val_classes),
                 "queries_per_class": data.get("queries_per_class", bench.queries_per_class)},
        "stage1": _merge(bench.stage1.to_json(), obj.get("stage1")),
        "stage2": _merge(bench.stage2.to_json(), obj.get("stage2")),
        "post": _post_merge(_post_json(post), obj.get("post")),
        "eval": {"ks": list(ev.get("ks", [1, 5, 10])), "max_rank": ev.get("max_rank")},
        "arms": [],
    }
    if "manifests" in data:
        if "synth" in data:
            raise ConfigError("data takes either synth or manifests, not both")
        res["data"]["manifests"] = copy.deepcopy(data["manifests"])
    else:
        res["data"]["synth"] = _synth_merge(bench.synth.to_json(), data.get("synth"))
    names = set()
    for arm in obj.get("arms", default_arms()):
        if arm["name"] in names:
            raise ConfigError(f"duplicate arm name {arm['name']!r}")
        names.add(arm["name"])
        if arm["kind"] == "train":
            if arm.get("synth") and "manifests" in data:
                raise ConfigError(f"arm {arm['name']!r}: synth overrides need synthetic data")
            full = {"name": arm["name"], "kind": "train", "aux": list(arm.get("aux", [])),
                    "two_stage": arm.get("two_stage", False), "sampler": arm.get("sampler", "naive"),
                    "synth": copy.deepcopy(arm.get("synth", {})),
                    "stage1": _merge(res["stage1"], arm.get("stage1")),
                    "stage2": _merge(res["stage2"], arm.get("stage2"))}
        else:
            full = {"name": arm["name"], "kind": "post", "steps": pp.canonical_steps(arm.get("steps", [])),
                    "post": _post_merge(res["post"], arm.get("post"))}
        res["arms"].append(full)
    _check_inputs(res)
    return res


def _check_inputs(res: dict) -> None:
    """Fail before any compute when referenced inputs are missing or unusable."""
    data = res["data"]
    missing = []
    if "manifests" in data:
        ids = [m["source_id"] for m in data["manifests"]]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate source_id in data.manifests")
        for m in data["manifests"]:
            missing += [p for p in (m["path"], m["features"]) if not Path(p).exists()]
        available = set(ids)
    else:
        synth = SynthConfig.from_json(data["synth"])
        available = set(range(1, synth.sources + 1))
    if data["target"] not in available:
        raise ConfigError(f"target source {data['target']} is not available")
    for arm in res["arms"]:
        if arm["kind"] == "train":
            StageConfig.from_json(arm["stage1"])
            StageConfig.from_json(arm["stage2"])
            if arm["synth"]:
                _synth_merge(data["synth"], arm["synth"])
            bad = [a for a in arm["aux"] if a not in available or a == data["target"]]
            if bad:
                raise ConfigError(f"arm {arm['name']!r}: unusable auxiliary sources {bad}")
        else:
            post = arm["post"]
            if bool(post.get("query")) != bool(post.get("gallery")):
                raise ConfigError(f"arm {arm['name']!r}: post inputs need both query and gallery files")
            for paths in post.get("query", []) + post.get("gallery", []):
                missing += [p for p in paths if not Path(p).exists()]
            _post_bench(post, 0)
    if missing:
        raise DataError(f"missing input files: {sorted(set(missing))}")


def _post_bench(post: dict, seed: int) -> PostBenchmark:
    cfg = pp.PipelineConfig(
        dbscan=pp.DbscanConfig(**post["dbscan"]),
        rerank=pp.RerankConfig(post["rerank"]["k1"], post["rerank"]["k2"], post["rerank"]["lambda"]),
        tau=math.inf if post["tau"] is None else float(post["tau"]),
        qe_inclusive=post["qe_inclusive"], protocol=post["protocol"])
    synth = SynthConfig.from_json(post["synth"])
    return PostBenchmark(replace(synth, seed=seed), post["models"], post["views"], post["model_noise"],
                         post["view_noise"], cfg)


def load_file_data(manifests: list) -> SynthDataset:
    """Train-split records and feature rows of manifest/embedding file pairs."""
    mans, feats = [], {}
    for m in manifests:
        full = read_manifest(m["path"], m["source_id"])
        store = load_embeddings(m["features"])
        if len(store) != len(full.records):
            raise DataError(f"{m['features']}: {len(store)} rows for {len(full.records)} manifest records")
        keep = [i for i, r in enumerate(full.records) if r.split == "train"]
        mans.append(full.subset("train"))
        feats[m["source_id"]] = store.embeddings[keep]
    return SynthDataset(None, mans, feats)


def _metric_row(rep, ks) -> dict:
    row = {"mAP": rep.mAP}
    for k in ks:
        row[f"rank{k}"] = rep.cmc[k]
    return row


def _target_margin(params, prep: Prepared, space=None) -> float:
    """Mean margin on the target training images against target-class weights only."""
    feats = _features_for(prep.data, prep.target_train)
    src = prep.target_train.source_id
    if space is None:
        space = merge_label_spaces([prep.target_train])
    labels = [space.encode(src, r.local_class) for r in prep.target_train.records]
    return margin_probe(params, feats, labels, space.classes_of(src)).mean


class _DataCache:
    """One generated (or loaded) data set per (seed, synth overrides)."""

    def __init__(self, res):
        self.res = res
        self.entries: dict = {}
        self.files = None

    def get(self, seed: int, overrides: dict) -> tuple[Prepared, Benchmark]:
        d = self.res["data"]
        key = (seed, json.dumps(overrides, sort_keys=True))
        if key not in self.entries:
            if "manifests" in d:
                if self.files is None:
                    self.files = load_file_data(d["manifests"])
                bench = Benchmark(val_classes=d["val_classes"], queries_per_class=d["queries_per_class"],
                                  target=d["target"])
                prep = prepare(bench, self.files, seed)
            else:
                synth = replace(SynthConfig.from_json(_synth_merge(d["synth"], overrides)), seed=seed)
                bench = Benchmark(synth=synth, val_classes=d["val_classes"],
                                  queries_per_class=d["queries_per_class"], target=d["target"])
                prep = prepare(bench)
            self.entries[key] = (prep, bench)
        return self.entries[key]


def _run_train_arm(arm: dict, seed: int, cache: _DataCache, ev: dict) -> dict:
    prep, bench = cache.get(seed, arm["synth"])
    s1 = replace(StageConfig.from_json(arm["stage1"]), seed=seed, sampler=arm["sampler"])
    s2 = replace(StageConfig.from_json(arm["stage2"]), seed=seed)
    bench = replace(bench, stage1=s1, stage2=s2)
    ks = tuple(ev["ks"])
    if arm["two_stage"]:
        out = run_two_stage(prep, bench, tuple(arm["aux"]), arm["sampler"])
        row = _metric_row(validation_map(out["stage2"], prep, ks, ev["max_rank"]), ks)
        row["stage1_mAP"] = validation_map(out["stage1"], prep, ks, ev["max_rank"]).mAP
        row["loss"] = out["log2"].losses[-1] if out["log2"].epochs else math.nan
        row["margin"] = _target_margin(out["stage2"], prep)
    else:
        records, space = _pooled(prep, tuple(arm["aux"]))
        params, tlog = train_stage1(records, space, s1)
        row = _metric_row(validation_map(params, prep, ks, ev["max_rank"]), ks)
        row["stage1_mAP"] = row["mAP"]
        row["loss"] = tlog.losses[-1] if tlog.epochs else math.nan
        row["margin"] = _target_margin(params, prep, space)
    return row


def _run_post_arm(arm: dict, seed: int, ev: dict) -> dict:
    post = arm["post"]
    bench = _post_bench(post, seed)
    bench = replace(bench, config=replace(bench.config, ks=tuple(ev["ks"]), max_rank=ev["max_rank"]))
    if post.get("query"):
        inputs = inputs_from_files(post["query"], post["gallery"])
    else:
        inputs = post_inputs(bench)
    _, report = pp.pipeline(inputs, arm["steps"], bench.config)
    last = report[-1]
    if "mAP" not in last:
        raise DataError(f"arm {arm['name']!r}: post-processing inputs carry no labels")
    row = {"mAP": last["mAP"]}
    for k in ev["ks"]:
        row[f"rank{k}"] = last[f"rank{k}"]
    row["mean_candidates"] = last["mean_candidates"]
    return row


def columns(res: dict) -> list[str]:
    ks = [f"rank{k}" for k in res["eval"]["ks"]]
    return ["arm", "kind", "seed", "mAP"] + ks + ["stage1_mAP", "loss", "margin", "mean_candidates"]


def run_grid(res: dict) -> list[dict]:
    """Rows for every (arm, seed), in config order."""
    cache = _DataCache(res)
    rows = []
    for arm in res["arms"]:
        for seed in res["seeds"]:
            t0 = time.perf_counter()
            if arm["kind"] == "train":
                metrics = _run_train_arm(arm, seed, cache, res["eval"])
            else:
                metrics = _run_post_arm(arm, seed, res["eval"])
            log.info("arm %s seed %d: mAP %.4f (%.1fs)", arm["name"], seed, metrics["mAP"],
                     time.perf_counter() - t0)
            rows.append({"arm": arm["name"], "kind": arm["kind"], "seed": seed, **metrics})
    return rows


def summarize(rows: list[dict], res: dict) -> list[dict]:
    """Median over seeds of every numeric column, one row per arm."""
    out = []
    for arm in res["arms"]:
        mine = [r for r in rows if r["arm"] == arm["name"]]
        row = {"arm": arm["name"], "kind": arm["kind"], "seeds": len(mine)}
        for c in columns(res)[3:]:
            vals = [r[c] for r in mine if r.get(c) is not None and not math.isnan(r[c])]
            row[c] = float(np.median(vals)) if vals else None
        out.append(row)
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _csv_text(rows, cols) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def _md_table(rows, cols) -> str:
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(_fmt(r.get(c)) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def write_report(res: dict, rows: list[dict], summary: list[dict]) -> dict:
    """Write ablation.md, rows.csv, summary.csv and resolved_config.json.
    Contents depend only on the config and the results, never on wall time."""
    out = Path(res["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cols = columns(res)
    scols = ["arm", "kind", "seeds"] + cols[3:]
    resolved = json.dumps(res, indent=1, sort_keys=True)
    header = "".join(f"# {line}\n" for line in version_info().splitlines())
    files = {
        "resolved_config.json": resolved + "\n",
        "rows.csv": header + _csv_text(rows, cols),
        "summary.csv": header + _csv_text(summary, scols),
        "ablation.md": ("# Ablation report\n\n## Versions\n\n```\n" + version_info() + "```\n\n"
                        "## Resolved config\n\n```json\n" + resolved + "\n```\n\n"
                        "## Median over seeds\n\n" + _md_table(summary, scols) +
                        "\n## Per seed\n\n" + _md_table(rows, cols)),
    }
    paths = {}
    for name, text in files.items():
        (out / name).write_text(text)
        paths[name] = out / name
    return paths


def run_ablation(cfg: dict) -> dict:
    """Validate, run every (arm, seed) and write the report files.
    Returns {"config", "rows", "summary", "files"}."""
    res = resolve_experiment(cfg)
    rows = run_grid(res)
    summary = summarize(rows, res)
    files = write_report(res, rows, summary)
    return {"config": res, "rows": rows, "summary": summary, "files": files}
