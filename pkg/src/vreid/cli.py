"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import postprocess as pp
from .dataset import build_records, merge_label_spaces, read_manifest, save_space, write_manifest
from .embedhead import embed, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, ReidError
from .evaluation import build_judgments, evaluate
from .experiments import default_experiment, inputs_from_files, run_ablation, version_info
from .retrieval import EmbeddingStore, load_embeddings, load_ranking, rank_gallery, save_embeddings, save_ranking
from .synthgen import SynthConfig, generate, save_config
from .trainer import StageConfig, stage1_config, stage2_config, train_stage1, train_stage2

log = logging.getLogger("vreid")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def _manifest_arg(text: str, position: int):
    """``path`` or ``path:source_id``; the id defaults to the 1-based position."""
    path, sep, sid = text.rpartition(":")
    if sep and sid.isdigit():
        return path, int(sid)
    return text, position + 1


def _manifests(args_list):
    out = []
    for i, text in enumerate(args_list):
        path, sid = _manifest_arg(text, i)
        if not Path(path).exists():
            raise DataError(f"{path}: no such manifest")
        out.append(read_manifest(path, sid))
    return out


def _features(paths, manifests) -> dict:
    if len(paths) != len(manifests):
        raise ConfigError(f"{len(paths)} feature files for {len(manifests)} manifests")
    feats = {}
    for path, man in zip(paths, manifests):
        store = load_embeddings(path)
        if len(store) != len(man.records):
            raise DataError(f"{path}: {len(store)} rows for {len(man.records)} manifest records")
        keep = [i for i, r in enumerate(man.records) if r.split == "train"]
        feats[man.source_id] = store.embeddings[keep].astype(np.float64)
    return feats


def cmd_merge(args):
    space = merge_label_spaces(_manifests(args.manifest))
    save_space(space, args.out)
    print(f"classes={space.num_classes} sources={','.join(map(str, space.sources))}")


def cmd_synth(args):
    cfg = SynthConfig.from_json(_read_json(args.config)) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = SynthConfig.from_json({**cfg.to_json(), "seed": args.seed})
    data = generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for man in data.manifests:
        d = man.source_id
        write_manifest(man, out / f"source_{d}.jsonl")
        meta = [{"image_id": r.image_id, "label": r.local_class, "camera_id": r.camera_id,
                 "timestamp": r.timestamp, "source_id": d} for r in man.records]
        save_embeddings(EmbeddingStore(data.features[d], meta, normalized=True), out / f"source_{d}.rfeb")
    save_config(cfg, out / "synth_config.json")
    print(f"wrote {len(data.manifests)} sources to {out}")


def _stage_config(args) -> StageConfig:
    base = stage1_config() if args.stage == 1 else stage2_config()
    cfg = StageConfig.from_json(_read_json(args.config), base) if args.config else base
    if args.seed is not None:
        cfg = StageConfig.from_json({"seed": args.seed}, cfg)
    return cfg


def cmd_train(args):
    cfg = _stage_config(args)
    full = _manifests(args.manifest)
    manifests = [m.subset("train") for m in full]
    feats = _features(args.features, full)
    init = load_checkpoint(args.resume) if args.resume else None
    if args.stage == 1:
        space = merge_label_spaces(manifests)
        records = build_records(manifests, space, feats)
        params, tlog = train_stage1(records, space, cfg, init)
    else:
        if init is None:
            raise ConfigError("stage 2 needs --resume with a stage-1 checkpoint")
        target = args.target if args.target is not None else manifests[0].source_id
        mans = [m for m in manifests if m.source_id == target]
        if not mans:
            raise ConfigError(f"target source {target} is not among the manifests")
        space = merge_label_spaces(mans)
        records = build_records(mans, space, {target: feats[target]})
        params, tlog = train_stage2(init, records, space, cfg)
    save_checkpoint(params, args.out)
    save_space(space, args.space_out or f"{args.out}.space.json")
    if args.log:
        tlog.write_csv(args.log)
    last = tlog.epochs[-1].loss if tlog.epochs else math.nan
    print(f"stage={args.stage} epochs={len(tlog.epochs)} final_loss={last:.6f} classes={space.num_classes}")


def cmd_embed(args):
    params = load_checkpoint(args.checkpoint)
    store = load_embeddings(args.features)
    if store.dim != params.d_in:
        raise DataError(f"{args.features}: dim {store.dim} != checkpoint d_in {params.d_in}")
    f = embed(params, store.embeddings.astype(np.float64))
    save_embeddings(EmbeddingStore(f, store.metadata, normalized=False), args.out)


def _ids(store):
    ids = store.column("image_id")
    return None if any(i is None for i in ids) else ids


def cmd_rank(args):
    q, g = load_embeddings(args.query), load_embeddings(args.gallery)
    ranking = rank_gallery(q, g)
    if args.top:
        ranking = ranking.keep([np.arange(len(i)) < args.top for i in ranking.indices], "top")
    save_ranking(ranking, args.out, _ids(q), _ids(g))


def _cam_clusters(path, ids, side):
    if ids is None:
        raise DataError(f"--cam-clusters needs image_id metadata in the {side} files")
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    obj = json.loads(line)
                    table[str(obj["image_id"])] = int(obj["cluster"])
                except (KeyError, ValueError, TypeError) as e:
                    raise DataError(f"{path}:{lineno}: malformed cam-cluster record ({e})") from None
    missing = [i for i in ids if i not in table]
    if missing:
        raise DataError(f"{path}: no cam-cluster for {len(missing)} {side} images, e.g. {missing[:5]}")
    return [table[i] for i in ids]


def cmd_post(args):
    if len(args.query) != len(args.gallery):
        raise ConfigError("give one --query and one --gallery per model")
    inputs = inputs_from_files([q.split(",") for q in args.query], [g.split(",") for g in args.gallery])
    if args.cam_clusters:
        inputs.query_cams = _cam_clusters(args.cam_clusters, inputs.query_ids, "query")
        inputs.gallery_cams = _cam_clusters(args.cam_clusters, inputs.gallery_ids, "gallery")
    steps = [s for s in args.steps.split(",") if s] if args.steps else []
    cfg = pp.PipelineConfig(
        dbscan=pp.DbscanConfig(args.dbscan_eps, args.dbscan_min_pts),
        rerank=pp.RerankConfig(args.k1, args.k2, args.lam),
        tau=math.inf if args.tau is None else args.tau,
        qe_inclusive=args.qe_inclusive,
        protocol=args.protocol,
        ks=_ks(args.k),
    )
    if cfg.tau < 0:
        raise ConfigError(f"tau must be >= 0, got {cfg.tau}")
    ranking, report = pp.pipeline(inputs, steps, cfg)
    save_ranking(ranking, args.out, inputs.query_ids, inputs.gallery_ids)
    if args.report:
        Path(args.report).write_text(json.dumps(
            {"steps": pp.canonical_steps(steps), "config": cfg.to_json(), "rows": report},
            indent=1, sort_keys=True) + "\n")
    for row in report:
        extra = f" mAP={row['mAP']:.4f}" if "mAP" in row else ""
        print(f"{row['step']}: candidates={row['total_candidates']}{extra}")


def _ks(text) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError:
        raise ConfigError(f"bad --k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("every K must be >= 1")
    return ks


def cmd_eval(args):
    ranking, query_ids, gallery_ids = load_ranking(args.ranking)
    if gallery_ids is None or any(q is None for q in query_ids):
        raise DataError(f"{args.ranking}: evaluation needs query and gallery ids")
    lookup = {}
    for man in _manifests(args.manifest):
        for r in man.records:
            lookup.setdefault(r.image_id, (man.source_id, r))

    def meta(ids, side):
        missing = [i for i in ids if i not in lookup]
        if missing:
            raise DataError(f"{len(missing)} {side} ids not in the manifests, e.g. {missing[:5]}")
        return ([(lookup[i][0], lookup[i][1].local_class) for i in ids],
                [lookup[i][1].camera_id for i in ids])

    ql, qc = meta(query_ids, "query")
    gl, gc = meta(gallery_ids, "gallery")
    # tuples compare as labels through a shared integer code
    codes = {key: n for n, key in enumerate(sorted(set(ql) | set(gl)))}
    judg = build_judgments([codes[k] for k in ql], [codes[k] for k in gl], qc, gc, args.protocol,
                           query_ids, gallery_ids)
    rep = evaluate(ranking, judg, _ks(args.k), args.max_rank)
    text = json.dumps({**rep.to_json(), "protocol": args.protocol, "max_rank": args.max_rank},
                      indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.csv:
        rep.write_csv(args.csv, query_ids)


def cmd_ablate(args):
    cfg = _read_json(args.config) if args.config else default_experiment()
    if args.out:
        cfg["output_dir"] = args.out
    if args.seeds:
        cfg["seeds"] = [int(s) for s in args.seeds.split(",")]
    result = run_ablation(cfg)
    for row in result["summary"]:
        print(f"{row['arm']}: mAP={row['mAP']:.4f}")
    print(f"report: {result['files']['ablation.md']}")


def cmd_version(args):
    sys.stdout.write(version_info())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vreid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("merge", help="merge source manifests into one label space")
    s.add_argument("--manifest", action="append", required=True, help="path[:source_id], repeatable")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("synth", help="generate a synthetic multi-source benchmark")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train stage 1 (pooled sources) or stage 2 (target fine-tuning)")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--manifest", action="append", required=True, help="path[:source_id], repeatable")
    s.add_argument("--features", action="append", required=True, help="embedding file per manifest")
    s.add_argument("--config", help="stage config JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--target", type=int, help="stage 2 target source id (default: first manifest)")
    s.add_argument("--resume", help="initial checkpoint (required for stage 2)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--space-out", help="label space JSON (default: <out>.space.json)")
    s.add_argument("--log", help="per-epoch CSV log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("embed", help="embed features with a trained head")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("rank", help="cosine-rank a gallery for every query")
    s.add_argument("--query", required=True)
    s.add_argument("--gallery", required=True)
    s.add_argument("--top", type=int, help="keep only the top candidates")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("post", help="run post-processing steps on query/gallery embeddings")
    s.add_argument("--query", action="append", required=True, help="comma-separated view files, one flag per model")
    s.add_argument("--gallery", action="append", required=True, help="same layout as --query")
    s.add_argument("--steps", default="", help="comma-separated, e.g. qe,camver,temporal,rerank")
    s.add_argument("--dbscan-eps", type=float, default=pp.DbscanConfig.eps)
    s.add_argument("--dbscan-min-pts", type=int, default=pp.DbscanConfig.min_pts)
    s.add_argument("--qe-inclusive", action="store_true", help="include the query itself in its expansion mean")
    s.add_argument("--tau", type=float, help="temporal window in seconds (default: unbounded)")
    s.add_argument("--k1", type=int, default=pp.RerankConfig.k1)
    s.add_argument("--k2", type=int, default=pp.RerankConfig.k2)
    s.add_argument("--lambda", dest="lam", type=float, default=pp.RerankConfig.lam)
    s.add_argument("--cam-clusters", help="JSON-lines image_id -> cluster, replaces camera ids")
    s.add_argument("--protocol", choices=("plain", "cross-camera"), default="plain")
    s.add_argument("--k", default="1,5,10")
    s.add_argument("--report", help="per-step report JSON")
    s.add_argument("--out", required=True, help="final ranking JSON-lines")
    s.set_defaults(func=cmd_post)

    s = sub.add_parser("eval", help="mAP and Rank@K of a ranking file")
    s.add_argument("--ranking", required=True)
    s.add_argument("--manifest", action="append", required=True, help="path[:source_id], repeatable")
    s.add_argument("--k", default="1,5,10")
    s.add_argument("--protocol", choices=("plain", "cross-camera"), default="plain")
    s.add_argument("--max-rank", type=int)
    s.add_argument("--out", help="report JSON (default: stdout)")
    s.add_argument("--csv", help="per-query CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run an experiment grid and write markdown/CSV reports")
    s.add_argument("--config", help="experiment JSON (default: the built-in synthetic grid)")
    s.add_argument("--out", help="override output_dir")
    s.add_argument("--seeds", help="override seeds, comma-separated")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("version", help="print toolchain and file-format versions")
    s.set_defaults(func=cmd_version)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ReidError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
