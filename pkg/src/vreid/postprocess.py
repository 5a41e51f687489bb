"""Inference-time post-processing: density clustering, query expansion,
camera / temporal candidate filters, k-reciprocal re-ranking, and a pipeline
that chains them and reports metrics after every step."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .evaluation import build_judgments, evaluate
from .retrieval import (EmbeddingStore, RankingResult, aggregate_view_rows, ensemble_rows,
                        normalize_rows, rank_gallery)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DbscanConfig:
    eps: float = 0.5
    min_pts: int = 2

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.min_pts < 1:
            raise ConfigError(f"min_pts must be >= 1, got {self.min_pts}")


@dataclass(frozen=True)
class RerankConfig:
    k1: int = 20
    k2: int = 6
    lam: float = 0.3

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1 or self.k2 > self.k1:
            raise ConfigError(f"need 1 <= k2 <= k1, got k1={self.k1}, k2={self.k2}")
        if not 0 <= self.lam <= 1:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")


def _matrix(x):
    return x.embeddings if isinstance(x, EmbeddingStore) else np.asarray(x)


def _neighbourhoods(x: np.ndarray, eps: float, chunk: int = 2048) -> list[np.ndarray]:
    out = []
    for s in range(0, len(x), chunk):
        d = 1.0 - x[s:s + chunk] @ x.T
        out.extend(np.flatnonzero(row <= eps) for row in d)
    return out


def dbscan(store, cfg: DbscanConfig = DbscanConfig()) -> np.ndarray:
    """Cluster ids per row (-1 = noise) under cosine distance 1 - cos.

    Points are scanned in ascending index order and clusters grow
    breadth-first, so border points go to the first cluster that reaches
    them. The neighbourhood of a point includes the point itself.
    """
    x = normalize_rows(_matrix(store)) if len(_matrix(store)) else None
    if x is None:
        raise DataError("cannot cluster an empty store")
    n = len(x)
    nbrs = _neighbourhoods(x, cfg.eps)
    core = np.array([len(nb) >= cfg.min_pts for nb in nbrs])
    labels = np.full(n, -1, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    cid = 0
    for p in range(n):
        if visited[p]:
            continue
        visited[p] = True
        if not core[p]:
            continue
        labels[p] = cid
        queue = list(nbrs[p])
        head = 0
        while head < len(queue):
            q = queue[head]
            head += 1
            if labels[q] == -1:
                labels[q] = cid
            if not visited[q]:
                visited[q] = True
                if core[q]:
                    queue.extend(nbrs[q])
        cid += 1
    return labels


def query_expansion(query, clusters, inclusive: bool = False) -> np.ndarray:
    """Replace each clustered query by the normalized mean of the other members
    of its cluster (or of all members with ``inclusive``). Singletons and
    noise are left alone; all means use the pre-update features."""
    x = normalize_rows(_matrix(query))
    labels = np.asarray(clusters)
    if len(labels) != len(x):
        raise DataError(f"{len(labels)} cluster ids for {len(x)} queries")
    out = x.copy()
    for c in np.unique(labels[labels >= 0]):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            continue
        total = x[members].sum(axis=0)
        for i in members:
            m = total if inclusive else total - x[i]
            norm = np.linalg.norm(m)
            if norm > 0:
                out[i] = m / norm
    return out


def _count(report, key, n=1):
    if report is not None:
        report[key] = report.get(key, 0) + n


def camera_verification(ranking: RankingResult, query_cams, gallery_cams, report: dict | None = None) -> RankingResult:
    """Drop candidates whose camera cluster equals the query's.

    Queries without a camera id are left untouched; candidates without one
    are kept. Both are counted in ``report``.
    """
    gc = np.array([-1 if c is None else int(c) for c in gallery_cams], dtype=np.int64)
    g_missing = np.array([c is None for c in gallery_cams])
    masks = []
    for q, idx in enumerate(ranking.indices):
        qc = query_cams[q]
        if qc is None:
            _count(report, "skipped_queries")
            masks.append(np.ones(len(idx), dtype=bool))
            continue
        _count(report, "kept_unknown_camera", int(g_missing[idx].sum()))
        keep = (gc[idx] != int(qc)) | g_missing[idx]
        if len(idx) and not keep.any():
            _count(report, "emptied_lists")
        masks.append(keep)
    if report and report.get("skipped_queries"):
        log.warning("camera verification skipped %d queries without camera ids", report["skipped_queries"])
    return ranking.keep(masks, "camera_verification")


def temporal_filter(ranking: RankingResult, query_times, gallery_times, tau: float,
                    report: dict | None = None) -> RankingResult:
    """Keep candidates with timestamp in [t - tau, t + tau] (inclusive)."""
    if tau < 0:
        raise ConfigError(f"tau must be >= 0, got {tau}")
    g_missing = np.array([t is None for t in gallery_times])
    gt = np.array([0.0 if t is None else float(t) for t in gallery_times])
    masks = []
    for q, idx in enumerate(ranking.indices):
        t = query_times[q]
        if t is None or math.isinf(tau):
            if t is None:
                _count(report, "skipped_queries")
            masks.append(np.ones(len(idx), dtype=bool))
            continue
        _count(report, "kept_unknown_time", int(g_missing[idx].sum()))
        keep = (np.abs(gt[idx] - float(t)) <= tau) | g_missing[idx]
        if len(idx) and not keep.any():
            _count(report, "emptied_lists")
        masks.append(keep)
    if report and report.get("skipped_queries"):
        log.warning("temporal filter skipped %d queries without timestamps", report["skipped_queries"])
    return ranking.keep(masks, "temporal_filter")


def _k_reciprocal(initial_rank, i, k):
    forward = initial_rank[i, :k + 1]
    backward = initial_rank[forward, :k + 1]
    return forward[np.any(backward == i, axis=1)]


def k_reciprocal_distance(query, gallery, cfg: RerankConfig = RerankConfig()):
    """Re-ranked query-gallery distances and the original (normalized squared
    Euclidean) distances, both (n_query, n_gallery)."""
    q = normalize_rows(_matrix(query))
    g = normalize_rows(_matrix(gallery))
    nq = len(q)
    feats = np.concatenate([q, g])
    n = len(feats)
    dist = np.maximum(2.0 - 2.0 * feats @ feats.T, 0.0)
    colmax = dist.max(axis=0)
    colmax[colmax == 0] = 1.0
    dist = (dist / colmax).T
    initial_rank = np.argsort(dist, axis=1, kind="stable")

    half = int(np.around(cfg.k1 / 2))
    v = np.zeros((n, n))
    for i in range(n):
        recip = _k_reciprocal(initial_rank, i, cfg.k1)
        expansion = [recip]
        for cand in recip:
            cand_recip = _k_reciprocal(initial_rank, cand, half)
            if len(np.intersect1d(cand_recip, recip)) > 2.0 / 3.0 * len(cand_recip):
                expansion.append(cand_recip)
        idx = np.unique(np.concatenate(expansion))
        w = np.exp(-dist[i, idx])
        v[i, idx] = w / w.sum()

    if cfg.k2 != 1:
        v = v[initial_rank[:, :cfg.k2]].mean(axis=1)

    jaccard = np.empty((nq, n))
    for i in range(nq):
        cols = np.flatnonzero(v[i])
        shared = np.minimum(v[:, cols], v[i, cols]).sum(axis=1)
        jaccard[i] = 1.0 - shared / (2.0 - shared)

    final = jaccard * (1 - cfg.lam) + dist[:nq] * cfg.lam
    return final[:, nq:], dist[:nq, nq:]


def _order_by_distance(final_row, sim_row, idx):
    # final distance, then original similarity, then gallery index
    return idx[np.lexsort((idx, -sim_row[idx], final_row[idx]))]


def k_reciprocal_rerank(query, gallery, cfg: RerankConfig = RerankConfig(),
                        ranking: RankingResult | None = None) -> RankingResult:
    """Re-sort by lambda * original + (1 - lambda) * Jaccard distance.

    With ``ranking`` given, only its (possibly filtered) candidate lists are
    re-ordered; otherwise the whole gallery is ranked. Scores are
    1 - final distance.
    """
    ng = len(_matrix(gallery))
    base = ranking if ranking is not None else rank_gallery(query, gallery)
    if ng == 1:
        return RankingResult(base.indices, base.scores, base.steps + ["rerank"])
    if cfg.k1 >= ng:
        raise ConfigError(f"k1={cfg.k1} must be smaller than the gallery size {ng}")
    final, _ = k_reciprocal_distance(query, gallery, cfg)
    sim = normalize_rows(_matrix(query)) @ normalize_rows(_matrix(gallery)).T
    indices, scores = [], []
    for q, idx in enumerate(base.indices):
        order = _order_by_distance(final[q], sim[q], idx)
        indices.append(order)
        scores.append(1.0 - final[q, order])
    return RankingResult(indices, scores, base.steps + ["rerank"])


STEP_ALIASES = {
    "aggregate": "aggregate",
    "ensemble": "ensemble",
    "qe": "query_expansion",
    "query_expansion": "query_expansion",
    "camver": "camera_verification",
    "camera_verification": "camera_verification",
    "temporal": "temporal_filter",
    "temporal_filter": "temporal_filter",
    "rerank": "rerank",
}
STEP_ORDER = ("aggregate", "ensemble", "query_expansion", "camera_verification", "rerank")


def canonical_steps(steps: Sequence[str]) -> list[str]:
    out = []
    for s in steps:
        if s not in STEP_ALIASES:
            raise ConfigError(f"unknown post-processing step {s!r}; choose from {sorted(STEP_ALIASES)}")
        out.append(STEP_ALIASES[s])
    return out


@dataclass
class PipelineConfig:
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    tau: float = math.inf
    qe_inclusive: bool = False
    protocol: str = "plain"
    ks: tuple = (1, 5, 10)
    max_rank: int | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["tau"] = None if math.isinf(self.tau) else self.tau
        d["ks"] = list(self.ks)
        return d


@dataclass
class PipelineInputs:
    """Embeddings indexed ``[model][view]`` -> (n, dim) plus optional metadata.

    Without ``aggregate`` only view 0 is used, without ``ensemble`` only
    model 0.
    """

    query_views: list
    gallery_views: list
    query_labels: Sequence | None = None
    gallery_labels: Sequence | None = None
    query_cams: Sequence | None = None
    gallery_cams: Sequence | None = None
    query_times: Sequence | None = None
    gallery_times: Sequence | None = None
    query_ids: Sequence | None = None
    gallery_ids: Sequence | None = None

    @classmethod
    def single(cls, query, gallery, **meta) -> "PipelineInputs":
        return cls([[_matrix(query)]], [[_matrix(gallery)]], **meta)


def _build_features(views, aggregated, ensembled):
    models = views if ensembled else views[:1]
    parts = [aggregate_view_rows(m) if aggregated else normalize_rows(m[0]) for m in models]
    return ensemble_rows(parts) if len(parts) > 1 else parts[0]


def _rescore(ranking, q, g, step):
    indices, scores = [], []
    for i, idx in enumerate(ranking.indices):
        s = g[idx] @ q[i]
        # ascending-index tie-break regardless of the previous order
        order = np.lexsort((idx, -s))
        indices.append(idx[order])
        scores.append(s[order])
    return RankingResult(indices, scores, ranking.steps + [step])


def pipeline(inputs: PipelineInputs, steps: Sequence[str], cfg: PipelineConfig = PipelineConfig()):
    """Apply ``steps`` in order to the base cosine ranking.

    Returns ``(ranking, report)`` where ``report`` has one row for the base
    ranking and one per step, with candidate counts and, when labels are
    given, mAP and Rank@K.
    """
    steps = canonical_steps(steps)
    judgments = None
    if inputs.query_labels is not None and inputs.gallery_labels is not None:
        judgments = build_judgments(inputs.query_labels, inputs.gallery_labels,
                                    inputs.query_cams, inputs.gallery_cams, cfg.protocol,
                                    inputs.query_ids, inputs.gallery_ids)

    aggregated = ensembled = expanded = False
    q = _build_features(inputs.query_views, False, False)
    g = _build_features(inputs.gallery_views, False, False)
    ranking = rank_gallery(q, g)
    report = [_row("base", ranking, judgments, cfg, {})]

    for step in steps:
        extra: dict = {}
        if step in ("aggregate", "ensemble"):
            aggregated |= step == "aggregate"
            ensembled |= step == "ensemble"
            q = _build_features(inputs.query_views, aggregated, ensembled)
            g = _build_features(inputs.gallery_views, aggregated, ensembled)
            if expanded:
                q = query_expansion(q, dbscan(q, cfg.dbscan), cfg.qe_inclusive)
            ranking = _rescore(ranking, q, g, step)
        elif step == "query_expansion":
            clusters = dbscan(q, cfg.dbscan)
            extra["clusters"] = int(clusters.max() + 1)
            extra["noise"] = int((clusters < 0).sum())
            q = query_expansion(q, clusters, cfg.qe_inclusive)
            expanded = True
            ranking = _rescore(ranking, q, g, step)
        elif step == "camera_verification":
            if inputs.query_cams is None or inputs.gallery_cams is None:
                log.warning("camera verification skipped: no camera ids")
                extra["skipped"] = True
                ranking = RankingResult(ranking.indices, ranking.scores, ranking.steps + [step])
            else:
                ranking = camera_verification(ranking, inputs.query_cams, inputs.gallery_cams, extra)
        elif step == "temporal_filter":
            if inputs.query_times is None or inputs.gallery_times is None:
                log.warning("temporal filter skipped: no timestamps")
                extra["skipped"] = True
                ranking = RankingResult(ranking.indices, ranking.scores, ranking.steps + [step])
            else:
                ranking = temporal_filter(ranking, inputs.query_times, inputs.gallery_times, cfg.tau, extra)
        elif step == "rerank":
            ranking = k_reciprocal_rerank(q, g, cfg.rerank, ranking)
        report.append(_row(step, ranking, judgments, cfg, extra))
    return ranking, report


def _row(step, ranking, judgments, cfg, extra):
    counts = ranking.candidate_counts()
    row = {"step": step, "total_candidates": int(counts.sum()),
           "mean_candidates": float(counts.mean()) if len(counts) else 0.0,
           "empty_lists": int((counts == 0).sum())}
    if judgments is not None:
        rep = evaluate(ranking, judgments, cfg.ks, cfg.max_rank)
        row["mAP"] = rep.mAP
        for k, v in rep.cmc.items():
            row[f"rank{k}"] = v
        row["skipped_queries"] = rep.num_skipped
    row.update(extra)
    return row
