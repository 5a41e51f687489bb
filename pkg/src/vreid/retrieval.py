"""Embedding stores, cosine ranking and descriptor fusion.

Embeddings are kept in float32; similarities are always computed in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, NumericError

EMB_MAGIC = b"RFEB"
EMB_VERSION = 1
FLAG_NORMALIZED = 1
RANKING_VERSION = "v1"


def l2_normalize(vector) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("cannot normalize a non-finite vector")
    n = np.linalg.norm(v)
    if n == 0:
        raise NumericError("cannot normalize a zero vector")
    return v / n


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite embedding values")
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise NumericError(f"zero embedding at rows {np.flatnonzero(n[:, 0] == 0)[:10].tolist()}")
    return x / n


def cosine_similarity(f_n, f_m) -> float:
    a = np.asarray(f_n, dtype=np.float64)
    b = np.asarray(f_m, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.clip(l2_normalize(a) @ l2_normalize(b), -1.0, 1.0))


@dataclass
class EmbeddingStore:
    embeddings: np.ndarray
    metadata: list = field(default_factory=list)
    normalized: bool = False

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        if self.embeddings.ndim != 2:
            raise DataError("embeddings must be a 2-D matrix")
        if not self.metadata:
            self.metadata = [{} for _ in range(len(self.embeddings))]
        if len(self.metadata) != len(self.embeddings):
            raise DataError(f"{len(self.metadata)} metadata rows for {len(self.embeddings)} embeddings")

    @classmethod
    def from_array(cls, x, metadata=None, normalize=True) -> "EmbeddingStore":
        x = normalize_rows(x) if normalize else np.asarray(x)
        return cls(x, list(metadata or []), normalized=normalize)

    def __len__(self):
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def column(self, key) -> list:
        return [m.get(key) for m in self.metadata]


@dataclass
class RankingResult:
    """Per-query candidate lists, best first. Lists may shrink under filters."""

    indices: list
    scores: list
    steps: list = field(default_factory=list)

    def __post_init__(self):
        self.indices = [np.asarray(i, dtype=np.int64) for i in self.indices]
        self.scores = [np.asarray(s, dtype=np.float64) for s in self.scores]
        if len(self.indices) != len(self.scores):
            raise DataError("indices/scores length mismatch")

    def __len__(self):
        return len(self.indices)

    def candidate_counts(self) -> np.ndarray:
        return np.array([len(i) for i in self.indices], dtype=np.int64)

    def check(self):
        for q, (idx, sc) in enumerate(zip(self.indices, self.scores)):
            if len(idx) != len(sc):
                raise DataError(f"query {q}: indices/scores length mismatch")
            if len(np.unique(idx)) != len(idx):
                raise DataError(f"query {q}: duplicate gallery indices")
            if np.any(np.diff(sc) > 0):
                raise DataError(f"query {q}: scores are not non-increasing")

    def keep(self, masks, step: str) -> "RankingResult":
        """Subset each query's list by a boolean mask aligned with it."""
        return RankingResult([i[m] for i, m in zip(self.indices, masks)],
                             [s[m] for s, m in zip(self.scores, masks)],
                             self.steps + [step])


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, EmbeddingStore):
        return x.embeddings
    return np.asarray(x)


def similarity_matrix(query, gallery) -> np.ndarray:
    q = normalize_rows(_as_matrix(query))
    g = normalize_rows(_as_matrix(gallery))
    if q.shape[1] != g.shape[1]:
        raise DataError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    return q @ g.T


def sort_scores(scores: np.ndarray) -> np.ndarray:
    """Descending order per row, ties broken by ascending column index."""
    return np.argsort(-scores, axis=1, kind="stable")


def rank_gallery(query, gallery) -> RankingResult:
    if len(_as_matrix(gallery)) == 0:
        raise DataError("gallery is empty")
    sim = similarity_matrix(query, gallery)
    order = sort_scores(sim)
    ranked = np.take_along_axis(sim, order, axis=1)
    return RankingResult(list(order), list(ranked), ["base"])


def aggregate_views(views: Sequence) -> np.ndarray:
    """Mean of several embeddings of one sample (flips, crops), L2-normalized."""
    if len(views) == 0:
        raise DataError("aggregate_views needs at least one view")
    v = np.asarray([np.asarray(x, dtype=np.float64) for x in views])
    if v.ndim != 2:
        raise DataError("views must share one dimensionality")
    return l2_normalize(v.mean(axis=0))


def ensemble_concat(parts: Sequence) -> np.ndarray:
    """Concatenate per-model embeddings after normalizing each; norm is sqrt(n)."""
    if len(parts) == 0:
        raise DataError("ensemble_concat needs at least one model embedding")
    return np.concatenate([l2_normalize(p) for p in parts])


def aggregate_view_rows(views: np.ndarray) -> np.ndarray:
    """Row-wise aggregate_views for a (n_views, n, dim) stack."""
    m = np.asarray(views, dtype=np.float64).mean(axis=0)
    return normalize_rows(m)


def ensemble_rows(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([normalize_rows(p) for p in parts], axis=1)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".meta.jsonl")


def save_embeddings(store: EmbeddingStore, path, write_metadata: bool = True) -> None:
    """``RFEB`` | u32 version | u64 count | u32 dim | u32 flags, then float32
    little-endian rows. Metadata goes to a JSON-lines sidecar."""
    x = np.ascontiguousarray(store.embeddings, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQII", EMB_MAGIC, EMB_VERSION, x.shape[0], x.shape[1],
                             FLAG_NORMALIZED if store.normalized else 0))
        fh.write(x.tobytes())
    if write_metadata:
        with open(sidecar_path(path), "w") as fh:
            for m in store.metadata:
                fh.write(json.dumps(m, sort_keys=True) + "\n")


def load_embeddings(path) -> EmbeddingStore:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<4sIQII")
    if len(raw) < head:
        raise DataError(f"{path}: truncated embedding header")
    magic, version, count, dim, flags = struct.unpack_from("<4sIQII", raw)
    if magic != EMB_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise DataError(f"{path}: unsupported embedding version {version}")
    if len(raw) != head + 4 * count * dim:
        raise DataError(f"{path}: expected {count}x{dim} float32 payload")
    x = np.frombuffer(raw, dtype="<f4", offset=head).reshape(count, dim).astype(np.float32)
    meta = []
    side = sidecar_path(path)
    if side.exists():
        meta = [json.loads(line) for line in side.read_text().splitlines() if line.strip()]
    return EmbeddingStore(x, meta, normalized=bool(flags & FLAG_NORMALIZED))


def save_ranking(ranking: RankingResult, path, query_ids=None, gallery_ids=None) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"version": RANKING_VERSION, "steps": ranking.steps,
                             "gallery_ids": gallery_ids}) + "\n")
        for q, (idx, sc) in enumerate(zip(ranking.indices, ranking.scores)):
            fh.write(json.dumps({
                "query": q,
                "query_id": None if query_ids is None else query_ids[q],
                "indices": idx.tolist(),
                "scores": [round(float(s), 12) for s in sc],
            }) + "\n")


def load_ranking(path):
    """Returns (RankingResult, query_ids, gallery_ids)."""
    lines = [line for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty ranking file")
    header = json.loads(lines[0])
    if header.get("version") != RANKING_VERSION:
        raise DataError(f"{path}: unsupported ranking version {header.get('version')!r}")
    rows = [json.loads(line) for line in lines[1:]]
    rows.sort(key=lambda r: r["query"])
    ranking = RankingResult([r["indices"] for r in rows], [r["scores"] for r in rows], header.get("steps", []))
    return ranking, [r.get("query_id") for r in rows], header.get("gallery_ids")
