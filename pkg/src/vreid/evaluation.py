"""Rank@K and mAP over ranked gallery lists."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

PROTOCOLS = ("plain", "cross-camera")


@dataclass(frozen=True)
class RelevanceJudgment:
    relevant: frozenset
    junk: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "relevant", frozenset(int(i) for i in self.relevant))
        object.__setattr__(self, "junk", frozenset(int(i) for i in self.junk))
        if self.relevant & self.junk:
            raise DataError("relevant and junk sets overlap")


def _matches(ranked, judgment: RelevanceJudgment, max_rank=None) -> np.ndarray:
    ranked = np.asarray(ranked, dtype=np.int64)
    if len(np.unique(ranked)) != len(ranked):
        raise DataError("duplicate gallery indices in ranking")
    if judgment.junk:
        ranked = ranked[~np.isin(ranked, list(judgment.junk))]
    if max_rank is not None:
        ranked = ranked[:max_rank]
    return np.isin(ranked, list(judgment.relevant))


def average_precision(ranked, judgment: RelevanceJudgment, max_rank: int | None = None) -> float | None:
    """AP of one ranked list; None when the query has nothing relevant.

    Relevant items missing from the list (filtered out, truncated) count as
    misses, so an empty list scores 0.
    """
    n_rel = len(judgment.relevant)
    if n_rel == 0:
        return None
    hit = _matches(ranked, judgment, max_rank)
    if not hit.any():
        return 0.0
    ranks = np.flatnonzero(hit) + 1
    return float(np.sum(np.arange(1, len(ranks) + 1) / ranks) / n_rel)


def rank_at_k(ranked, judgment: RelevanceJudgment, k: int) -> int:
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    return int(_matches(ranked, judgment)[:k].any())


@dataclass
class EvalReport:
    mAP: float
    cmc: dict
    per_query_ap: list
    num_queries: int
    num_skipped: int
    num_empty: int = 0
    first_match: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mAP": self.mAP,
            "rank": {str(k): v for k, v in self.cmc.items()},
            "num_queries": self.num_queries,
            "num_scored": self.num_queries - self.num_skipped,
            "num_skipped": self.num_skipped,
            "num_empty": self.num_empty,
        }

    def write_csv(self, path, query_ids=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["query", "query_id", "ap", "first_match_rank"])
            for q, ap in enumerate(self.per_query_ap):
                w.writerow([q, "" if query_ids is None else query_ids[q],
                            "" if ap is None else f"{ap:.10f}",
                            "" if self.first_match[q] is None else self.first_match[q]])


def evaluate(rankings, judgments: Sequence[RelevanceJudgment], ks=(1, 5, 10),
             max_rank: int | None = None) -> EvalReport:
    lists = rankings.indices if hasattr(rankings, "indices") else list(rankings)
    if len(lists) != len(judgments):
        raise DataError(f"{len(lists)} rankings for {len(judgments)} judgments")
    ks = tuple(int(k) for k in ks)
    aps, first = [], []
    hits = {k: 0 for k in ks}
    empty = 0
    for ranked, j in zip(lists, judgments):
        ap = average_precision(ranked, j, max_rank)
        aps.append(ap)
        if ap is None:
            first.append(None)
            continue
        if len(ranked) == 0:
            empty += 1
        m = _matches(ranked, j)
        pos = np.flatnonzero(m)
        fm = int(pos[0]) + 1 if len(pos) else None
        first.append(fm)
        for k in ks:
            if k < 1:
                raise ConfigError(f"K must be >= 1, got {k}")
            hits[k] += int(fm is not None and fm <= k)
    scored = [a for a in aps if a is not None]
    n = len(scored)
    return EvalReport(
        mAP=float(np.mean(scored)) if n else 0.0,
        cmc={k: hits[k] / n if n else 0.0 for k in ks},
        per_query_ap=aps,
        num_queries=len(aps),
        num_skipped=len(aps) - n,
        num_empty=empty,
        first_match=first,
    )


def build_judgments(query_labels, gallery_labels, query_cams=None, gallery_cams=None,
                    protocol: str = "plain", query_ids=None, gallery_ids=None) -> list[RelevanceJudgment]:
    """Same label = relevant. A gallery entry with the query's own image id is
    junk; under ``cross-camera`` so is a same-label, same-camera entry."""
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    gl = np.asarray(gallery_labels)
    gc = None if gallery_cams is None else np.array([-1 if c is None else c for c in gallery_cams])
    gid_pos = {} if gallery_ids is None else {g: i for i, g in enumerate(gallery_ids)}
    out = []
    for q, lab in enumerate(query_labels):
        same = gl == lab
        junk = np.zeros(len(gl), dtype=bool)
        if query_ids is not None and query_ids[q] in gid_pos:
            junk[gid_pos[query_ids[q]]] = True
        if protocol == "cross-camera":
            if query_cams is None or gc is None:
                raise DataError("cross-camera protocol needs camera ids")
            qc = query_cams[q]
            if qc is not None:
                junk |= same & (gc == qc)
        rel = same & ~junk
        out.append(RelevanceJudgment(frozenset(np.flatnonzero(rel).tolist()),
                                     frozenset(np.flatnonzero(junk).tolist())))
    return out
