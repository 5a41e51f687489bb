"""Per-source manifests, the merged multi-source label space and the
class-disjoint train/validation split."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

SPLITS = ("train", "query", "gallery")
SPACE_VERSION = "v1"


@dataclass(frozen=True)
class RawRecord:
    image_id: str
    local_class: int
    camera_id: int | None = None
    timestamp: int | None = None
    split: str = "train"

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "local_class": self.local_class,
            "camera_id": self.camera_id,
            "timestamp": self.timestamp,
            "split": self.split,
        }


@dataclass(frozen=True)
class SourceManifest:
    source_id: int
    records: tuple[RawRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if int(self.source_id) < 1:
            raise ConfigError(f"source_id must be >= 1, got {self.source_id}")
        seen = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise DataError(f"source {self.source_id}: duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            if rec.local_class < 0:
                raise DataError(f"source {self.source_id}: negative local_class in {rec.image_id!r}")
            if rec.split not in SPLITS:
                raise DataError(f"source {self.source_id}: bad split {rec.split!r} in {rec.image_id!r}")

    def __len__(self):
        return len(self.records)

    @property
    def classes(self) -> list[int]:
        return sorted({r.local_class for r in self.records})

    def subset(self, split: str) -> "SourceManifest":
        return SourceManifest(self.source_id, tuple(r for r in self.records if r.split == split))


@dataclass(frozen=True)
class MergedLabelSpace:
    """Contiguous global class ids for (source_id, local_class) pairs."""

    mapping: Mapping[tuple[int, int], int]
    num_classes: int
    _inverse: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        inv = {g: key for key, g in self.mapping.items()}
        if len(inv) != len(self.mapping) or sorted(inv) != list(range(self.num_classes)):
            raise DataError("label space must be an injective map onto 0..C-1")
        object.__setattr__(self, "_inverse", inv)

    @property
    def sources(self) -> list[int]:
        return sorted({s for s, _ in self.mapping})

    def encode(self, source_id: int, local_class: int) -> int:
        try:
            return self.mapping[(source_id, local_class)]
        except KeyError:
            raise DataError(f"class {local_class} of source {source_id} is not in the label space") from None

    def decode(self, global_class: int) -> tuple[int, int]:
        return self._inverse[global_class]

    def classes_of(self, source_id: int) -> list[int]:
        return sorted(g for (s, _), g in self.mapping.items() if s == source_id)

    def to_json(self) -> dict:
        entries = sorted([s, c, g] for (s, c), g in self.mapping.items())
        return {"version": SPACE_VERSION, "num_classes": self.num_classes, "entries": entries}

    @classmethod
    def from_json(cls, obj: dict) -> "MergedLabelSpace":
        if obj.get("version") != SPACE_VERSION:
            raise DataError(f"unsupported label-space version {obj.get('version')!r}")
        mapping = {(int(s), int(c)): int(g) for s, c, g in obj["entries"]}
        return cls(mapping, int(obj["num_classes"]))


@dataclass
class SampleRecord:
    global_index: int
    source_id: int
    global_class: int
    camera_id: int | None = None
    timestamp: int | None = None
    feature: np.ndarray | None = None
    image_id: str = ""


@dataclass(frozen=True)
class SplitSpec:
    train_classes: frozenset
    val_query: tuple[RawRecord, ...]
    val_gallery: tuple[RawRecord, ...]
    train: tuple[RawRecord, ...]


def merge_label_spaces(manifests: Sequence[SourceManifest]) -> MergedLabelSpace:
    """Assign global ids source by source (ascending source_id), then by
    ascending local class."""
    if not manifests:
        raise ConfigError("at least one manifest is required")
    ids = [m.source_id for m in manifests]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate source_id in {ids}")
    mapping = {}
    for m in sorted(manifests, key=lambda m: m.source_id):
        if len(m) == 0:
            raise DataError(f"manifest for source {m.source_id} is empty")
        for c in m.classes:
            mapping[(m.source_id, c)] = len(mapping)
    return MergedLabelSpace(mapping, len(mapping))


def split_train_val(manifest: SourceManifest, val_class_count: int, seed: int,
                    queries_per_class: int | None = None) -> SplitSpec:
    """Hold out ``val_class_count`` classes as validation queries.

    Uses the manifest's train records. The validation gallery is the whole
    original training set; held-out classes are removed from training.
    """
    records = [r for r in manifest.records if r.split == "train"]
    classes = sorted({r.local_class for r in records})
    if val_class_count < 0 or val_class_count >= len(classes):
        raise ConfigError(
            f"val_class_count must be in [0, {len(classes)}) for source {manifest.source_id}, "
            f"got {val_class_count}")
    rng = np.random.default_rng(seed)
    val = set(int(c) for c in rng.choice(classes, size=val_class_count, replace=False)) if val_class_count else set()

    query = []
    for c in sorted(val):
        members = [r for r in records if r.local_class == c]
        if queries_per_class is not None and len(members) > queries_per_class:
            pick = sorted(rng.choice(len(members), size=queries_per_class, replace=False))
            members = [members[i] for i in pick]
        query.extend(members)
    return SplitSpec(
        train_classes=frozenset(c for c in classes if c not in val),
        val_query=tuple(query),
        val_gallery=tuple(records),
        train=tuple(r for r in records if r.local_class not in val),
    )


def remap_for_target(space: MergedLabelSpace, target_source: int) -> tuple[MergedLabelSpace, dict[int, int]]:
    """Restrict ``space`` to one source, re-contiguous from 0.

    Returns the new space and a translation table old global id -> new id.
    """
    keys = sorted(k for k in space.mapping if k[0] == target_source)
    if not keys:
        raise DataError(f"source {target_source} is not in the label space")
    new_mapping = {k: i for i, k in enumerate(keys)}
    table = {space.mapping[k]: i for i, k in enumerate(keys)}
    return MergedLabelSpace(new_mapping, len(keys)), table


def build_records(manifests: Iterable[SourceManifest], space: MergedLabelSpace,
                  features: Mapping[int, np.ndarray] | None = None) -> list[SampleRecord]:
    """Expand manifests into SampleRecords. ``features[source_id]`` rows must be
    aligned with that manifest's records."""
    out = []
    dim = None
    for m in manifests:
        feats = None if features is None else features.get(m.source_id)
        if feats is not None:
            if len(feats) != len(m.records):
                raise DataError(f"source {m.source_id}: {len(feats)} feature rows for {len(m.records)} records")
            if dim is None:
                dim = feats.shape[1]
            elif feats.shape[1] != dim:
                raise DataError("feature dimensionality differs between sources")
        for i, r in enumerate(m.records):
            out.append(SampleRecord(
                global_index=len(out),
                source_id=m.source_id,
                global_class=space.encode(m.source_id, r.local_class),
                camera_id=r.camera_id,
                timestamp=r.timestamp,
                feature=None if feats is None else feats[i],
                image_id=r.image_id,
            ))
    return out


def read_manifest(path, source_id: int) -> SourceManifest:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(RawRecord(
                    image_id=str(obj["image_id"]),
                    local_class=int(obj["local_class"]),
                    camera_id=None if obj.get("camera_id") is None else int(obj["camera_id"]),
                    timestamp=None if obj.get("timestamp") is None else int(obj["timestamp"]),
                    split=obj.get("split", "train"),
                ))
            except (KeyError, ValueError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: malformed manifest record ({e})") from None
    return SourceManifest(source_id, tuple(records))


def write_manifest(manifest: SourceManifest, path) -> None:
    with open(path, "w") as fh:
        for r in manifest.records:
            fh.write(json.dumps(r.to_json()) + "\n")


def save_space(space: MergedLabelSpace, path) -> None:
    Path(path).write_text(json.dumps(space.to_json(), indent=1) + "\n")


def load_space(path) -> MergedLabelSpace:
    return MergedLabelSpace.from_json(json.loads(Path(path).read_text()))
