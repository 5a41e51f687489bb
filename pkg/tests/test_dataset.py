import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vreid.dataset import (MergedLabelSpace, RawRecord, SourceManifest, build_records, load_space,
                           merge_label_spaces, read_manifest, remap_for_target, save_space, split_train_val,
                           write_manifest)
from vreid.errors import ConfigError, DataError


def manifest(source_id, classes, per_class=1, split="train"):
    recs = [RawRecord(f"s{source_id}_{c}_{k}", c, k % 3, 100 * c + k, split)
            for c in classes for k in range(per_class)]
    return SourceManifest(source_id, tuple(recs))


def test_merge_offsets():
    space = merge_label_spaces([manifest(1, [0, 1]), manifest(2, [0, 1, 2])])
    assert space.num_classes == 5
    assert space.encode(2, 0) == 2
    assert space.decode(4) == (2, 2)


def test_merge_contiguous_single_source():
    space = merge_label_spaces([manifest(1, [0, 5, 7])])
    assert space.num_classes == 3
    assert [space.encode(1, c) for c in (0, 5, 7)] == [0, 1, 2]


def test_merge_orders_by_source_id_not_argument_order():
    a = merge_label_spaces([manifest(2, [0]), manifest(1, [0, 1])])
    assert a.encode(1, 0) == 0 and a.encode(2, 0) == 2


def test_merge_errors():
    with pytest.raises(ConfigError):
        merge_label_spaces([])
    with pytest.raises(ConfigError):
        merge_label_spaces([manifest(1, [0]), manifest(1, [1])])
    with pytest.raises(DataError, match="source 3"):
        merge_label_spaces([manifest(1, [0]), SourceManifest(3, ())])


@given(st.lists(st.sets(st.integers(0, 50), min_size=1, max_size=8), min_size=1, max_size=5))
@settings(max_examples=60, deadline=None)
def test_merge_invariants(class_sets):
    mans = [manifest(d, sorted(cs)) for d, cs in enumerate(class_sets, 1)]
    space = merge_label_spaces(mans)
    assert space.num_classes == sum(len(cs) for cs in class_sets)
    assert sorted(space.mapping.values()) == list(range(space.num_classes))
    # source-major, class-minor order
    keys = sorted(space.mapping)
    assert [space.mapping[k] for k in keys] == list(range(space.num_classes))


def test_manifest_invariants():
    with pytest.raises(DataError):
        SourceManifest(1, (RawRecord("a", 0), RawRecord("a", 1)))
    with pytest.raises(DataError):
        SourceManifest(1, (RawRecord("a", -1),))
    with pytest.raises(DataError):
        SourceManifest(1, (RawRecord("a", 0, split="val"),))


def test_label_space_rejects_gaps():
    with pytest.raises(DataError):
        MergedLabelSpace({(1, 0): 0, (1, 1): 2}, 3)


def test_space_round_trip(tmp_path):
    space = merge_label_spaces([manifest(1, [3, 4]), manifest(4, [0])])
    save_space(space, tmp_path / "s.json")
    obj = json.loads((tmp_path / "s.json").read_text())
    assert obj["version"] == "v1"
    assert load_space(tmp_path / "s.json") == space


def test_space_rejects_other_version(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"version": "v2", "num_classes": 0, "entries": []}))
    with pytest.raises(DataError):
        load_space(tmp_path / "s.json")


def test_split_disjoint_and_gallery_is_full_train():
    m = manifest(1, range(10), per_class=3)
    s = split_train_val(m, 3, seed=5)
    val = {r.local_class for r in s.val_query}
    assert len(val) == 3
    assert not val & s.train_classes
    assert s.val_gallery == m.records
    assert {r.local_class for r in s.train} == set(s.train_classes)


def test_split_deterministic_and_seed_dependent():
    m = manifest(1, range(40), per_class=2)
    assert split_train_val(m, 5, 1) == split_train_val(m, 5, 1)
    picks = {frozenset(r.local_class for r in split_train_val(m, 5, s).val_query) for s in range(5)}
    assert len(picks) > 1


def test_split_errors():
    with pytest.raises(ConfigError):
        split_train_val(manifest(1, range(3)), 3, 0)


def test_split_queries_per_class():
    s = split_train_val(manifest(1, range(6), per_class=5), 2, 0, queries_per_class=2)
    assert len(s.val_query) == 4


def test_remap_for_target():
    space = merge_label_spaces([manifest(1, [0, 1]), manifest(2, [5, 6, 7])])
    t, table = remap_for_target(space, 2)
    assert t.num_classes == 3
    assert table == {2: 0, 3: 1, 4: 2}
    with pytest.raises(DataError):
        remap_for_target(space, 9)


def test_build_records_checks_alignment():
    m = manifest(1, [0, 1])
    space = merge_label_spaces([m])
    recs = build_records([m], space, {1: np.ones((2, 3))})
    assert [r.global_class for r in recs] == [0, 1]
    with pytest.raises(DataError):
        build_records([m], space, {1: np.ones((3, 3))})


def test_manifest_file_round_trip(tmp_path):
    m = SourceManifest(2, (RawRecord("x", 1, None, None, "query"), RawRecord("y", 0, 3, 17, "gallery")))
    write_manifest(m, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl", 2) == m


def test_malformed_manifest_names_line(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"image_id": "a", "local_class": 0}\n{"image_id": "b"}\n')
    with pytest.raises(DataError, match=":2:"):
        read_manifest(tmp_path / "m.jsonl", 1)
