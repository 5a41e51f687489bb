import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_ranking
from vreid.errors import DataError, NumericError
from vreid.retrieval import (EmbeddingStore, aggregate_views, cosine_similarity, ensemble_concat, l2_normalize,
                             load_embeddings, load_ranking, rank_gallery, save_embeddings, save_ranking,
                             sidecar_path)


def test_normalize_and_cosine():
    assert np.allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8])
    assert cosine_similarity([1, 0], [0, 2]) == 0.0
    assert cosine_similarity([1, 1], [2, 2]) == pytest.approx(1.0)
    with pytest.raises(NumericError):
        l2_normalize([0.0, 0.0])
    with pytest.raises(NumericError):
        l2_normalize([np.nan, 1.0])
    with pytest.raises(DataError):
        cosine_similarity([1, 0], [1, 0, 0])


def test_rank_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q, g = rng.normal(size=(5, 6)), rng.normal(size=(30, 6))
        r = rank_gallery(q, g)
        assert [i.tolist() for i in r.indices] == brute_ranking(q, g)
        r.check()


def test_ties_break_by_ascending_index():
    g = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [2.0, 0.0]])
    r = rank_gallery(np.array([[1.0, 0.0]]), g)
    assert r.indices[0].tolist() == [0, 2, 3, 1]


def test_empty_gallery_rejected():
    with pytest.raises(DataError):
        rank_gallery(np.ones((1, 3)), np.zeros((0, 3)))


def test_aggregate_and_ensemble():
    a = aggregate_views([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(a, [np.sqrt(0.5)] * 2)
    e = ensemble_concat([[3.0, 4.0], [0.0, 2.0], [1.0, 0.0]])
    assert np.linalg.norm(e) == pytest.approx(np.sqrt(3))
    with pytest.raises(DataError):
        aggregate_views([])


@given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10)))
@settings(max_examples=50, deadline=None)
def test_aggregate_single_view_is_normalization(x):
    for row in x:
        if np.linalg.norm(row) > 1e-6:
            assert np.allclose(aggregate_views([row]), row / np.linalg.norm(row))


def test_embedding_file_layout(tmp_path):
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    store = EmbeddingStore(x, [{"image_id": "a"}, {"image_id": "b"}], normalized=False)
    path = tmp_path / "e.rfeb"
    save_embeddings(store, path)
    raw = path.read_bytes()
    assert raw[:4] == b"RFEB"
    assert np.frombuffer(raw[4:8], "<u4")[0] == 1
    assert np.frombuffer(raw[8:16], "<u8")[0] == 2
    assert np.frombuffer(raw[16:24], "<u4").tolist() == [3, 0]
    assert np.array_equal(np.frombuffer(raw[24:], "<f4"), x.ravel())
    back = load_embeddings(path)
    assert np.array_equal(back.embeddings, x)
    assert back.column("image_id") == ["a", "b"]
    assert sidecar_path(path).exists()


def test_embedding_normalized_flag(tmp_path):
    store = EmbeddingStore.from_array(np.array([[3.0, 4.0]]))
    save_embeddings(store, tmp_path / "e.rfeb")
    back = load_embeddings(tmp_path / "e.rfeb")
    assert back.normalized
    assert np.allclose(back.embeddings, [[0.6, 0.8]])


def test_embedding_file_rejects_corruption(tmp_path):
    save_embeddings(EmbeddingStore(np.ones((2, 2))), tmp_path / "e.rfeb")
    raw = (tmp_path / "e.rfeb").read_bytes()
    (tmp_path / "a.rfeb").write_bytes(b"NOPE" + raw[4:])
    (tmp_path / "b.rfeb").write_bytes(raw[:-1])
    (tmp_path / "c.rfeb").write_bytes(raw[:10])
    for name in "abc":
        with pytest.raises(DataError):
            load_embeddings(tmp_path / f"{name}.rfeb")


def test_metadata_length_checked():
    with pytest.raises(DataError):
        EmbeddingStore(np.ones((2, 2)), [{}])


def test_ranking_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    r = rank_gallery(rng.normal(size=(3, 4)), rng.normal(size=(5, 4)))
    save_ranking(r, tmp_path / "r.jsonl", ["q0", "q1", "q2"], list("abcde"))
    header = json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0])
    assert header == {"version": "v1", "steps": ["base"], "gallery_ids": list("abcde")}
    back, qids, gids = load_ranking(tmp_path / "r.jsonl")
    assert qids == ["q0", "q1", "q2"] and gids == list("abcde")
    for a, b in zip(r.indices, back.indices):
        assert np.array_equal(a, b)
    for a, b in zip(r.scores, back.scores):
        assert np.allclose(a, b, atol=1e-12)


def test_keep_preserves_order():
    r = rank_gallery(np.array([[1.0, 0.0]]), np.array([[1.0, 0.1], [0.0, 1.0], [1.0, 0.5]]))
    k = r.keep([np.array([True, False, True])], "x")
    assert k.indices[0].tolist() == [r.indices[0][0], r.indices[0][2]]
    assert k.steps == ["base", "x"]
