import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vreid.errors import ConfigError
from vreid.synthgen import SynthConfig, generate, generate_views, long_tail_counts

SMALL = dict(sources=3, identities=[5, 4, 4], images=[20, 16, 16], cameras=[4, 3, 3], dim=16, identity_rank=8,
             shared_cameras=2)


def test_generate_is_deterministic():
    a, b = generate(SynthConfig(**SMALL)), generate(SynthConfig(**SMALL))
    for d in (1, 2, 3):
        assert np.array_equal(a.features[d], b.features[d])
        assert a.manifest(d) == b.manifest(d)
    c = generate(SynthConfig(**SMALL, seed=1))
    assert not np.array_equal(a.features[1], c.features[1])


def test_shapes_and_normalization():
    data = generate(SynthConfig(**SMALL))
    for d, n in zip((1, 2, 3), SMALL["images"]):
        assert data.features[d].shape == (n, 16)
        assert data.features[d].dtype == np.float32
        assert np.allclose(np.linalg.norm(data.features[d], axis=1), 1, atol=1e-6)
        assert len(data.manifest(d).records) == n


def test_every_identity_present_and_cameras_in_range():
    data = generate(SynthConfig(**SMALL))
    for d, ids, cams in zip((1, 2, 3), SMALL["identities"], SMALL["cameras"]):
        recs = data.manifest(d).records
        assert {r.local_class for r in recs} == set(range(ids))
        assert {r.camera_id for r in recs} <= set(range(cams))


def test_first_source_independent_of_later_sources():
    one = generate(SynthConfig(sources=1, identities=[5], images=[20], cameras=[4], dim=16, identity_rank=8))
    many = generate(SynthConfig(**SMALL))
    assert np.array_equal(one.features[1], many.features[1])


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(sources=2, identities=[3])
    with pytest.raises(ConfigError):
        SynthConfig(sources=1, identities=[5], images=[4], cameras=[1])
    with pytest.raises(ConfigError):
        SynthConfig(identity_rank=100)
    with pytest.raises(ConfigError):
        SynthConfig.from_json({"colour": 1})
    cfg = SynthConfig(**SMALL)
    assert SynthConfig.from_json(cfg.to_json()) == cfg


def test_long_tail_example():
    counts = long_tail_counts(4, 20, 0.0, seed=0)
    assert counts.tolist() == [5, 5, 5, 5]
    skewed = long_tail_counts(10, 200, 2.0, seed=0)
    assert skewed.max() > 10 * np.median(skewed)


@given(st.integers(1, 50), st.integers(0, 500), st.floats(0, 3), st.integers(0, 100))
@settings(max_examples=100, deadline=None)
def test_long_tail_counts_sum_and_floor(ids, extra, exponent, seed):
    counts = long_tail_counts(ids, ids + extra, exponent, seed)
    assert counts.sum() == ids + extra
    assert counts.min() >= 1
    assert np.array_equal(counts, long_tail_counts(ids, ids + extra, exponent, seed))


def test_generate_views_shapes_and_determinism():
    x = np.random.default_rng(0).normal(size=(6, 8))
    a = generate_views(x, 2, 3, 0.1, 0.1, seed=4)
    assert len(a) == 2 and len(a[0]) == 3 and a[1][2].shape == (6, 8)
    b = generate_views(x, 2, 3, 0.1, 0.1, seed=4)
    assert all(np.array_equal(u, v) for m, n in zip(a, b) for u, v in zip(m, n))
