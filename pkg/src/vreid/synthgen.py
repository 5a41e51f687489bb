"""Seeded multi-source embedding generator.

A sample's raw feature is

    style_d @ identity centroid + source offset + camera offset + noise,

L2-normalized. Centroids live in a shared low-rank identity subspace;
``style_d`` is a per-source random linear distortion around the identity;
source and camera offsets and noise are isotropic. All randomness comes from Philox
(counter-based) streams keyed by ``(seed, stream id)``; per-identity and
per-sample draws use their own counter block, so output does not depend on
generation order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import RawRecord, SourceManifest
from .errors import ConfigError

# stream ids
_BASIS, _DOMAIN, _CAMERA, _IDENTITY, _SAMPLE, _COUNTS, _VIEWS = range(7)


def _philox(seed: int, stream: int, block: int = 0) -> np.random.Generator:
    key = np.random.SeedSequence([seed, stream]).generate_state(2, dtype=np.uint64)
    # third counter word selects a block 2**128 draws away from its neighbours
    return np.random.Generator(np.random.Philox(key=key, counter=np.array([0, 0, block, 0], dtype=np.uint64)))


def _per_source(value, n, name, cast=int):
    if isinstance(value, (list, tuple)):
        if len(value) != n:
            raise ConfigError(f"{name} has {len(value)} entries for {n} sources")
        return [cast(v) for v in value]
    return [cast(value)] * n


@dataclass
class SynthConfig:
    sources: int = 4
    identities: list = field(default_factory=lambda: [25, 40, 40, 40])
    images: list = field(default_factory=lambda: [250, 400, 400, 400])
    long_tail_exponent: float = 0.0
    dim: int = 64
    identity_rank: int = 48
    identity_scale: float = 1.0
    domain_scale: float = 0.6
    # per-source linear distortion of identity centroids (source "style")
    domain_distortion: float | list = 0.0
    cameras: list = field(default_factory=lambda: [8, 8, 8, 8])
    viewpoint_scale: float = 1.2
    # source 1 is the reference; the first ``shared_cameras`` cameras of source
    # d > 1 are reference cameras, taken cyclically starting at
    # (d - 2) * shared_cameras, so aux sources overlap different reference
    # viewpoints. The remaining cameras are specific to the source.
    shared_cameras: int = 3
    noise: float = 1.0
    track_length: int = 4
    time_horizon: int = 36000
    transit: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.sources < 1:
            raise ConfigError("need at least one source")
        self.identities = _per_source(self.identities, self.sources, "identities")
        self.images = _per_source(self.images, self.sources, "images")
        self.cameras = _per_source(self.cameras, self.sources, "cameras")
        self.domain_distortion = _per_source(self.domain_distortion, self.sources, "domain_distortion", float)
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if not 1 <= self.identity_rank <= self.dim:
            raise ConfigError("identity_rank must be in [1, dim]")
        for name in ("identity_scale", "domain_scale", "viewpoint_scale", "noise", "long_tail_exponent"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if min(self.domain_distortion) < 0:
            raise ConfigError("domain_distortion must be >= 0")
        for d, (ids, imgs, cams) in enumerate(zip(self.identities, self.images, self.cameras), 1):
            if ids < 2:
                raise ConfigError(f"source {d}: need at least 2 identities, got {ids}")
            if imgs < ids:
                raise ConfigError(f"source {d}: {imgs} images cannot cover {ids} identities")
            if cams < 1:
                raise ConfigError(f"source {d}: need at least one camera")
        if self.shared_cameras < 0:
            raise ConfigError("shared_cameras must be >= 0")
        if self.track_length < 1:
            raise ConfigError("track_length must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class SynthDataset:
    config: SynthConfig
    manifests: list
    features: dict  # source_id -> (n, dim) float32, rows aligned with the manifest

    def manifest(self, source_id: int) -> SourceManifest:
        return next(m for m in self.manifests if m.source_id == source_id)


def long_tail_counts(identities: int, total_images: int, exponent: float, seed: int) -> np.ndarray:
    """Per-identity image counts, each >= 1, summing to ``total_images``.

    Identity at popularity rank r gets weight r**-exponent; ranks are shuffled
    by ``seed``. Fractional shares are rounded by largest remainder, ties to
    the lower index.
    """
    if identities < 1 or total_images < identities:
        raise ConfigError(f"need total_images >= identities >= 1, got {total_images}, {identities}")
    rng = np.random.default_rng([seed, _COUNTS])
    ranks = rng.permutation(identities) + 1
    w = ranks.astype(np.float64) ** (-float(exponent))
    extra = total_images - identities
    share = extra * w / w.sum()
    base = np.floor(share).astype(np.int64)
    left = extra - int(base.sum())
    order = np.lexsort((np.arange(identities), -(share - base)))
    base[order[:left]] += 1
    return base + 1


def generate(cfg: SynthConfig) -> SynthDataset:
    basis_rng = _philox(cfg.seed, _BASIS)
    basis, _ = np.linalg.qr(basis_rng.standard_normal((cfg.dim, cfg.identity_rank)))
    unit = 1.0 / np.sqrt(cfg.dim)

    manifests, features = [], {}
    sample_no = 0
    for d in range(1, cfg.sources + 1):
        n_id, n_img, n_cam = cfg.identities[d - 1], cfg.images[d - 1], cfg.cameras[d - 1]
        drng = _philox(cfg.seed, _DOMAIN, d)
        domain = drng.standard_normal(cfg.dim) * unit * cfg.domain_scale
        style = np.eye(cfg.dim) + drng.standard_normal((cfg.dim, cfg.dim)) * unit * cfg.domain_distortion[d - 1]
        cams = _philox(cfg.seed, _CAMERA, d).standard_normal((n_cam, cfg.dim)) * unit * cfg.viewpoint_scale
        if d > 1:
            n_shared = min(cfg.shared_cameras, n_cam, cfg.cameras[0])
            take = ((d - 2) * cfg.shared_cameras + np.arange(n_shared)) % cfg.cameras[0]
            cams[:n_shared] = ref_cams[take]
        else:
            ref_cams = cams
        counts = long_tail_counts(n_id, n_img, cfg.long_tail_exponent, cfg.seed * 1000 + d)

        records, rows = [], []
        for ident in range(n_id):
            rng = _philox(cfg.seed, _IDENTITY, d * 10_000_000 + ident)
            centroid = basis @ rng.standard_normal(cfg.identity_rank) * (cfg.identity_scale / np.sqrt(cfg.identity_rank))
            start = int(rng.integers(0, max(cfg.time_horizon, 1)))
            k = 0
            n_tracks = -(-int(counts[ident]) // cfg.track_length)
            for t in range(n_tracks):
                cam = int(rng.integers(0, n_cam))
                t0 = start + int(rng.integers(0, cfg.transit + 1))
                length = min(cfg.track_length, int(counts[ident]) - k)
                for frame in range(length):
                    noise = _philox(cfg.seed, _SAMPLE, sample_no).standard_normal(cfg.dim) * unit * cfg.noise
                    sample_no += 1
                    x = style @ centroid + domain + cams[cam] + noise
                    rows.append(x / np.linalg.norm(x))
                    records.append(RawRecord(
                        image_id=f"s{d}_{ident:05d}_{k:04d}",
                        local_class=ident,
                        camera_id=cam,
                        timestamp=t0 + frame,
                        split="train",
                    ))
                    k += 1
        manifests.append(SourceManifest(d, tuple(records)))
        features[d] = np.asarray(rows, dtype=np.float32)
    return SynthDataset(cfg, manifests, features)


def generate_views(features: np.ndarray, n_models: int, n_views: int, model_noise: float,
                   view_noise: float, seed: int) -> list[list[np.ndarray]]:
    """Simulated multi-model / multi-view embeddings of the same samples.

    View v of sample i is the sample plus view-specific noise (shared by all
    models); model j applies its own random rotation and adds independent
    noise. Returns ``out[model][view]`` of shape (n, dim).
    """
    x = np.asarray(features, dtype=np.float64)
    n, dim = x.shape
    unit = 1.0 / np.sqrt(dim)
    views = [x + _philox(seed, _VIEWS, v).standard_normal((n, dim)) * unit * view_noise
             for v in range(n_views)]
    out = []
    for j in range(n_models):
        rng = _philox(seed, _VIEWS, 1000 + j)
        rot, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        out.append([v @ rot + rng.standard_normal((n, dim)) * unit * model_noise for v in views])
    return out


def save_config(cfg: SynthConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
