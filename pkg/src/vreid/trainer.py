"""Two-stage training of the embedding head.

Stage I trains on the pooled multi-source set with one global label space.
Stage II swaps in a fresh classifier for the target classes and fine-tunes
everything on the target set only.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import MergedLabelSpace, SampleRecord
from .embedhead import (EMBED_DIM, HeadParameters, SGDConfig, StepSchedule, backward, checksum,
                        cross_entropy, embed, forward, init_head, lr_at_epoch, sgd_step,
                        swap_classifier)
from .errors import ConfigError, DataError, NumericError

SAMPLERS = ("naive", "balanced")


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 60
    batch_size: int = 36
    schedule: StepSchedule = field(default_factory=StepSchedule)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    sampler: str = "naive"
    # balanced sampler draws per epoch; None means the dataset size
    draws: int | None = None
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")

    def to_json(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.schedule.base_lr,
                "milestones": list(self.schedule.milestones), "gamma": self.schedule.gamma,
                "momentum": self.momentum, "weight_decay": self.weight_decay, "seed": self.seed,
                "sampler": self.sampler, "draws": self.draws, "embed_dim": self.embed_dim}

    @classmethod
    def from_json(cls, obj: dict, base: "StageConfig | None" = None) -> "StageConfig":
        base = base or cls()
        sched = StepSchedule(float(obj.get("lr", base.schedule.base_lr)),
                             tuple(int(m) for m in obj.get("milestones", base.schedule.milestones)),
                             float(obj.get("gamma", base.schedule.gamma)))
        known = {"epochs", "batch_size", "momentum", "weight_decay", "seed", "sampler", "draws", "embed_dim"}
        unknown = set(obj) - known - {"lr", "milestones", "gamma"}
        if unknown:
            raise ConfigError(f"unknown stage config keys: {sorted(unknown)}")
        return replace(base, schedule=sched, **{k: obj[k] for k in known if k in obj})


def stage1_config(**kw) -> StageConfig:
    return StageConfig(epochs=60, schedule=StepSchedule(0.02, (40,)), **kw)


def stage2_config(**kw) -> StageConfig:
    return StageConfig(epochs=12, schedule=StepSchedule(0.02, (8,)), **kw)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    seconds: float
    checksum: str


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "lr", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.loss:.10f}", f"{e.lr:.6g}", f"{e.seconds:.3f}"])


def _labels(records) -> np.ndarray:
    if len(records) and isinstance(records[0], SampleRecord):
        return np.array([r.global_class for r in records], dtype=np.int64)
    return np.asarray(records, dtype=np.int64)


def naive_sampler(records, seed: int, epoch: int) -> np.ndarray:
    """Every record exactly once per epoch, in a (seed, epoch)-determined order."""
    n = records if isinstance(records, (int, np.integer)) else len(records)
    if n == 0:
        raise DataError("cannot sample from an empty record set")
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def balanced_sampler(records, seed: int, epoch: int, draws: int) -> np.ndarray:
    """Pick a class uniformly, then a record of that class uniformly."""
    y = _labels(records)
    if len(y) == 0:
        raise DataError("cannot sample from an empty record set")
    order = np.argsort(y, kind="stable")
    classes, starts, counts = np.unique(y[order], return_index=True, return_counts=True)
    rng = np.random.default_rng([seed, epoch, 1])
    cls = rng.integers(0, len(classes), size=draws)
    within = rng.integers(0, counts[cls])
    return order[starts[cls] + within]


def stack_records(records: Sequence[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    missing = [r.global_index for r in records if r.feature is None]
    if missing:
        raise DataError(f"{len(missing)} records have no feature vector, e.g. global_index {missing[:10]}")
    x = np.stack([np.asarray(r.feature, dtype=np.float64) for r in records])
    return x, _labels(records)


def train_epochs(params: HeadParameters, x: np.ndarray, y: np.ndarray, cfg: StageConfig,
                 buffers: dict | None = None) -> tuple[HeadParameters, TrainLog]:
    """Run ``cfg.epochs`` epochs of minibatch SGD in place on ``params``."""
    buffers = {} if buffers is None else buffers
    log = TrainLog()
    n = len(x)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(cfg.schedule, epoch)
        sgd = SGDConfig(lr, cfg.momentum, cfg.weight_decay)
        if cfg.sampler == "naive":
            order = naive_sampler(n, cfg.seed, epoch)
        else:
            order = balanced_sampler(y, cfg.seed, epoch, cfg.draws or n)
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            _, pred, cache = forward(params, xb, "train")
            loss = cross_entropy(pred, yb)
            if not np.isfinite(loss):
                raise NumericError(f"loss diverged at epoch {epoch}")
            total += loss * len(idx)
            sgd_step(params, backward(params, cache, xb, yb), sgd, buffers)
        log.epochs.append(EpochLog(epoch + 1, total / len(order), lr,
                                   time.perf_counter() - t0, checksum(params)))
    return params, log


def train_stage1(records: Sequence[SampleRecord], space: MergedLabelSpace, cfg: StageConfig,
                 init: HeadParameters | None = None) -> tuple[HeadParameters, TrainLog]:
    """Plain cross-entropy over the union of all sources (no per-source weights)."""
    x, y = stack_records(records)
    if y.min() < 0 or y.max() >= space.num_classes:
        raise DataError("record class outside the label space")
    if init is None:
        params = init_head(x.shape[1], space.num_classes, cfg.seed, cfg.embed_dim)
    else:
        if init.num_classes != space.num_classes:
            raise DataError(f"initial head has {init.num_classes} classes, space has {space.num_classes}")
        params = init.copy()
    return train_epochs(params, x, y, cfg)


def train_stage2(params: HeadParameters, records: Sequence[SampleRecord], space: MergedLabelSpace,
                 cfg: StageConfig, translate: dict | None = None) -> tuple[HeadParameters, TrainLog]:
    """Fine-tune on the target set after swapping in a fresh classifier.

    ``translate`` maps record global ids (merged space) to ids of ``space``;
    without it the record ids are taken to be in ``space`` already. The input
    ``params`` is not modified.
    """
    x, y = stack_records(records)
    if translate is not None:
        try:
            y = np.array([translate[int(c)] for c in y], dtype=np.int64)
        except KeyError as e:
            raise DataError(f"record class {e.args[0]} is not in the target space") from None
    if y.min() < 0 or y.max() >= space.num_classes:
        raise DataError("record class outside the target space")
    absent = sorted(set(range(space.num_classes)) - set(y.tolist()))
    if absent:
        raise DataError(f"{len(absent)} target classes have no training records, e.g. {absent[:10]}")
    if x.shape[1] != params.d_in:
        raise DataError(f"feature dim {x.shape[1]} != head d_in {params.d_in}")
    params = swap_classifier(params, space.num_classes, cfg.seed)
    return train_epochs(params, x, y, cfg)


@dataclass
class MarginReport:
    per_sample: np.ndarray
    per_class: dict
    mean: float


def margin_probe(params: HeadParameters, features: np.ndarray, labels, classes: Sequence[int] | None = None) -> MarginReport:
    """Cosine to the own class weight minus the largest cosine to any other
    class weight, computed on eval-mode embeddings.

    ``classes`` restricts the competing class weights (e.g. to the target
    classes of a head trained with auxiliary classes).
    """
    for name, t in params.tensors().items():
        if not np.all(np.isfinite(t)):
            raise NumericError(f"parameter {name} is not finite")
    y = np.asarray(labels, dtype=np.int64)
    cols = np.arange(params.num_classes) if classes is None else np.asarray(sorted(classes), dtype=np.int64)
    if len(cols) < 2:
        raise ConfigError("margin probe needs at least two classes")
    pos = {int(c): i for i, c in enumerate(cols)}
    try:
        own = np.array([pos[int(c)] for c in y])
    except KeyError as e:
        raise DataError(f"label {e.args[0]} is not among the probed classes") from None

    f = embed(params, np.asarray(features, dtype=np.float64))
    w = params.cls_weight[:, cols]
    cos = (f / np.linalg.norm(f, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=0, keepdims=True))
    own_cos = cos[np.arange(len(y)), own]
    cos[np.arange(len(y)), own] = -np.inf
    margin = own_cos - cos.max(axis=1)
    per_class = {int(c): float(margin[y == c].mean()) for c in np.unique(y)}
    return MarginReport(margin, per_class, float(margin.mean()))
