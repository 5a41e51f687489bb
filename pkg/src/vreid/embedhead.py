"""Trainable head: fc1 -> batch norm -> classifier, with a hand-written
backward pass, SGD with momentum and a binary checkpoint format.

The embedding used for retrieval is the batch-norm output.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError

EMBED_DIM = 512
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# trainable tensors, in checkpoint order together with the running stats
PARAM_NAMES = ("fc1_weight", "fc1_bias", "bn_gamma", "bn_beta", "cls_weight", "cls_bias")
TENSOR_ORDER = ("fc1_weight", "fc1_bias", "bn_gamma", "bn_beta",
                "bn_running_mean", "bn_running_var", "cls_weight", "cls_bias")
NO_DECAY = frozenset({"bn_gamma", "bn_beta"})
THETA_NAMES = ("fc1_weight", "fc1_bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")

CKPT_MAGIC = b"RFHD"
CKPT_VERSION = 1


@dataclass
class HeadParameters:
    fc1_weight: np.ndarray
    fc1_bias: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    cls_weight: np.ndarray
    cls_bias: np.ndarray
    # bumped by every optimizer step; lets backward() reject stale caches
    step: int = 0

    @property
    def d_in(self) -> int:
        return self.fc1_weight.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.fc1_weight.shape[1]

    @property
    def num_classes(self) -> int:
        return self.cls_weight.shape[1]

    def copy(self) -> "HeadParameters":
        return HeadParameters(**{n: getattr(self, n).copy() for n in TENSOR_ORDER}, step=self.step)

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in TENSOR_ORDER}

    def validate(self):
        d, e = self.fc1_weight.shape
        c = self.cls_weight.shape[1]
        shapes = {"fc1_bias": (e,), "bn_gamma": (e,), "bn_beta": (e,), "bn_running_mean": (e,),
                  "bn_running_var": (e,), "cls_weight": (e, c), "cls_bias": (c,)}
        for n, s in shapes.items():
            if getattr(self, n).shape != s:
                raise DataError(f"{n} has shape {getattr(self, n).shape}, expected {s}")
        for n in TENSOR_ORDER:
            if not np.all(np.isfinite(getattr(self, n))):
                raise NumericError(f"{n} contains non-finite values")
        if np.any(self.bn_running_var <= 0):
            raise NumericError("bn_running_var must be strictly positive")


@dataclass
class Prediction:
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class ForwardCache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    f: np.ndarray
    probs: np.ndarray
    step: int


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_classifier(embed_dim: int, num_classes: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    # separate stream from fc1 so a swapped classifier draws exactly what a
    # fresh head with the same seed would
    rng = np.random.default_rng([seed, 2])
    return _uniform(rng, embed_dim, (embed_dim, num_classes)), _uniform(rng, embed_dim, (num_classes,))


def init_head(d_in: int, num_classes: int, seed: int, embed_dim: int = EMBED_DIM) -> HeadParameters:
    if d_in < 1 or embed_dim < 1 or num_classes < 1:
        raise ConfigError("head dimensions must be positive")
    rng = np.random.default_rng([seed, 1])
    w, b = init_classifier(embed_dim, num_classes, seed)
    return HeadParameters(
        fc1_weight=_uniform(rng, d_in, (d_in, embed_dim)),
        fc1_bias=_uniform(rng, d_in, (embed_dim,)),
        bn_gamma=np.ones(embed_dim),
        bn_beta=np.zeros(embed_dim),
        bn_running_mean=np.zeros(embed_dim),
        bn_running_var=np.ones(embed_dim),
        cls_weight=w,
        cls_bias=b,
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: HeadParameters, batch: np.ndarray, mode: str = "eval", update_stats: bool = True):
    """Run the head on a (n, d_in) batch.

    Returns ``(f, Prediction, cache)``; ``cache`` is None in eval mode. In
    train mode the running statistics are updated in place unless
    ``update_stats`` is False.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise DataError(f"batch shape {x.shape} does not match d_in={params.d_in}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in input batch")

    h = x @ params.fc1_weight + params.fc1_bias
    if mode == "train":
        n = h.shape[0]
        mean = h.mean(axis=0)
        var = h.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (h - mean) * inv_std
        if update_stats:
            unbiased = var * n / (n - 1) if n > 1 else var
            params.bn_running_mean *= 1 - BN_MOMENTUM
            params.bn_running_mean += BN_MOMENTUM * mean
            params.bn_running_var *= 1 - BN_MOMENTUM
            params.bn_running_var += BN_MOMENTUM * unbiased
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(params.bn_running_var + BN_EPS)
        xhat = (h - params.bn_running_mean) * inv_std
    else:
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")

    f = params.bn_gamma * xhat + params.bn_beta
    logits = f @ params.cls_weight + params.cls_bias
    probs = softmax(logits)
    cache = None
    if mode == "train":
        cache = ForwardCache(x=x, xhat=xhat, inv_std=inv_std, f=f, probs=probs, step=params.step)
    return f, Prediction(logits, probs), cache


def embed(params: HeadParameters, features: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """Eval-mode embeddings f for a feature matrix."""
    out = [forward(params, features[i:i + batch_size], "eval")[0]
           for i in range(0, len(features), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.embed_dim))


def _check_labels(labels, num_classes):
    y = np.atleast_1d(np.asarray(labels))
    if y.dtype.kind not in "iu":
        raise DataError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise DataError(f"label out of range [0, {num_classes})")
    return y


def cross_entropy(pred: Prediction, labels) -> float:
    """Mean of -log q[label] over the batch (log-sum-exp stabilised)."""
    logits = np.atleast_2d(pred.logits)
    y = _check_labels(labels, logits.shape[1])
    if len(y) != len(logits):
        raise DataError(f"{len(y)} labels for {len(logits)} predictions")
    m = logits.max(axis=1, keepdims=True)
    log_z = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(log_z - logits[np.arange(len(y)), y]))


def backward(params: HeadParameters, cache: ForwardCache | None, batch, labels) -> dict[str, np.ndarray]:
    """Gradients of the mean cross-entropy w.r.t. every trainable tensor."""
    if cache is None:
        raise DataError("backward needs the cache of a train-mode forward")
    x = np.asarray(batch, dtype=np.float64)
    if cache.step != params.step or x.shape != cache.x.shape or not np.array_equal(x, cache.x):
        raise DataError("stale forward cache: parameters or batch changed since forward")
    y = _check_labels(labels, params.num_classes)
    n = len(x)

    dlogits = cache.probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    g = {}
    g["cls_weight"] = cache.f.T @ dlogits
    g["cls_bias"] = dlogits.sum(axis=0)
    df = dlogits @ params.cls_weight.T
    g["bn_gamma"] = (df * cache.xhat).sum(axis=0)
    g["bn_beta"] = df.sum(axis=0)
    dxhat = df * params.bn_gamma
    dh = cache.inv_std / n * (n * dxhat - dxhat.sum(axis=0) - cache.xhat * (dxhat * cache.xhat).sum(axis=0))
    g["fc1_weight"] = x.T @ dh
    g["fc1_bias"] = dh.sum(axis=0)
    return g


@dataclass
class SGDConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4


def sgd_step(params: HeadParameters, grads: dict, cfg: SGDConfig, buffers: dict) -> HeadParameters:
    """In-place SGD with momentum and coupled weight decay.

    v <- momentum * v + grad + wd * param ; param <- param - lr * v.
    ``buffers`` holds the momentum state and starts out empty.
    """
    if cfg.lr < 0:
        raise ConfigError(f"learning rate must be >= 0, got {cfg.lr}")
    for name in PARAM_NAMES:
        p = getattr(params, name)
        v = buffers.get(name)
        if v is None:
            v = buffers[name] = np.zeros_like(p)
        v *= cfg.momentum
        v += grads[name]
        if cfg.weight_decay and name not in NO_DECAY:
            v += cfg.weight_decay * p
        p -= cfg.lr * v
    params.step += 1
    return params


@dataclass(frozen=True)
class StepSchedule:
    base_lr: float = 0.02
    milestones: tuple[int, ...] = field(default=(40,))
    gamma: float = 0.1


def lr_at_epoch(schedule: StepSchedule, epoch: int) -> float:
    """Piecewise-constant lr; ``epoch`` is 0-based, so with milestone 40 the
    drop applies from epoch index 40 on."""
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    drops = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.base_lr * schedule.gamma ** drops


def swap_classifier(params: HeadParameters, new_class_count: int, seed: int,
                    buffers: dict | None = None) -> HeadParameters:
    """Return a copy with a freshly initialised classifier; fc1 and batch-norm
    tensors are copied unchanged. Classifier momentum in ``buffers`` is dropped."""
    if new_class_count < 2:
        raise ConfigError(f"new_class_count must be >= 2, got {new_class_count}")
    out = params.copy()
    out.cls_weight, out.cls_bias = init_classifier(params.embed_dim, new_class_count, seed)
    if buffers is not None:
        buffers.pop("cls_weight", None)
        buffers.pop("cls_bias", None)
    return out


def checksum(params: HeadParameters, names=TENSOR_ORDER) -> str:
    h = hashlib.sha256()
    for n in names:
        h.update(np.ascontiguousarray(getattr(params, n), dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(params: HeadParameters, path) -> None:
    """Write ``RFHD`` | u32 version | u32 d_in | u32 C | u32 embed_dim, then
    every tensor of TENSOR_ORDER as little-endian float64, row-major."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", CKPT_MAGIC, CKPT_VERSION, params.d_in, params.num_classes,
                             params.embed_dim))
        for n in TENSOR_ORDER:
            fh.write(np.ascontiguousarray(getattr(params, n), dtype="<f8").tobytes())


def load_checkpoint(path) -> HeadParameters:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize("<4sIIII")
    if len(raw) < head:
        raise DataError(f"{path}: truncated checkpoint header")
    magic, version, d_in, c, e = struct.unpack_from("<4sIIII", raw)
    if magic != CKPT_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    shapes = {"fc1_weight": (d_in, e), "fc1_bias": (e,), "bn_gamma": (e,), "bn_beta": (e,),
              "bn_running_mean": (e,), "bn_running_var": (e,), "cls_weight": (e, c), "cls_bias": (c,)}
    total = sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != head + 8 * total:
        raise DataError(f"{path}: expected {head + 8 * total} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8", offset=head).astype(np.float64)
    tensors, pos = {}, 0
    for n in TENSOR_ORDER:
        size = int(np.prod(shapes[n]))
        tensors[n] = flat[pos:pos + size].reshape(shapes[n]).copy()
        pos += size
    params = HeadParameters(**tensors)
    params.validate()
    return params
