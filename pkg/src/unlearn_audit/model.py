"""Linear-softmax and one-hidden-layer ReLU models over a flat parameter
vector, with exact gradients and bit-reproducible accumulation."""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from ._rng import keyed_rng


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    input_dim: int
    num_classes: int
    hidden_size: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.arch not in ("linear", "mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.arch == "mlp" and self.hidden_size < 1:
            raise ValueError("mlp needs hidden_size >= 1")
        if self.arch == "linear":
            object.__setattr__(self, "hidden_size", 0)
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        object.__setattr__(self, "weight_decay", float(self.weight_decay))

    @classmethod
    def parse_arch(cls, spec, input_dim, num_classes, weight_decay=0.0):
        """Build from a ``linear`` / ``mlp:H`` string."""
        if spec == "linear":
            return cls("linear", input_dim, num_classes, 0, weight_decay)
        if spec.startswith("mlp:"):
            return cls("mlp", input_dim, num_classes, int(spec[4:]), weight_decay)
        raise ValueError(f"arch must be 'linear' or 'mlp:H', got {spec!r}")

    def to_dict(self):
        return {"arch": self.arch, "input_dim": self.input_dim, "num_classes": self.num_classes,
                "hidden_size": self.hidden_size, "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, d):
        return cls(d["arch"], int(d["input_dim"]), int(d["num_classes"]),
                   int(d.get("hidden_size", 0)), float(d.get("weight_decay", 0.0)))

    def layout(self):
        d, k, h = self.input_dim, self.num_classes, self.hidden_size
        if self.arch == "linear":
            return (("W", (d, k)), ("b", (k,)))
        return (("W1", (d, h)), ("b1", (h,)), ("W2", (h, k)), ("b2", (k,)))


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat float64 parameter vector plus its tensor layout."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        v.setflags(write=False)
        layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in self.layout)
        total = sum(prod(shape) for _, shape in layout)
        if v.size != total:
            raise ValueError(f"parameter length {v.size} does not match layout total {total}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "layout", layout)

    def __len__(self):
        return self.values.size

    def tensors(self):
        out, start = {}, 0
        for name, shape in self.layout:
            size = prod(shape)
            out[name] = self.values[start:start + size].reshape(shape)
            start += size
        return out

    def is_finite(self):
        return bool(np.all(np.isfinite(self.values)))

    def bitwise_equal(self, other):
        return (self.layout == other.layout
                and self.values.tobytes() == other.values.tobytes())


def init_params(config: ModelConfig, seed) -> ParameterVector:
    """Xavier-uniform weights, zero biases."""
    rng = keyed_rng(seed, "init")
    parts = []
    for name, shape in config.layout():
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            parts.append(rng.uniform(-bound, bound, size=shape).reshape(-1))
        else:
            parts.append(np.zeros(shape))
    return ParameterVector(np.concatenate(parts), config.layout())


def _dense(x, w, b):
    # einsum keeps BLAS (and its thread-dependent blocking) out of the replay path
    return np.einsum("bi,io->bo", x, w) + b


def _forward(params, x):
    t = params.tensors()
    if "W" in t:
        return _dense(x, t["W"], t["b"]), None
    pre = _dense(x, t["W1"], t["b1"])
    hid = np.maximum(pre, 0.0)
    return _dense(hid, t["W2"], t["b2"]), (pre, hid)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def logits(params, features):
    return _forward(params, np.asarray(features, dtype=np.float64))[0]


def sample_losses(params, features, labels):
    """Per-sample cross-entropy."""
    z, _ = _forward(params, np.asarray(features, dtype=np.float64))
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return lse - z[np.arange(z.shape[0]), np.asarray(labels)]


def _seq_sum(rows):
    acc = rows[0].copy()
    for r in rows[1:]:
        acc += r
    return acc


def loss(params, features, labels, weight_decay=0.0) -> float:
    """Mean cross-entropy plus ``weight_decay/2 * ||w||^2``."""
    ce = sample_losses(params, features, labels)
    if ce.size == 0:
        raise ValueError("empty batch")
    total = 0.0
    for v in ce:
        total += float(v)
    w = params.values
    out = total / ce.size + 0.5 * weight_decay * float(np.dot(w, w))
    if not np.isfinite(out):
        raise NumericalError("non-finite loss")
    return out


def per_sample_gradients(params, features, labels) -> np.ndarray:
    """(B, P) matrix of per-sample cross-entropy gradients (no weight decay).

    Only elementwise products appear here; every reduction over samples is
    left to the caller.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    bsz = x.shape[0]
    z, cache = _forward(params, x)
    delta = _softmax(z)
    delta[np.arange(bsz), y] -= 1.0
    if cache is None:
        gw = np.einsum("bi,bk->bik", x, delta).reshape(bsz, -1)
        return np.concatenate([gw, delta], axis=1)
    pre, hid = cache
    w2 = params.tensors()["W2"]
    gw2 = np.einsum("bh,bk->bhk", hid, delta).reshape(bsz, -1)
    dpre = np.einsum("bk,hk->bh", delta, w2) * (pre > 0)
    gw1 = np.einsum("bi,bh->bih", x, dpre).reshape(bsz, -1)
    return np.concatenate([gw1, dpre, gw2, delta], axis=1)


def gradient(params, features, labels, weight_decay=0.0) -> np.ndarray:
    """Gradient of :func:`loss`.

    Per-sample terms are summed one row at a time in the order given; callers
    pass batches sorted by sample id (see ``Dataset.take``).
    """
    # overflow shows up as a non-finite result, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        per = per_sample_gradients(params, features, labels)
        if per.shape[0] == 0:
            raise ValueError("empty batch")
        g = _seq_sum(per)
        g /= per.shape[0]
        if weight_decay:
            g += weight_decay * params.values
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient")
    return g


def sample_gradient(params, x, y) -> np.ndarray:
    """Gradient of the cross-entropy of a single sample."""
    return per_sample_gradients(params, np.asarray(x, dtype=np.float64).reshape(1, -1),
                                np.asarray([y]))[0]


def sgd_step(params, grad, lr) -> ParameterVector:
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ValueError("gradient and parameters are not congruent")
    if lr == 0:
        return ParameterVector(params.values, params.layout)
    return ParameterVector(params.values - lr * grad, params.layout)


def predict(params, features) -> np.ndarray:
    """Arg-max class; ties go to the lowest index."""
    return np.argmax(logits(params, features), axis=1)


def accuracy(params, dataset) -> float:
    return float(np.mean(predict(params, dataset.features) == dataset.labels))


def macro_f1(predictions, truth, num_classes) -> float:
    """Unweighted mean of per-class F1; a class with no true or predicted
    samples scores 0."""
    p = np.asarray(predictions)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError("predictions and truth differ in length")
    scores = []
    for c in range(num_classes):
        tp = int(np.sum((p == c) & (t == c)))
        fp = int(np.sum((p == c) & (t != c)))
        fn = int(np.sum((p != c) & (t == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))
