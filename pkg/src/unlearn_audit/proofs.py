"""Proofs of training / retraining and their bit-exact container format.

Container layout (all integers little-endian)::

    b"UPRF"  u16 version
    u32 metadata length, UTF-8 JSON metadata
    initial parameters, param_count x binary64
    T x step record:
        u64 t
        u8 rule kind, binary64 learning rate, binary64 weight decay
        u32 batch length, batch length x u64 sample id
        param_count x binary64 parameters after the step
    SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParameterVector

MAGIC = b"UPRF"
FORMAT_VERSION = 1
RULE_SGD = 0


class ProofFormatError(ValueError):
    pass


class ChecksumError(ProofFormatError):
    pass


class ProofStructureError(ValueError):
    pass


class StepIndexError(ProofStructureError):
    pass


class LayoutMismatchError(ProofStructureError):
    pass


class FingerprintMismatchError(ProofStructureError):
    pass


class UnknownBatchSampleError(ProofStructureError):
    pass


class NonFiniteParamsError(ProofStructureError):
    pass


class ProofKindError(ProofStructureError):
    pass


@dataclass(frozen=True)
class UpdateRule:
    learning_rate: float
    weight_decay: float = 0.0
    kind: str = "sgd"

    def __post_init__(self):
        if self.kind != "sgd":
            raise ValueError(f"unsupported update rule {self.kind!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be >= 0")


@dataclass(frozen=True, eq=False)
class ProofStep:
    t: int
    params_after: ParameterVector
    batch_ids: np.ndarray
    rule: UpdateRule

    def __post_init__(self):
        ids = np.array(self.batch_ids, dtype=np.uint64).reshape(-1)
        if ids.size == 0:
            raise ValueError("a proof step needs a non-empty batch")
        ids.setflags(write=False)
        object.__setattr__(self, "batch_ids", ids)


@dataclass(frozen=True, eq=False)
class Proof:
    """Ordered log of SGD steps: a proof of training (``PoT``) or of
    retraining (``PoRT``)."""

    kind: str
    model_config: ModelConfig
    dataset_fingerprint: bytes
    seed: int
    initial_params: ParameterVector
    steps: tuple = ()
    declared_unlearn_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))

    def __post_init__(self):
        if self.kind not in ("PoT", "PoRT"):
            raise ValueError(f"proof kind must be PoT or PoRT, got {self.kind!r}")
        declared = np.unique(np.asarray(self.declared_unlearn_ids, dtype=np.uint64))
        declared.setflags(write=False)
        object.__setattr__(self, "declared_unlearn_ids", declared)
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "dataset_fingerprint", bytes(self.dataset_fingerprint))
        if self.kind == "PoT" and declared.size:
            raise ProofKindError("a proof of training cannot declare unlearned ids")
        layout = self.model_config.layout()
        if self.initial_params.layout != layout:
            raise LayoutMismatchError("initial parameters do not match the model layout")
        for i, step in enumerate(self.steps, start=1):
            if step.t != i:
                raise StepIndexError(f"step index {step.t} at position {i}")
            if step.params_after.layout != layout:
                raise LayoutMismatchError(f"step {step.t}: parameter layout mismatch")

    @property
    def T(self):
        return len(self.steps)

    @property
    def final_params(self):
        return self.steps[-1].params_after if self.steps else self.initial_params

    def params_before(self, t):
        """Parameters the update at step ``t`` (1-based) starts from."""
        return self.initial_params if t == 1 else self.steps[t - 2].params_after


def append_step(proof: Proof, step: ProofStep) -> Proof:
    expected = proof.T + 1
    if step.t != expected:
        raise StepIndexError(f"expected step {expected}, got {step.t}")
    if step.params_after.layout != proof.initial_params.layout:
        raise LayoutMismatchError(f"step {step.t}: parameter layout mismatch")
    return replace(proof, steps=proof.steps + (step,))


def _metadata(proof):
    return {
        "kind": proof.kind,
        "model_config": proof.model_config.to_dict(),
        "dataset_fingerprint": proof.dataset_fingerprint.hex(),
        "seed": int(proof.seed),
        "declared_unlearn_ids": [int(i) for i in proof.declared_unlearn_ids],
        "T": proof.T,
        "param_count": len(proof.initial_params),
        "layout": [[name, list(shape)] for name, shape in proof.initial_params.layout],
    }


def to_bytes(proof: Proof) -> bytes:
    if proof.kind == "PoT" and proof.declared_unlearn_ids.size:
        raise ProofKindError("a proof of training cannot declare unlearned ids")
    meta = json.dumps(_metadata(proof), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<H", FORMAT_VERSION)
    out += struct.pack("<I", len(meta)) + meta
    out += proof.initial_params.values.astype("<f8").tobytes()
    for step in proof.steps:
        out += struct.pack("<QBddI", step.t, RULE_SGD, step.rule.learning_rate,
                           step.rule.weight_decay, step.batch_ids.size)
        out += step.batch_ids.astype("<u8").tobytes()
        out += step.params_after.values.astype("<f8").tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def serialize(proof: Proof, path) -> None:
    Path(path).write_bytes(to_bytes(proof))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, size):
        if self.pos + size > len(self.buf):
            raise ProofFormatError("truncated proof body")
        chunk = self.buf[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Proof:
    if len(data) < 6 or data[:4] != MAGIC:
        raise ProofFormatError("not a proof container (bad magic)")
    version = struct.unpack("<H", data[4:6])[0]
    if version != FORMAT_VERSION:
        raise ProofFormatError(f"unsupported proof format version {version}")
    if len(data) < 6 + 32:
        raise ProofFormatError("truncated proof container")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("proof checksum mismatch")

    r = _Reader(body)
    r.take(6)
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProofFormatError(f"bad metadata block: {exc}") from None
    config = ModelConfig.from_dict(meta["model_config"])
    layout = tuple((name, tuple(shape)) for name, shape in meta["layout"])
    count = int(meta["param_count"])

    def params():
        return ParameterVector(np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64),
                               layout)

    initial = params()
    steps = []
    for _ in range(int(meta["T"])):
        t, kind, lr, wd, blen = r.unpack("<QBddI")
        if kind != RULE_SGD:
            raise ProofFormatError(f"step {t}: unknown update rule kind {kind}")
        ids = np.frombuffer(r.take(8 * blen), dtype="<u8").astype(np.uint64)
        steps.append(ProofStep(t, params(), ids, UpdateRule(lr, wd)))
    if r.pos != len(body):
        raise ProofFormatError("trailing bytes after the last step")
    return Proof(meta["kind"], config, bytes.fromhex(meta["dataset_fingerprint"]),
                 int(meta["seed"]), initial, tuple(steps),
                 np.asarray(meta["declared_unlearn_ids"], dtype=np.uint64))


def deserialize(path) -> Proof:
    return from_bytes(Path(path).read_bytes())


def validate_structure(proof: Proof, dataset) -> None:
    """Raise the first structural violation of ``proof`` against ``dataset``."""
    if proof.dataset_fingerprint != dataset.fingerprint:
        raise FingerprintMismatchError("proof is bound to a different dataset")
    cfg = proof.model_config
    if cfg.input_dim != dataset.dim or cfg.num_classes != dataset.num_classes:
        raise LayoutMismatchError("model dimensions do not match the dataset")
    if not proof.initial_params.is_finite():
        raise NonFiniteParamsError("initial parameters are not finite")
    for i, step in enumerate(proof.steps, start=1):
        if step.t != i:
            raise StepIndexError(f"step index {step.t} at position {i}")
        known = dataset.contains(step.batch_ids)
        if not known.all():
            bad = int(step.batch_ids[np.argmin(known)])
            raise UnknownBatchSampleError(f"step {step.t}: sample {bad} is not in the dataset")
        if not step.params_after.is_finite():
            raise NonFiniteParamsError(f"step {step.t}: parameters are not finite")
