"""Model-provider side: proof-producing training, honest retraining and the
two adversarial unlearning procedures (batch-substituting retraining and
proof forging)."""

from __future__ import annotations

import math
import multiprocessing as mp
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist

from ._rng import keyed_rng
from .model import NumericalError, gradient, init_params, sample_gradient, sgd_step
from .proofs import Proof, ProofKindError, ProofStep, UpdateRule, validate_structure

BATCH_MODES = ("epoch_permutation", "uniform_with_replacement")
DEFAULT_CANDIDATES = 50
THREADS_ENV = "UNLEARN_AUDIT_THREADS"


class TrainingError(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"step {step}: {message}")
        self.step = step


class NeighborError(ValueError):
    pass


@dataclass(frozen=True)
class TrainingHyper:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-2
    weight_decay: float = 5e-4
    batch_mode: str = "epoch_permutation"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and learning_rate > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_mode not in BATCH_MODES:
            raise ValueError(f"batch_mode must be one of {BATCH_MODES}")

    def rule(self):
        return UpdateRule(self.learning_rate, self.weight_decay)


def default_workers():
    env = os.environ.get(THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def batch_stream(pool_ids, hyper: TrainingHyper, seed):
    """Yield the mini-batches of a run over ``pool_ids``.

    Both modes produce ``epochs * ceil(n / m)`` batches; in permutation mode
    the final batch of an epoch may be short.
    """
    pool = np.asarray(pool_ids, dtype=np.uint64)
    n, m = pool.size, hyper.batch_size
    if n == 0:
        raise ValueError("cannot draw batches from an empty pool")
    per_epoch = math.ceil(n / m)
    for epoch in range(hyper.epochs):
        rng = keyed_rng(seed, "batches", epoch)
        if hyper.batch_mode == "epoch_permutation":
            order = pool[rng.permutation(n)]
            for start in range(0, n, m):
                yield order[start:start + m]
        else:
            for _ in range(per_epoch):
                yield pool[rng.integers(0, n, size=m)]


def _run_sgd(dataset, config, hyper, seed, pool, kind, declared=(), select=None):
    config = replace(config, weight_decay=hyper.weight_decay)
    rule = hyper.rule()
    w = init_params(config, seed)
    initial = w
    steps = []
    for t, batch in enumerate(batch_stream(pool, hyper, seed), start=1):
        if select is not None:
            batch = select(w, batch, t)
        x, y = dataset.take(batch)
        try:
            g = gradient(w, x, y, rule.weight_decay)
        except NumericalError as exc:
            raise TrainingError(t, str(exc)) from None
        w = sgd_step(w, g, rule.learning_rate)
        if not w.is_finite():
            raise TrainingError(t, "parameters became non-finite")
        steps.append(ProofStep(t, w, batch, rule))
    return Proof(kind, config, dataset.fingerprint, seed, initial, tuple(steps), declared)


def train(dataset, config, hyper: TrainingHyper, seed) -> Proof:
    """Mini-batch SGD over the whole dataset, logged as a proof of training."""
    return _run_sgd(dataset, config, hyper, seed, dataset.ids, "PoT")


def _as_ids(ids):
    return np.unique(np.asarray(ids, dtype=np.uint64))


def retrain_naive(dataset, unlearn_ids, config, hyper, seed) -> Proof:
    """Honest retraining from scratch on the retained samples."""
    unlearn = _as_ids(unlearn_ids)
    retained = dataset.retained_ids(unlearn)
    kept = set(np.unique(dataset.labels[dataset.rows(retained)]).tolist())
    lost = sorted(set(range(dataset.num_classes)) - kept)
    if lost:
        warnings.warn(f"classes {lost} have no retained samples", stacklevel=2)
    return _run_sgd(dataset, config, hyper, seed, retained, "PoRT", unlearn)


@dataclass(frozen=True)
class NearestNeighborMap:
    neighbor: dict
    distance: dict

    def __len__(self):
        return len(self.neighbor)

    def __getitem__(self, uid):
        return self.neighbor[int(uid)]


def build_nn_map(dataset, unlearn_ids, chunk=512) -> NearestNeighborMap:
    """Exact same-class nearest retained neighbour of every unlearned sample
    (Euclidean; ties go to the lowest retained id)."""
    unlearn = _as_ids(unlearn_ids)
    rows_u = dataset.rows(unlearn)
    is_u = np.zeros(dataset.n, dtype=bool)
    is_u[rows_u] = True
    neighbor, distance = {}, {}
    for c in np.unique(dataset.labels[rows_u]):
        cand = np.flatnonzero((dataset.labels == c) & ~is_u)
        if cand.size == 0:
            raise NeighborError(f"class {int(c)} has no retained samples")
        queries = rows_u[dataset.labels[rows_u] == c]
        for start in range(0, queries.size, chunk):
            q = queries[start:start + chunk]
            dist = cdist(dataset.features[q], dataset.features[cand])
            best = np.argmin(dist, axis=1)
            for qi, bi, row in zip(q, best, dist):
                neighbor[int(dataset.ids[qi])] = int(dataset.ids[cand[bi]])
                distance[int(dataset.ids[qi])] = float(row[bi])
    return NearestNeighborMap(neighbor, distance)


def nearest_neighbor_batch(batch_ids, unlearn_ids, nn: NearestNeighborMap) -> np.ndarray:
    """Replace every unlearned id in the batch, in place, by its neighbour."""
    batch = np.array(batch_ids, dtype=np.uint64)
    return _substitute(batch, np.isin(batch, np.asarray(unlearn_ids, dtype=np.uint64)), nn)


def _substitute(batch, hit, nn):
    for i in np.flatnonzero(hit):
        try:
            batch[i] = nn.neighbor[int(batch[i])]
        except KeyError:
            raise NeighborError(f"no neighbour recorded for sample {int(batch[i])}") from None
    return batch


def gradient_matched_batch(params, batch_ids, dataset, unlearn_ids, candidates, seed,
                           weight_decay=0.0, step=0):
    """Among ``candidates`` random retained batches of the same size, return
    the one whose mean gradient is closest to that of ``batch_ids``.

    Returns ``(batch, distance)``.
    """
    if candidates < 1:
        raise ValueError("need at least one candidate batch")
    batch = np.asarray(batch_ids, dtype=np.uint64)
    retained = dataset.retained_ids(unlearn_ids)
    if retained.size < batch.size:
        raise ValueError(f"retained set ({retained.size}) is smaller than the batch ({batch.size})")
    target = gradient(params, *dataset.take(batch), weight_decay)
    rng = keyed_rng(seed, "gradient-matched", step)
    best, best_dist = None, math.inf
    for _ in range(candidates):
        cand = retained[rng.choice(retained.size, size=batch.size, replace=False)]
        dist = float(np.linalg.norm(gradient(params, *dataset.take(cand), weight_decay) - target))
        if dist < best_dist:
            best, best_dist = cand, dist
    return best, best_dist


def adv_retrain(dataset, unlearn_ids, config, hyper, mode, seed,
                candidates=DEFAULT_CANDIDATES) -> Proof:
    """Retraining whose batches are drawn from the full dataset and then
    mapped into the retained set (``mode`` is ``"sn"`` or ``"sr"``).

    Batches that miss the unlearn set are used as drawn.
    """
    if mode not in ("sn", "sr"):
        raise ValueError(f"mode must be 'sn' or 'sr', got {mode!r}")
    unlearn = _as_ids(unlearn_ids)
    nn = build_nn_map(dataset, unlearn) if mode == "sn" else None

    def select(w, batch, t):
        if not np.isin(batch, unlearn).any():
            return batch
        if mode == "sn":
            return nearest_neighbor_batch(batch, unlearn, nn)
        return gradient_matched_batch(w, batch, dataset, unlearn, candidates, seed,
                                      hyper.weight_decay, step=t)[0]

    return _run_sgd(dataset, config, hyper, seed, dataset.ids, "PoRT", unlearn, select)


# Per-process state for forging; set in the parent (inherited on fork) or by
# the pool initializer.
_FORGE = None


def _forge_init(ctx):
    global _FORGE
    _FORGE = ctx


def _forge_step(ctx, t):
    pot, dataset, flagged, retained, nn, lr_forge, seed = ctx
    step = pot.steps[t - 1]
    hit = flagged[dataset.rows(step.batch_ids)]
    if not hit.any():
        rng = keyed_rng(seed, "forge", t)
        row = dataset.rows(retained[rng.integers(retained.size)])[0]
        g = sample_gradient(step.params_after, dataset.features[row], dataset.labels[row])
        return ProofStep(t, sgd_step(step.params_after, g, lr_forge), step.batch_ids, step.rule)
    batch = _substitute(np.array(step.batch_ids), hit, nn)
    prev = pot.params_before(t)
    g = gradient(prev, *dataset.take(batch), step.rule.weight_decay)
    return ProofStep(t, sgd_step(prev, g, step.rule.learning_rate), batch, step.rule)


def _forge_chunk(ts):
    return [_forge_step(_FORGE, t) for t in ts]


def forge(pot: Proof, dataset, unlearn_ids, lr_forge, seed, workers=None) -> Proof:
    """Turn a proof of training into a proof of retraining without retraining.

    Steps whose batch misses the unlearn set keep their batch and get a
    single-sample SGD nudge of size ``lr_forge``; the others get the
    nearest-neighbour batch and are recomputed from the original previous
    parameters. Every step is independent, so the work is spread over
    ``workers`` processes; the result does not depend on ``workers``.
    """
    if pot.kind != "PoT":
        raise ProofKindError("forging needs a proof of training")
    if lr_forge < 0:
        raise ValueError("forging learning rate must be >= 0")
    validate_structure(pot, dataset)
    unlearn = _as_ids(unlearn_ids)
    retained = dataset.retained_ids(unlearn)
    nn = build_nn_map(dataset, unlearn)
    flagged = np.zeros(dataset.n, dtype=bool)
    flagged[dataset.rows(unlearn)] = True
    ctx = (pot, dataset, flagged, retained, nn, float(lr_forge), seed)
    workers = default_workers() if workers is None else max(1, int(workers))
    ts = list(range(1, pot.T + 1))
    if workers == 1 or pot.T < 2:
        steps = [_forge_step(ctx, t) for t in ts]
    else:
        chunks = [c.tolist() for c in np.array_split(ts, min(workers, pot.T))]
        method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
        with ProcessPoolExecutor(len(chunks), mp_context=mp.get_context(method),
                                 initializer=_forge_init, initargs=(ctx,)) as pool:
            steps = [s for part in pool.map(_forge_chunk, chunks) for s in part]
    return Proof("PoRT", pot.model_config, pot.dataset_fingerprint, pot.seed,
                 pot.initial_params, tuple(steps), unlearn)


def unlearn_hit_probability(unlearn_count, total_count, batch_size) -> float:
    """Chance that a batch of ``batch_size`` uniform draws (with replacement)
    contains at least one unlearned sample."""
    if not 0 <= unlearn_count <= total_count or total_count < 1 or batch_size < 1:
        raise ValueError("need 0 <= unlearn_count <= total_count and batch_size >= 1")
    if unlearn_count == total_count:
        return 1.0
    return float(-math.expm1(batch_size * math.log1p(-unlearn_count / total_count)))
