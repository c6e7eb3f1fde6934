"""Verifier side: proof replay, the backdoor hypothesis test, and empirical
estimates of the smoothness constants behind the forging error bounds."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import gammaln, logsumexp, xlog1py, xlogy

from ._rng import keyed_rng
from .datasets import apply_trigger
from .model import (NumericalError, ParameterVector, gradient, per_sample_gradients, predict,
                    sgd_step)
from .proofs import validate_structure

DEFAULT_ALPHA = 1e-3
DEFAULT_TESTS = 30
DEFAULT_TEST_FRACTION = 0.02
DEFAULT_PROBES = 64
PROBE_STEP = 1e-4


def float_bits(x) -> str:
    return struct.pack(">d", float(x)).hex()


@dataclass
class VerificationReport:
    per_step_errors: np.ndarray
    max_error: float
    mean_error: float
    removable_ok: bool
    failing_steps: list
    unremovable_steps: list
    epsilon: float
    verdict: str

    @property
    def passed(self):
        return self.verdict == "pass"

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "epsilon": self.epsilon,
            "max_error": self.max_error,
            "raw_bits": float_bits(self.max_error),
            "mean_error": self.mean_error,
            "removable_ok": self.removable_ok,
            "failing_steps": list(self.failing_steps),
            "unremovable_steps": list(self.unremovable_steps),
            "per_step_errors": [float(e) for e in self.per_step_errors],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def replay_step(prev: ParameterVector, step, dataset) -> ParameterVector:
    """Recompute one logged update from the logged previous parameters."""
    x, y = dataset.take(step.batch_ids)
    return sgd_step(prev, gradient(prev, x, y, step.rule.weight_decay), step.rule.learning_rate)


def replay_errors(proof, dataset) -> np.ndarray:
    """Euclidean distance between each logged parameter vector and its replay."""
    errors = np.empty(proof.T)
    for i, step in enumerate(proof.steps):
        try:
            replay = replay_step(proof.params_before(step.t), step, dataset)
        except NumericalError:
            errors[i] = math.inf
            continue
        errors[i] = np.linalg.norm(step.params_after.values - replay.values)
    return errors


def verify_reproducing(proof, dataset, unlearn_ids, epsilon) -> VerificationReport:
    """Replay every step of ``proof`` and check that no batch touches the
    content of the unlearned samples."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    validate_structure(proof, dataset)
    errors = replay_errors(proof, dataset)

    forbidden = set(dataset.content_hashes(np.asarray(unlearn_ids, dtype=np.uint64)))
    flagged = np.fromiter((h in forbidden for h in dataset.sample_hashes), dtype=bool,
                          count=dataset.n)
    unremovable = [s.t for s in proof.steps if flagged[dataset.rows(s.batch_ids)].any()]

    failing = [int(t) for t in np.flatnonzero(~(errors <= epsilon)) + 1]
    max_error = float(errors.max()) if errors.size else 0.0
    mean_error = float(errors.mean()) if errors.size else 0.0
    removable_ok = not unremovable
    verdict = "pass" if removable_ok and max_error <= epsilon else "fail"
    return VerificationReport(errors, max_error, mean_error, removable_ok, failing,
                              unremovable, float(epsilon), verdict)


def _log_binom_pmf(n, p):
    k = np.arange(n + 1)
    return (gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
            + xlogy(k, p) + xlog1py(n - k, -p))


def type2_error(p, q, n=DEFAULT_TESTS, alpha=DEFAULT_ALPHA) -> float:
    """Probability of accepting "the data was unlearned" when the model still
    fires the trigger at rate ``p``, for a one-sided binomial test of size
    ``alpha`` against the chance rate ``q`` on ``n`` trials."""
    if not (0 <= p <= 1 and 0 <= q <= 1) or n < 1 or not 0 < alpha < 1:
        raise ValueError("need p, q in [0, 1], n >= 1 and alpha in (0, 1)")
    log_q = _log_binom_pmf(n, q)
    cdf_q = np.array([math.fsum(np.sort(np.exp(log_q[:k + 1]))) for k in range(n + 1)])
    accept = cdf_q <= 1 - alpha
    if not accept.any():
        return 0.0
    log_terms = _log_binom_pmf(n, p)[accept]
    beta = math.fsum(np.sort(np.exp(log_terms)))
    if beta == 0.0:
        beta = math.exp(logsumexp(log_terms))
    return float(min(1.0, max(0.0, beta)))


@dataclass
class HypothesisTestResult:
    p: float
    q: float
    n: int
    alpha: float
    beta: float
    subset_size: int

    def to_dict(self):
        d = asdict(self)
        d["raw_bits"] = float_bits(self.beta)
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def backdoor_verify(params, test_set, spec, n=DEFAULT_TESTS, alpha=DEFAULT_ALPHA, seed=0,
                    fraction=DEFAULT_TEST_FRACTION) -> HypothesisTestResult:
    """Estimate the trigger success rates of ``params`` and the resulting
    type-II error.

    Two disjoint random subsets of the test set are drawn; the first gets
    the primary trigger (success = predicting ``spec.target_label``), the
    second the alternate trigger (success = ``spec.alternate_label``).
    """
    spec.check(test_set.dim, test_set.num_classes)
    size = math.floor(fraction * test_set.n + 0.5)
    if size < 1 or 2 * size > test_set.n:
        raise ValueError(f"test fraction {fraction} gives subsets of size {size}")
    perm = keyed_rng(seed, "backdoor-test", test_set.fingerprint).permutation(test_set.n)
    first, second = perm[:size], perm[size:2 * size]
    xp = apply_trigger(test_set.features[first], spec.trigger_indices, spec.trigger_value)
    xq = apply_trigger(test_set.features[second], spec.alternate_trigger_indices,
                       spec.trigger_value)
    p = float(np.mean(predict(params, xp) == spec.target_label))
    q = float(np.mean(predict(params, xq) == spec.alternate_label))
    return HypothesisTestResult(p, q, int(n), float(alpha), type2_error(p, q, n, alpha), size)


@dataclass(frozen=True)
class ConstantsEstimate:
    """Empirical loss constants: per-sample gradient norm bound, parameter
    smoothness, input sensitivity of the gradient, and the class-wise
    covering radius of the data."""

    grad_bound: float
    smoothness: float
    input_lipschitz: float
    cover_radius: float
    num_probes: int


def class_cover_radius(dataset, chunk=1024) -> float:
    """Largest distance from any sample to its nearest other sample of the
    same class."""
    radius = 0.0
    for c in range(dataset.num_classes):
        x = dataset.features[dataset.labels == c]
        if x.shape[0] == 0:
            continue
        if x.shape[0] == 1:
            raise ValueError(f"class {c} has a single sample; its covering radius is undefined")
        for start in range(0, x.shape[0], chunk):
            d = cdist(x[start:start + chunk], x)
            idx = np.arange(d.shape[0])
            d[idx, start + idx] = np.inf
            radius = max(radius, float(d.min(axis=1).max()))
    return radius


def estimate_constants(dataset, config, param_points, num_probes=DEFAULT_PROBES, seed=0,
                       step=PROBE_STEP) -> ConstantsEstimate:
    """Probe gradient norms and finite-difference gradient changes at the
    given parameter points.

    Each point gets ``num_probes`` random samples, one random parameter
    direction and one random input direction per sample.
    """
    if not param_points:
        raise ValueError("need at least one parameter point")
    lam = config.weight_decay
    g_max = l_max = lx_max = 0.0
    for i, w in enumerate(param_points):
        rng = keyed_rng(seed, "constants", i)
        rows = rng.integers(0, dataset.n, size=num_probes)
        x, y = dataset.features[rows], dataset.labels[rows]
        base = per_sample_gradients(w, x, y)
        g_max = max(g_max, float(np.linalg.norm(base, axis=1).max()))

        v = rng.standard_normal(len(w))
        v /= np.linalg.norm(v)
        h = step * max(1.0, float(np.linalg.norm(w.values)))
        shifted = ParameterVector(w.values + h * v, w.layout)
        moved = per_sample_gradients(shifted, x, y) - base + lam * h * v
        l_max = max(l_max, float(np.linalg.norm(moved, axis=1).max()) / h)

        u = rng.standard_normal(x.shape)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        hx = step * np.maximum(1.0, np.linalg.norm(x, axis=1))
        moved_x = per_sample_gradients(w, x + hx[:, None] * u, y) - base
        lx_max = max(lx_max, float((np.linalg.norm(moved_x, axis=1) / hx).max()))
    return ConstantsEstimate(g_max, l_max, lx_max, class_cover_radius(dataset), num_probes)


@dataclass(frozen=True)
class ForgingBounds:
    """Learning-rate limits under which forged steps stay within ``epsilon``."""

    epsilon: float
    constants: ConstantsEstimate
    gamma_max: float

    def gamma_r_max(self, gamma):
        c = self.constants
        if gamma < 0 or gamma > self.gamma_max:
            raise ValueError(f"no feasible forging rate: gamma {gamma} exceeds {self.gamma_max}")
        num = self.epsilon - gamma * c.input_lipschitz * c.cover_radius
        if num <= 0:
            raise ValueError(f"no feasible forging rate at gamma {gamma}")
        return num / (c.grad_bound * (2 + gamma * c.smoothness))


def learning_rate_bounds(epsilon, constants: ConstantsEstimate) -> ForgingBounds:
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    c = constants
    bias = c.input_lipschitz * c.cover_radius
    if min(c.smoothness, bias, c.grad_bound) <= 0:
        raise ValueError("constants must be positive")
    delta = 4 * epsilon * c.smoothness / bias
    # sqrt(9 + delta) - 3 without cancellation
    gamma_max = delta / (math.sqrt(9 + delta) + 3) / (2 * c.smoothness)
    return ForgingBounds(float(epsilon), constants, gamma_max)


def epsilon_bound(gamma, constants: ConstantsEstimate) -> float:
    """Smallest threshold the forging bound guarantees at learning rate
    ``gamma``: ``L*C*gamma**2 + 3*C*gamma`` with ``C = max(Lx*C_D, G)``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    c = max(constants.input_lipschitz * constants.cover_radius, constants.grad_bound)
    return constants.smoothness * c * gamma * gamma + 3 * c * gamma
