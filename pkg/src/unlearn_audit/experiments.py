"""Multi-seed experiment runners behind ``unlearn-audit experiment``.

Each runner takes a ``setup(seed) -> Trial`` factory so the same protocol
works on synthetic blobs and on loaded files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._rng import keyed_rng
from .datasets import gen_blobs, split_random
from .model import macro_f1, predict
from .unlearning import (TrainingHyper, adv_retrain, forge, retrain_naive, train,
                         unlearn_hit_probability)
from .verification import backdoor_verify, replay_errors

TEST_SEED_OFFSET = 1000
DEFAULT_SEEDS = 5
LR_SWEEP = (5e-3, 1e-3, 5e-4, 1e-4, 5e-5)
UTILITY_ROWS = ("Original", "Retrain", "Adv-R(S_r)", "Adv-R(S_n)", "Adv-F")
UTILITY_COLUMNS = ("D_u", "D\\D_u", "D_t")


@dataclass(frozen=True)
class Trial:
    train: object
    test: object
    unlearn: np.ndarray


def desk_blobs(seed, num_classes=4, dim=20, per_class=1000, spread=0.5, test_per_class=2500):
    """Training and test blobs for one seed; the test draw uses its own seed."""
    return (gen_blobs(num_classes, dim, per_class, spread, seed),
            gen_blobs(num_classes, dim, test_per_class, spread, seed + TEST_SEED_OFFSET))


def desk_trial(seed, unlearn_fraction=0.1, **blob_args):
    tr, te = desk_blobs(seed, **blob_args)
    return Trial(tr, te, split_random(tr, unlearn_fraction, seed))


@dataclass
class SeedRuns:
    """Per-seed results plus the seeds that raised."""

    results: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)


def _over_seeds(seeds, fn):
    runs = SeedRuns()
    for seed in seeds:
        try:
            runs.results[seed] = fn(seed)
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            runs.failures[seed] = f"{type(exc).__name__}: {exc}"
    return runs


def split_f1(params, trial: Trial):
    """Macro-F1 on the unlearn set, the retained set and (when present) the
    test set."""
    tr = trial.train
    k = tr.num_classes
    rows_u = tr.rows(trial.unlearn)
    keep = np.ones(tr.n, dtype=bool)
    keep[rows_u] = False
    parts = [("D_u", tr.features[rows_u], tr.labels[rows_u]),
             ("D\\D_u", tr.features[keep], tr.labels[keep])]
    if trial.test is not None:
        parts.append(("D_t", trial.test.features, trial.test.labels))
    out = {}
    for name, x, y in parts:
        out[name] = macro_f1(predict(params, x), y, k)
    return out


def utility_seed(trial: Trial, config, hyper: TrainingHyper, seed, gamma_r, workers=None):
    """Final-model macro-F1 of every unlearning strategy on one seed."""
    ds, u = trial.train, trial.unlearn
    pot = train(ds, config, hyper, seed)
    proofs = {
        "Original": pot,
        "Retrain": retrain_naive(ds, u, config, hyper, seed),
        "Adv-R(S_r)": adv_retrain(ds, u, config, hyper, "sr", seed),
        "Adv-R(S_n)": adv_retrain(ds, u, config, hyper, "sn", seed),
        "Adv-F": forge(pot, ds, u, gamma_r, seed, workers),
    }
    return {name: split_f1(p.final_params, trial) for name, p in proofs.items()}


def utility_table(setup, config, hyper, seeds, gamma_r=1e-3, workers=None):
    """Mean and std of macro-F1 per (strategy, split) over ``seeds``.

    Returns ``(table, runs)``; ``table[row][column] = (mean, std)``.
    """
    runs = _over_seeds(seeds, lambda s: utility_seed(setup(s), config, hyper, s, gamma_r,
                                                     workers))
    table = {}
    for row in UTILITY_ROWS:
        table[row] = {}
        for col in UTILITY_COLUMNS:
            vals = [r[row][col] for r in runs.results.values()]
            table[row][col] = ((float(np.mean(vals)), float(np.std(vals))) if vals
                               else (math.nan, math.nan))
    return table, runs


def touched_steps(proof, dataset, unlearn):
    """Boolean mask of steps whose batch contains an unlearned sample."""
    flagged = np.zeros(dataset.n, dtype=bool)
    flagged[dataset.rows(np.asarray(unlearn, dtype=np.uint64))] = True
    return np.array([flagged[dataset.rows(s.batch_ids)].any() for s in proof.steps], dtype=bool)


def forging_errors(trial: Trial, config, hyper, seed, gamma_r, workers=None):
    """Per-step replay errors of a forged proof and the mask of steps that
    originally touched the unlearn set."""
    pot = train(trial.train, config, hyper, seed)
    forged = forge(pot, trial.train, trial.unlearn, gamma_r, seed, workers)
    return replay_errors(forged, trial.train), touched_steps(pot, trial.train, trial.unlearn)


def _stats(values):
    if values.size == 0:
        return {"count": 0, "mean": None, "std": None}
    return {"count": int(values.size), "mean": float(values.mean()), "std": float(values.std())}


def verify_error_curve(trial: Trial, config, hyper, seed, gamma_r, workers=None):
    """Step-wise forging errors and per-epoch statistics split by whether
    the original batch touched the unlearn set."""
    errors, touched = forging_errors(trial, config, hyper, seed, gamma_r, workers)
    per_epoch = math.ceil(trial.train.n / hyper.batch_size)
    epochs = []
    for e in range(math.ceil(errors.size / per_epoch)):
        sl = slice(e * per_epoch, (e + 1) * per_epoch)
        err, hit = errors[sl], touched[sl]
        epochs.append({"epoch": e + 1, "untouched": _stats(err[~hit]), "touched": _stats(err[hit])})
    steps = [{"step": t, "error": float(err), "touched": bool(hit)}
             for t, (err, hit) in enumerate(zip(errors, touched), start=1)]
    return {"steps": steps, "epochs": epochs}


def lr_sweep(setup, config, hyper, seeds, gammas=LR_SWEEP, workers=None):
    """Max and mean forging error per learning rate, with the forging rate
    equal to the training rate."""
    out = []
    for gamma in gammas:
        h = TrainingHyper(hyper.epochs, hyper.batch_size, gamma, hyper.weight_decay,
                          hyper.batch_mode)
        runs = _over_seeds(seeds, lambda s: forging_errors(setup(s), config, h, s, gamma,
                                                           workers)[0])
        errs = list(runs.results.values())
        out.append({
            "gamma": gamma,
            "max_error": max((float(e.max()) for e in errs), default=math.nan),
            "mean_error": float(np.mean([e.mean() for e in errs])) if errs else math.nan,
            "failed_seeds": runs.failures,
        })
    return out


def hit_frequency(unlearn_count, total_count, batch_size, trials, seed):
    """Fraction of uniform with-replacement batches that draw an id below
    ``unlearn_count`` (i.e. from the unlearn set)."""
    rng = keyed_rng(seed, "pu-check")
    hits = 0
    for start in range(0, trials, 10_000):
        size = min(10_000, trials - start)
        draws = rng.integers(0, total_count, size=(size, batch_size))
        hits += int(np.count_nonzero((draws < unlearn_count).any(axis=1)))
    return hits / trials


def pu_check(cases, total_count=4000, trials=100_000, seed=0):
    """Closed-form hit probability against Monte Carlo for each
    ``(unlearn_ratio, batch_size)`` case."""
    out = []
    for ratio, m in cases:
        u = round(ratio * total_count)
        out.append({"ratio": ratio, "batch_size": m,
                    "closed_form": unlearn_hit_probability(u, total_count, m),
                    "empirical": hit_frequency(u, total_count, m, trials, seed)})
    return out


def backdoor_seed(trial: Trial, spec, config, hyper, seed, gamma_r, n=30, alpha=1e-3,
                  workers=None):
    """Type-II error of the backdoor test on the original, retrained,
    nearest-neighbour retrained and forged models.

    ``trial.train`` must already carry the poisoned samples.
    """
    ds, u = trial.train, trial.unlearn
    pot = train(ds, config, hyper, seed)
    models = {
        "Original": pot.final_params,
        "Retrain": retrain_naive(ds, u, config, hyper, seed).final_params,
        "Adv-R(S_n)": adv_retrain(ds, u, config, hyper, "sn", seed).final_params,
        "Adv-F": forge(pot, ds, u, gamma_r, seed, workers).final_params,
    }
    return {name: backdoor_verify(w, trial.test, spec, n, alpha, seed) for name, w in models.items()}
