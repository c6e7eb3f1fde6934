import numpy as np
import pytest

from unlearn_audit.datasets import BackdoorSpec, inject_backdoor
from unlearn_audit.experiments import (Trial, backdoor_seed, desk_trial, hit_frequency,
                                       pu_check, touched_steps, utility_table,
                                       verify_error_curve)
from unlearn_audit.model import ModelConfig
from unlearn_audit.unlearning import TrainingHyper, train


def small_trial(seed):
    return desk_trial(seed, dim=6, per_class=60, num_classes=3, test_per_class=20)


HYPER = TrainingHyper(epochs=2, batch_size=16, learning_rate=5e-2)
CFG = ModelConfig("linear", 6, 3)


def test_touched_steps_matches_membership():
    trial = small_trial(0)
    pot = train(trial.train, CFG, HYPER, 0)
    mask = touched_steps(pot, trial.train, trial.unlearn)
    expect = [bool(set(s.batch_ids.tolist()) & set(trial.unlearn.tolist())) for s in pot.steps]
    assert mask.tolist() == expect


def test_error_curve_epoch_stats():
    trial = small_trial(1)
    curve = verify_error_curve(trial, CFG, HYPER, 1, 1e-3)
    errs = np.array([s["error"] for s in curve["steps"]])
    hit = np.array([s["touched"] for s in curve["steps"]])
    assert len(curve["epochs"]) == 2
    first = curve["epochs"][0]
    per = len(errs) // 2
    assert first["touched"]["count"] + first["untouched"]["count"] == per
    if first["touched"]["count"]:
        assert first["touched"]["mean"] == pytest.approx(errs[:per][hit[:per]].mean())


def test_utility_table_reports_failures():
    def setup(seed):
        if seed == 1:
            raise ValueError("boom")
        return small_trial(seed)
    table, runs = utility_table(setup, CFG, HYPER, [0, 1], workers=1)
    assert list(runs.results) == [0] and "boom" in runs.failures[1]
    assert 0 <= table["Original"]["D_t"][0] <= 1


def test_hit_frequency_exact_cases():
    assert hit_frequency(0, 10, 5, 1000, 0) == 0.0
    assert hit_frequency(10, 10, 5, 1000, 0) == 1.0


def test_pu_check_rows():
    rows = pu_check([(0.1, 8)], total_count=100, trials=20_000, seed=3)
    assert abs(rows[0]["closed_form"] - rows[0]["empirical"]) < 0.02
    assert rows[0]["closed_form"] == pytest.approx(1 - 0.9 ** 8)


def test_backdoor_separates_with_longer_training():
    """Supplementary to the desk-recipe backdoor criterion: with 60 epochs and
    a trigger value of 3.5 the trigger is learned, and the test separates the
    original and forged models from the honest and nearest-neighbour ones."""
    cfg = ModelConfig.parse_arch("mlp:32", 20, 4, 5e-4)
    hyper = TrainingHyper(epochs=60)
    for seed in range(5):
        trial = desk_trial(seed)
        spec = BackdoorSpec([16, 17, 18, 19], seed % 4, [12, 13, 14, 15], (seed + 1) % 4,
                            trigger_value=3.5)
        poisoned, _ = inject_backdoor(trial.train, spec, trial.unlearn, seed)
        res = backdoor_seed(Trial(poisoned, trial.test, trial.unlearn), spec, cfg, hyper, seed,
                            1e-3, workers=1)
        assert res["Original"].beta <= 1e-6 and res["Adv-F"].beta <= 1e-6, seed
        assert res["Retrain"].beta >= 0.9 and res["Adv-R(S_n)"].beta >= 0.9, seed
