"""``unlearn-audit``: train, unlearn (honestly or not), verify and run the
desk-scale experiments from the command line.

Exit codes: 0 success or verified pass, 2 verified fail, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .datasets import (BackdoorSpec, gen_blobs, inject_backdoor, load_csv, load_idx,
                       split_dirichlet, split_random)
from .model import ModelConfig, accuracy, macro_f1, predict
from .proofs import deserialize, serialize
from .unlearning import TrainingHyper, adv_retrain, forge, retrain_naive, train
from .verification import backdoor_verify, verify_reproducing

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
UNLEARN_MODES = ("retrain", "adv-sr", "adv-sn", "forge")
EXPERIMENTS = ("utility-table", "verify-error-curve", "lr-sweep", "pu-check")
PU_CASES = ((0.02, 128), (0.1, 64))


class UsageError(ValueError):
    pass


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _blobs(text):
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("expected k,d,n,spread")
    return int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])


def _dirichlet(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected alpha,pieces,index")
    return float(parts[0]), int(parts[1]), int(parts[2])


# Argument groups

def _add_data_args(p):
    g = p.add_argument_group("data")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--data-csv", type=Path)
    src.add_argument("--data-idx-images", type=Path)
    src.add_argument("--blobs", type=_blobs, metavar="K,D,N,SPREAD",
                     help="synthetic blobs (default 4,20,1000,0.5)")
    g.add_argument("--data-idx-labels", type=Path)
    g.add_argument("--label-column", default="-1", help="CSV label column (name or index)")
    tsrc = g.add_mutually_exclusive_group()
    tsrc.add_argument("--test-csv", type=Path)
    tsrc.add_argument("--test-idx-images", type=Path)
    g.add_argument("--test-idx-labels", type=Path)
    g.add_argument("--test-per-class", type=int, default=2500,
                   help="test blobs per class when --blobs is used")
    g.add_argument("--data-seed", type=int, help="blob seed (default: --seed)")


def _add_unlearn_args(p):
    g = p.add_argument_group("unlearn set").add_mutually_exclusive_group()
    g.add_argument("--unlearn-fraction", type=float)
    g.add_argument("--unlearn-dirichlet", type=_dirichlet, metavar="ALPHA,PIECES,INDEX")
    g.add_argument("--unlearn-ids", type=Path, metavar="FILE")


def _add_backdoor_args(p):
    g = p.add_argument_group("backdoor")
    g.add_argument("--trigger", type=_ints, metavar="I,J,...",
                   help="primary trigger coordinates; enables poisoning of the unlearn set")
    g.add_argument("--target-label", type=int, default=0)
    g.add_argument("--alt-trigger", type=_ints, metavar="I,J,...")
    g.add_argument("--alt-label", type=int, default=1)
    g.add_argument("--trigger-value", type=float, default=1.0)
    g.add_argument("--poison-fraction", type=float, default=0.1)


def _add_train_args(p):
    d = TrainingHyper()
    g = p.add_argument_group("training")
    g.add_argument("--arch", default="mlp:32", help="linear or mlp:H")
    g.add_argument("--epochs", type=int, default=d.epochs)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--lr", type=float, default=d.learning_rate)
    g.add_argument("--weight-decay", type=float, default=d.weight_decay)
    g.add_argument("--batch-mode", choices=("epoch_permutation", "uniform_with_replacement"),
                   default=d.batch_mode)


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    _add_data_args(p)


# Building inputs from flags

def _load(kind, args):
    csv_path = getattr(args, f"{kind}_csv")
    images = getattr(args, f"{kind}_idx_images")
    labels = getattr(args, f"{kind}_idx_labels")
    if csv_path is not None:
        col = args.label_column
        return load_csv(csv_path, int(col) if col.lstrip("-").isdigit() else col)
    if images is not None:
        if labels is None:
            raise UsageError(f"--{kind}-idx-images needs --{kind}-idx-labels")
        return load_idx(images, labels)
    return None


def _file_source(args):
    return args.data_csv is not None or args.data_idx_images is not None


def load_data(args, seed=None):
    """Training and (optional) test datasets named by the flags."""
    seed = args.seed if seed is None else seed
    data_seed = args.data_seed if args.data_seed is not None else seed
    if _file_source(args):
        return _load("data", args), _load("test", args)
    k, d, n, spread = args.blobs or (4, 20, 1000, 0.5)
    test = _load("test", args)
    if test is None:
        test = gen_blobs(k, d, args.test_per_class, spread, data_seed + ex.TEST_SEED_OFFSET)
    return gen_blobs(k, d, n, spread, data_seed), test


def select_unlearn(args, dataset, seed=None, required=True):
    seed = args.seed if seed is None else seed
    if args.unlearn_fraction is not None:
        return split_random(dataset, args.unlearn_fraction, seed)
    if args.unlearn_dirichlet is not None:
        alpha, pieces, index = args.unlearn_dirichlet
        return split_dirichlet(dataset, alpha, pieces, index, seed)
    if args.unlearn_ids is not None:
        ids = np.array(args.unlearn_ids.read_text().split(), dtype=np.uint64)
        return np.unique(ids)
    if required:
        raise UsageError("an unlearn set is required "
                         "(--unlearn-fraction, --unlearn-dirichlet or --unlearn-ids)")
    return None


def backdoor_spec(args):
    if args.trigger is None:
        return None
    if args.alt_trigger is None:
        raise UsageError("--trigger needs --alt-trigger")
    return BackdoorSpec(args.trigger, args.target_label, args.alt_trigger, args.alt_label,
                        args.trigger_value, args.poison_fraction)


def prepare(args, need_unlearn):
    """Dataset (poisoned when a trigger is given), test set and unlearn ids."""
    ds, test = load_data(args)
    spec = backdoor_spec(args)
    unlearn = select_unlearn(args, ds, required=need_unlearn or spec is not None)
    if spec is not None:
        ds, _ = inject_backdoor(ds, spec, unlearn, args.seed)
    return ds, test, unlearn


def hyper_from(args):
    return TrainingHyper(args.epochs, args.batch_size, args.lr, args.weight_decay,
                         args.batch_mode)


def config_from(args, ds):
    return ModelConfig.parse_arch(args.arch, ds.dim, ds.num_classes, args.weight_decay)


def _emit(payload, path=None, brief=None):
    """Write ``payload`` to ``path`` and print it, or only ``brief`` keys of it."""
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    if brief is not None:
        text = json.dumps({k: payload[k] for k in brief}, indent=2, sort_keys=True)
    print(text)


# Commands

def cmd_train(args):
    ds, test, _ = prepare(args, need_unlearn=False)
    pot = train(ds, config_from(args, ds), hyper_from(args), args.seed)
    serialize(pot, args.out)
    w = pot.final_params
    metrics = {"proof": str(args.out), "steps": pot.T,
               "train_accuracy": accuracy(w, ds),
               "train_macro_f1": macro_f1(predict(w, ds.features), ds.labels, ds.num_classes)}
    if test is not None:
        metrics["test_accuracy"] = accuracy(w, test)
        metrics["test_macro_f1"] = macro_f1(predict(w, test.features), test.labels,
                                            test.num_classes)
    _emit(metrics, args.metrics_out)
    return EXIT_OK


def cmd_unlearn(args):
    ds, test, unlearn = prepare(args, need_unlearn=True)
    config, hyper = config_from(args, ds), hyper_from(args)
    if args.mode == "forge":
        if args.pot is None:
            raise UsageError("forge mode needs --pot")
        proof = forge(deserialize(args.pot), ds, unlearn, args.gamma_r, args.seed)
    elif args.mode == "retrain":
        proof = retrain_naive(ds, unlearn, config, hyper, args.seed)
    else:
        proof = adv_retrain(ds, unlearn, config, hyper, args.mode[-2:], args.seed,
                            args.candidates)
    serialize(proof, args.out)
    trial = ex.Trial(ds, test, unlearn)
    metrics = {"proof": str(args.out), "mode": args.mode, "steps": proof.T,
               "unlearned": int(unlearn.size),
               "macro_f1": ex.split_f1(proof.final_params, trial)}
    _emit(metrics, args.metrics_out)
    return EXIT_OK


def cmd_verify(args):
    ds, _, unlearn = prepare(args, need_unlearn=False)
    proof = deserialize(args.proof)
    if unlearn is None:
        unlearn = proof.declared_unlearn_ids
    report = verify_reproducing(proof, ds, unlearn, args.epsilon)
    # per-step lists can run to thousands of entries; they go to --report-out only
    _emit(report.to_dict(), args.report_out,
          brief=("verdict", "epsilon", "max_error", "raw_bits", "mean_error", "removable_ok"))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_backdoor(args):
    _, test = load_data(args)
    if test is None:
        raise UsageError("the backdoor test needs a test set (--test-csv or --test-idx-images)")
    spec = backdoor_spec(args)
    if spec is None:
        raise UsageError("the backdoor test needs --trigger and --alt-trigger")
    proof = deserialize(args.proof)
    result = backdoor_verify(proof.final_params, test, spec, args.n, args.alpha, args.seed,
                             args.test_fraction)
    _emit(result.to_dict(), args.report_out)
    return EXIT_OK


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _trial_factory(args):
    def setup(seed):
        ds, test = load_data(args, seed)
        return ex.Trial(ds, test, select_unlearn(args, ds, seed))
    return setup


def cmd_experiment(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = range(args.seed, args.seed + args.seeds)
    hyper = hyper_from(args)
    summary = {"experiment": args.name, "seeds": list(seeds)}
    if args.name == "pu-check":
        rows = ex.pu_check(PU_CASES, trials=args.trials, seed=args.seed)
        _write_csv(out / "pu_check.csv", ["ratio", "batch_size", "closed_form", "empirical"],
                   [[r["ratio"], r["batch_size"], r["closed_form"], r["empirical"]]
                    for r in rows])
        summary["rows"] = rows
        _emit(summary)
        return EXIT_OK

    if args.unlearn_fraction is None and args.unlearn_dirichlet is None \
            and args.unlearn_ids is None:
        args.unlearn_fraction = 0.1
    setup = _trial_factory(args)
    probe = setup(args.seed).train
    config = config_from(args, probe)

    if args.name == "utility-table":
        table, runs = ex.utility_table(setup, config, hyper, seeds, args.gamma_r)
        rows = [[row] + [f"{m:.4f} ± {s:.4f}" for m, s in cols.values()]
                for row, cols in table.items()]
        _write_csv(out / "utility_table.csv", ["method", *ex.UTILITY_COLUMNS], rows)
        summary.update(table={r: {c: list(v) for c, v in cols.items()}
                              for r, cols in table.items()},
                       failed_seeds=runs.failures)
    elif args.name == "verify-error-curve":
        curve = ex.verify_error_curve(setup(args.seed), config, hyper, args.seed, args.gamma_r)
        _write_csv(out / "verify_error_curve.csv", ["step", "error", "touched"],
                   [[s["step"], repr(s["error"]), int(s["touched"])] for s in curve["steps"]])
        (out / "verify_error_epochs.json").write_text(json.dumps(curve["epochs"], indent=2))
        summary["epochs"] = curve["epochs"]
    else:
        rows = ex.lr_sweep(setup, config, hyper, seeds)
        _write_csv(out / "lr_sweep.csv", ["gamma", "max_error", "mean_error"],
                   [[r["gamma"], r["max_error"], r["mean_error"]] for r in rows])
        summary["rows"] = rows
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    _emit(summary)
    failed = summary.get("failed_seeds")
    return EXIT_ERROR if failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="unlearn-audit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and write a proof of training")
    _common(p)
    _add_train_args(p)
    _add_unlearn_args(p)
    _add_backdoor_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--metrics-out", type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unlearn", help="produce a proof of retraining")
    _common(p)
    _add_train_args(p)
    _add_unlearn_args(p)
    _add_backdoor_args(p)
    p.add_argument("--mode", choices=UNLEARN_MODES, required=True)
    p.add_argument("--pot", type=Path, help="proof of training to forge from")
    p.add_argument("--gamma-r", type=float, default=1e-3, help="forging learning rate")
    p.add_argument("--candidates", type=int, default=50, help="random batches tried by adv-sr")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--metrics-out", type=Path)
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("verify", help="replay a proof and check removability")
    _common(p)
    _add_unlearn_args(p)
    _add_backdoor_args(p)
    p.add_argument("--proof", type=Path, required=True)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--report-out", type=Path)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("backdoor", help="backdoor hypothesis test on a proof's final model")
    _common(p)
    _add_backdoor_args(p)
    p.add_argument("--proof", type=Path, required=True)
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--test-fraction", type=float, default=0.02)
    p.add_argument("--report-out", type=Path)
    p.set_defaults(func=cmd_backdoor)

    p = sub.add_parser("experiment", help="multi-seed desk-scale experiments")
    p.add_argument("name", choices=EXPERIMENTS)
    _common(p)
    _add_train_args(p)
    _add_unlearn_args(p)
    p.add_argument("--seeds", type=int, default=ex.DEFAULT_SEEDS)
    p.add_argument("--gamma-r", type=float, default=1e-3)
    p.add_argument("--trials", type=int, default=100_000, help="pu-check batches per case")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as exc:
        print(f"unlearn-audit: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
