"""Command-line front end: ``perturbnet {train,align,sweep-sigma,check}``.

Exit codes: 0 success, 1 configuration error, 2 diverged run, 3 I/O or data
format error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence


from . import oracle
from .data import DATA_ENV, DataFormatError
from .harness import (DivergedRunError, ExperimentConfig, default_learning_rate, meta_path,
                      sigma_sweep, train, write_meta, write_metrics)
from .learners import RuleConfig, RuleKind
from .network import NetworkSpec
from .numerics import InvalidParameterError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--layers expects comma-separated integers, got {text!r}")
    if len(widths) < 2:
        raise argparse.ArgumentTypeError("--layers needs at least an input and an output width")
    return widths


ALGO_CHOICES = tuple(k.value for k in RuleKind) + tuple("d" + k.value for k in RuleKind)


def split_algo(name: str) -> tuple[str, bool]:
    """Map ``dnp`` to ``("np", True)`` and ``np`` to ``("np", False)``."""
    if name.startswith("d") and name[1:] in {k.value for k in RuleKind}:
        return name[1:], True
    return name, False


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="perturbnet", description="Node-perturbation training and diagnostics.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, layers_default):
        sp.add_argument("--layers", type=_widths, default=layers_default,
                        help="comma-separated widths N_0,...,N_L")
        sp.add_argument("--seed", type=int, action="append",
                        help="random seed; repeat for several runs (default 0)")
        sp.add_argument("--sigma2", type=float, default=1e-6, help="noise variance")
        sp.add_argument("--loss", choices=("cce", "mse"), default="cce")
        sp.add_argument("--slope", type=float, default=0.01, help="leaky-ReLU negative slope")
        sp.add_argument("--n-mode", choices=("noisy-units", "all-units"), default="noisy-units",
                        help="unit count N scaling ANP updates")
        sp.add_argument("--out", help="output CSV path")
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("train", help="train a network")
    common(t, None)
    t.add_argument("--algo", choices=ALGO_CHOICES, default="np",
                   help="update rule; a leading 'd' (dnp, danp, ...) implies --decorrelate")
    t.add_argument("--decorrelate", action="store_true", help="enable layer-wise input decorrelation")
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--batch-size", type=int, default=1000)
    t.add_argument("--lr", type=float, help="weight learning rate (default: per-depth table)")
    t.add_argument("--decor-lr", type=float, default=1e-3, help="decorrelation learning rate")
    t.add_argument("--noise-samples", type=int, default=1, help="noise draws K averaged per update")
    t.add_argument("--double-noisy", action="store_true",
                   help="replace the clean pass by a second noisy pass (np/anp only)")
    t.add_argument("--dataset", choices=("cifar10", "synthetic"), default="synthetic")
    t.add_argument("--data-dir", help=f"CIFAR-10 directory (default ${DATA_ENV})")
    t.add_argument("--n-train", type=int, default=5000, help="synthetic train size")
    t.add_argument("--n-test", type=int, default=1000, help="synthetic test size")
    t.add_argument("--classes", type=int, default=10, help="synthetic class count")
    t.add_argument("--margin", type=float, default=3.0, help="synthetic class separation")
    t.add_argument("--correlation", type=float, default=0.0, help="synthetic feature correlation")
    t.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic dataset")

    for name, helptext in (("align", "alignment angles vs noise iterations"),
                           ("sweep-sigma", "alignment angles vs noise variance")):
        a = sub.add_parser(name, help=helptext)
        common(a, (128, 64, 64, 64, 10))
        a.add_argument("--batch-size", type=int, default=100)
        a.add_argument("--algorithms", default="np,anp,inp")
        if name == "align":
            a.add_argument("--counts", default="1,10,100,1000", help="averaging counts")
        else:
            a.add_argument("--sigma2-list", default="1e-6,1e-5,1e-4")
            a.add_argument("--iterations", type=int, default=10)

    c = sub.add_parser("check", help="run the oracle checks")
    c.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> ExperimentConfig:
    algo, prefixed = split_algo(args.algo)
    decorrelate = args.decorrelate or prefixed
    widths = args.layers
    if widths is None:
        widths = (3072, 10) if args.dataset == "cifar10" else (128, 10)
    if args.dataset == "cifar10" and widths[0] != 3072:
        raise ConfigError("cifar10 needs an input width of 3072")
    lr = args.lr
    if lr is None:
        lr = default_learning_rate(algo, decorrelate, len(widths) - 2)
    rule = RuleConfig(kind=algo, decorrelate=decorrelate, variance=args.sigma2,
                      resamples=args.noise_samples, double_noisy=args.double_noisy, lr=lr,
                      decor_lr=args.decor_lr, n_mode=args.n_mode)
    spec = NetworkSpec(widths, slope=args.slope, decorrelate=decorrelate,
                       linear_output=(args.loss == "cce"))
    return ExperimentConfig(spec=spec, rule=rule, epochs=args.epochs, batch_size=args.batch_size,
                            seeds=tuple(args.seed or [0]), dataset=args.dataset, loss=args.loss,
                            out=args.out, data_dir=args.data_dir or os.environ.get(DATA_ENV),
                            n_train=args.n_train, n_test=args.n_test, classes=args.classes,
                            margin=args.margin, correlation=args.correlation,
                            data_seed=args.data_seed)


def cmd_train(args) -> int:
    if args.double_noisy and split_algo(args.algo)[0] not in ("np", "anp"):
        raise ConfigError(f"--double-noisy cannot be combined with --algo {args.algo}")
    config = config_from_args(args)
    records = train(config)
    if args.out:
        write_metrics(records, args.out)
        write_meta(config, meta_path(args.out))
    else:
        for r in records:
            print(f"seed={r.seed} epoch={r.epoch} train_acc={r.train_accuracy:.4f} "
                  f"test_acc={r.test_accuracy:.4f} train_loss={r.train_loss:.4f}")
    return EXIT_OK


def cmd_align(args, sweep: bool) -> int:
    widths = args.layers
    algorithms = tuple(a for a in args.algorithms.split(",") if a)
    report = oracle.AlignmentReport()
    for seed in args.seed or [0]:
        net, x, t = oracle.alignment_setup(seed, batch=args.batch_size, widths=widths,
                                      slope=args.slope, linear_output=(args.loss == "cce"))
        if sweep:
            report.extend(sigma_sweep(net, x, t, _floats(args.sigma2_list), loss=args.loss,
                                      iterations=args.iterations, seeds=(seed,),
                                      algorithms=algorithms))
        else:
            counts = [int(c) for c in args.counts.split(",")]
            report.extend(oracle.alignment_experiment(
                net, x, t, loss=args.loss, algorithms=algorithms, counts=counts,
                variance=args.sigma2, seed=seed, n_mode=args.n_mode))
    if args.out:
        report.write_csv(args.out)
    else:
        for r in report.rows:
            print(f"{r.algorithm:>4} layer={r.layer} n={r.averaging_count:<5} "
                  f"sigma2={r.sigma2:.0e} seed={r.seed} angle={r.angle_degrees:.3f}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import run_checks
    results = run_checks()
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CONFIG


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "train":
            return cmd_train(args)
        if args.command in ("align", "sweep-sigma"):
            return cmd_align(args, sweep=args.command == "sweep-sigma")
        return cmd_check(args)
    except (ConfigError, InvalidParameterError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedRunError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
