"""Training loop, evaluation, metrics output and the sigma-sweep driver."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import learners
from .data import Dataset, BatchPlan, batches, load_cifar10, synthetic_classification
from .learners import AdamState, RuleConfig, RuleKind
from .network import Network, NetworkSpec, forward, init_network, per_sample_loss
from .numerics import DATA, INIT, NOISE, PerturbNetError, RngStream
from .oracle import AlignmentReport, alignment_experiment

log = logging.getLogger(__name__)


class DivergedRunError(PerturbNetError, FloatingPointError):
    def __init__(self, seed: int, epoch: int, batch: Optional[int], what: str = "loss"):
        where = f"epoch {epoch}" + (f", batch {batch}" if batch is not None else "")
        super().__init__(f"run diverged (non-finite {what}) at seed {seed}, {where}")
        self.seed, self.epoch, self.batch = seed, epoch, batch


def default_learning_rate(kind: str, decorrelate: bool, hidden_layers: int) -> float:
    """Weight learning rate for a rule and depth, from a per-depth table."""
    if hidden_layers == 0:
        return 1e-3
    if decorrelate:
        return 1e-3 if hidden_layers <= 3 else 5e-3
    return 1e-4


@dataclass
class ExperimentConfig:
    spec: NetworkSpec
    rule: RuleConfig
    epochs: int = 1
    batch_size: int = 1000
    seeds: tuple[int, ...] = (0,)
    dataset: str = "synthetic"
    loss: str = "cce"
    out: Optional[str] = None
    data_dir: Optional[str] = None
    # synthetic task
    n_train: int = 5000
    n_test: int = 1000
    classes: int = 10
    margin: float = 3.0
    correlation: float = 0.0
    data_seed: int = 0

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.rule.decorrelate != self.spec.decorrelate:
            raise ValueError("rule and network disagree on decorrelation")
        if self.dataset not in ("synthetic", "cifar10"):
            raise ValueError(f"unknown dataset {self.dataset!r}")

    def as_dict(self) -> dict:
        d = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("spec", "rule"):
                for k, v in asdict(value).items():
                    d[f"{f.name}.{k}"] = v.value if isinstance(v, RuleKind) else v
            else:
                d[f.name] = value
        return d


@dataclass(frozen=True)
class MetricsRecord:
    seed: int
    epoch: int
    train_accuracy: float
    test_accuracy: float
    train_loss: float
    test_loss: float
    forward_passes: int
    wall_seconds: float


def load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "cifar10":
        return load_cifar10(config.data_dir)
    return synthetic_classification(config.n_train, config.spec.widths[0], config.classes,
                                    config.margin, RngStream(config.data_seed, (DATA,)),
                                    n_test=config.n_test, correlation=config.correlation)


def evaluate(net: Network, dataset: Dataset, loss: str = "cce", chunk: int = 5000):
    """Accuracy and mean loss from clean forward passes."""
    if len(dataset) == 0:
        return float("nan"), float("nan")
    correct = 0
    total_loss = 0.0
    for i in range(0, len(dataset), chunk):
        x = dataset.inputs[i:i + chunk]
        t = dataset.targets[i:i + chunk]
        out = forward(net, x).output
        correct += int((out.argmax(axis=1) == t.argmax(axis=1)).sum())
        total_loss += float(per_sample_loss(loss, out, t).sum())
    return correct / len(dataset), total_loss / len(dataset)


def train_seed(config: ExperimentConfig, seed: int, train_set: Dataset, test_set: Dataset,
               net: Optional[Network] = None) -> tuple[list[MetricsRecord], Network]:
    root = RngStream(seed)
    if net is None:
        net = init_network(config.spec, root.derive(INIT))
    rule = config.rule
    adam = AdamState.for_network(net)
    passes = 0
    records = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        plan = BatchPlan(config.batch_size, seed, epoch)
        for b, idx in enumerate(batches(train_set, plan)):
            x = train_set.inputs[idx]
            t = train_set.targets[idx]
            step = learners.rule_update(net, rule, x, t, config.loss, root.derive(NOISE, epoch, b))
            ref_loss = per_sample_loss(config.loss, step.reference.output, t)
            if not (np.all(np.isfinite(ref_loss)) and step.update.is_finite()):
                raise DivergedRunError(seed, epoch + 1, b)
            learners.adam_step(adam, step.update, rule.lr, net)
            if rule.decorrelate:
                learners.decorrelate_network(net, step.reference, rule.decor_lr)
            passes += step.forward_passes
        train_acc, train_loss = evaluate(net, train_set, config.loss)
        test_acc, test_loss = evaluate(net, test_set, config.loss)
        if not np.isfinite(train_loss):
            raise DivergedRunError(seed, epoch + 1, None)
        rec = MetricsRecord(seed, epoch + 1, train_acc, test_acc, train_loss, test_loss, passes,
                            time.perf_counter() - start)
        log.info("seed %d epoch %d: train %.4f test %.4f loss %.4f", seed, epoch + 1,
                 train_acc, test_acc, train_loss)
        records.append(rec)
    return records, net


def train(config: ExperimentConfig, data: Optional[tuple[Dataset, Dataset]] = None) -> list[MetricsRecord]:
    """Train one network per seed and return per-epoch metrics for all of them."""
    train_set, test_set = data if data is not None else load_data(config)
    records = []
    for seed in config.seeds:
        recs, _ = train_seed(config, seed, train_set, test_set)
        records.extend(recs)
    return records


METRICS_HEADER = ("seed", "epoch", "train_acc", "test_acc", "train_loss", "test_loss",
                  "forward_passes", "wall_seconds")


def _g(x: float) -> str:
    return f"{x:.6g}"


def write_metrics(records: Sequence[MetricsRecord], path) -> None:
    lines = [",".join(METRICS_HEADER)]
    for r in records:
        lines.append(",".join([str(r.seed), str(r.epoch), _g(r.train_accuracy), _g(r.test_accuracy),
                               _g(r.train_loss), _g(r.test_loss), str(r.forward_passes),
                               _g(r.wall_seconds)]))
    Path(path).write_text("\n".join(lines) + "\n")


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def write_meta(config: ExperimentConfig, path) -> None:
    lines = [f"{k}={v}" for k, v in config.as_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def peak(records: Sequence[MetricsRecord], attr: str = "test_accuracy") -> dict[int, float]:
    """Best value of ``attr`` per seed."""
    out: dict[int, float] = {}
    for r in records:
        out[r.seed] = max(out.get(r.seed, -np.inf), getattr(r, attr))
    return out


def sigma_sweep(net: Network, x: np.ndarray, target: np.ndarray, sigma2s: Sequence[float], *,
                loss: str = "cce", iterations: int = 100, seeds: Sequence[int] = (0,),
                algorithms=("np", "anp", "inp"),
                layers: Optional[Sequence[int]] = None) -> AlignmentReport:
    """Alignment angles at each noise variance on one frozen network and batch.

    ``layers`` restricts the report to the given (1-based) layers.
    """
    report = AlignmentReport()
    for s2 in sigma2s:
        for seed in seeds:
            part = alignment_experiment(net, x, target, loss=loss, algorithms=algorithms,
                                        counts=(iterations,), variance=s2, seed=seed)
            if layers is not None:
                part = AlignmentReport([r for r in part.rows if r.layer in layers])
            report.extend(part)
    return report
