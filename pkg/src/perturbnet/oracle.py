"""Ground-truth checks for the update rules.

Nothing here shares code paths with the rule it checks: finite differences
never call ``backprop``, and the directional-derivative estimator reads the
injected noise directly instead of activity differences.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import learners
from .learners import UpdateSet
from .network import Network, NoiseTarget, as_batch, forward, per_sample_loss, sample_noise
from .numerics import INPUTS, ORACLE, InvalidParameterError, RngStream, angle_degrees


def mean_loss(net: Network, x0: np.ndarray, target: np.ndarray, loss: str) -> float:
    return float(per_sample_loss(loss, forward(net, x0).output, target).mean())


def fd_gradient(net: Network, x0: np.ndarray, target: np.ndarray, loss: str = "cce",
                step: float = 1e-5) -> UpdateSet:
    """Central-difference gradient of the batch-mean loss w.r.t. every weight.

    Decorrelation matrices are held fixed.  Costs two forward passes per weight.
    """
    if not step > 0:
        raise InvalidParameterError("finite-difference step must be positive")
    probe = net.copy()
    grads = []
    for W in probe.weights:
        G = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            w0 = W[idx]
            W[idx] = w0 + step
            up = mean_loss(probe, x0, target, loss)
            W[idx] = w0 - step
            down = mean_loss(probe, x0, target, loss)
            W[idx] = w0
            G[idx] = (up - down) / (2.0 * step)
        grads.append(G)
    return UpdateSet(tuple(grads))


def kink_distance(net: Network, x0: np.ndarray) -> float:
    """Smallest |a| over all pre-activations that pass through the leaky ReLU."""
    trace = forward(net, x0)
    layers = trace.pre if not net.spec.linear_output else trace.pre[:-1]
    if not layers:
        return float("inf")
    return float(min(np.abs(a).min() for a in layers))


def smooth_input(net: Network, stream: RngStream, batch: int = 1, margin: float = 1e-3,
                 max_tries: int = 1000) -> np.ndarray:
    """Gaussian input whose pre-activations all stay ``margin`` away from the kink."""
    for attempt in range(max_tries):
        x = stream.derive(attempt).generator().standard_normal((batch, net.widths[0]))
        if kink_distance(net, x) >= margin:
            return x
    raise RuntimeError(f"no kink-free input found in {max_tries} tries")


def relative_error(a: UpdateSet, b: UpdateSet, floor: float = 1e-3) -> float:
    """Largest entrywise |a - b| / |b|.

    |b| is floored at ``floor`` times the largest |b| of the same layer:
    central differences carry an absolute round-off of about eps * L / step,
    so entries far below the layer's scale are compared at that scale.
    """
    worst = 0.0
    for x, y in zip(a.layers, b.layers):
        denom = np.maximum(np.abs(y), floor * np.abs(y).max())
        denom[denom == 0] = 1.0
        worst = max(worst, float((np.abs(x - y) / denom).max()))
    return worst


def directional_gradient_estimate(net: Network, x0: np.ndarray, target: np.ndarray, layer: int,
                                  samples: int, variance: float, stream: RngStream,
                                  loss: str = "cce", chunk: int = 2000) -> np.ndarray:
    """Estimate dL/da_layer for one input by averaging directional derivatives.

    Each of ``samples`` draws perturbs only ``layer`` with v ~ N(0, variance I);
    the estimate is ``N_l * mean(dL * v / |v|^2)``.
    """
    if samples < 1:
        raise InvalidParameterError("need at least one sample")
    x = as_batch(x0)
    if x.shape[0] != 1:
        raise InvalidParameterError("directional estimate takes a single input sample")
    base = float(per_sample_loss(loss, forward(net, x).output, target)[0])
    width = net.widths[layer]
    total = np.zeros(width)
    done = 0
    c = 0
    while done < samples:
        n = min(chunk, samples - done)
        bundle = sample_noise(net, NoiseTarget.single_layer(layer), variance, stream.derive(c), batch=n)
        xs = np.repeat(x, n, axis=0)
        dL = per_sample_loss(loss, forward(net, xs, bundle).output, target) - base
        v = bundle.vectors[layer - 1]
        total += ((dL / (v ** 2).sum(axis=1))[:, None] * v).sum(axis=0)
        done += n
        c += 1
    return width * total / samples


def median_directional_angles(net, x, t, layer, sizes=(100, 1000, 10000), repeats=5, seed=0,
                              variance=1e-6):
    """Median angle between the directional estimate and the true layer gradient, per size."""
    g = learners.backprop(net, forward(net, x), t, "cce")[layer - 1][0]
    out = []
    for S in sizes:
        angles = [angle_degrees(directional_gradient_estimate(
            net, x, t, layer, S, variance, RngStream(seed).derive(ORACLE, layer, S, r)), g)
            for r in range(repeats)]
        out.append(float(np.median(angles)))
    return out


def covariance_propagation_check(W: np.ndarray, samples: int, stream: RngStream):
    """Empirical covariance of W x for white x, and its relative Frobenius error to W W^T."""
    if samples < 2:
        raise InvalidParameterError("need at least two samples")
    W = np.asarray(W, dtype=np.float64)
    x = stream.generator().standard_normal((samples, W.shape[1]))
    y = x @ W.T
    cov = np.cov(y, rowvar=False)
    target = W @ W.T
    err = np.linalg.norm(cov - target) / np.linalg.norm(target)
    return cov, float(err)


@dataclass(frozen=True)
class AlignmentRow:
    algorithm: str
    layer: int
    averaging_count: int
    forward_passes: int
    sigma2: float
    angle_degrees: float
    seed: int


CSV_COLUMNS = ("algorithm", "layer", "averaging_count", "forward_passes", "sigma2",
               "angle_degrees", "seed")


@dataclass
class AlignmentReport:
    rows: list[AlignmentRow] = field(default_factory=list)

    def extend(self, other: "AlignmentReport") -> None:
        self.rows.extend(other.rows)

    def select(self, **match) -> list[AlignmentRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]

    def mean_angle(self, algorithm: str, layer: int, averaging_count: int,
                   sigma2: Optional[float] = None) -> float:
        match = dict(algorithm=algorithm, layer=layer, averaging_count=averaging_count)
        if sigma2 is not None:
            match["sigma2"] = sigma2
        rows = self.select(**match)
        if not rows:
            raise KeyError(f"no rows for {match}")
        return float(np.mean([r.angle_degrees for r in rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.algorithm, r.layer, r.averaging_count, r.forward_passes,
                            f"{r.sigma2:.6g}", f"{r.angle_degrees:.6g}", r.seed])


ALGORITHMS = ("np", "anp", "inp")


def forward_passes(algorithm: str, averaging_count: int, depth: int) -> int:
    """Passes per sample: one clean pass plus the noisy passes of every draw."""
    if algorithm == "inp":
        return 1 + depth * averaging_count
    return 1 + averaging_count


def alignment_experiment(net: Network, x: np.ndarray, target: np.ndarray, *, loss: str = "cce",
                         algorithms: Sequence[str] = ALGORITHMS,
                         counts: Iterable[int] = (1, 10, 100, 1000), variance: float = 1e-6,
                         seed: int = 0, n_mode: str = "noisy-units") -> AlignmentReport:
    """Angles to backprop of noise-averaged updates on a frozen network.

    Draw ``k`` reuses the same stream for every variance, so a sweep over
    ``variance`` compares identical noise directions.  NP and ANP share each
    noisy pass.
    """
    counts = sorted(set(int(c) for c in counts))
    if not counts or counts[0] < 1:
        raise InvalidParameterError("averaging counts must be >= 1")
    unknown = set(algorithms) - set(ALGORITHMS)
    if unknown:
        raise InvalidParameterError(f"unknown algorithms {sorted(unknown)}")
    x = as_batch(x)
    B = x.shape[0]
    clean = forward(net, x)
    bp = learners.bp_update(net, clean, target, loss)
    stream = RngStream(seed).derive(ORACLE)
    sums = {a: None for a in algorithms}
    report = AlignmentReport()
    everywhere = NoiseTarget.all_layers()
    for k in range(1, counts[-1] + 1):
        s = stream.derive(k)
        if "np" in algorithms or "anp" in algorithms:
            noisy = forward(net, x, sample_noise(net, everywhere, variance, s, batch=B))
            dL = learners.loss_differential(loss, noisy, clean, target)
            if "np" in algorithms:
                u = learners.np_update(clean, noisy, dL, variance)
                sums["np"] = u if sums["np"] is None else sums["np"] + u
            if "anp" in algorithms:
                u = learners.anp_update(clean, noisy, dL, n_mode)
                sums["anp"] = u if sums["anp"] is None else sums["anp"] + u
        if "inp" in algorithms:
            u = learners.inp_update(net, x, target, variance, s.derive(1 << 20), loss, clean=clean)
            sums["inp"] = u if sums["inp"] is None else sums["inp"] + u
        if k in counts:
            for a in algorithms:
                for l in range(1, net.depth + 1):
                    report.rows.append(AlignmentRow(
                        a, l, k, forward_passes(a, k, net.depth), variance,
                        angle_degrees(sums[a].layers[l - 1], bp.layers[l - 1]), seed))
    return report


def alignment_setup(seed: int, batch: int = 100, widths=(128, 64, 64, 64, 10), slope: float = 0.01,
               linear_output: bool = True):
    """Frozen network and synthetic input batch for the alignment experiments."""
    from .data import synthetic_classification
    from .network import NetworkSpec, init_network
    from .numerics import INIT

    root = RngStream(seed)
    net = init_network(NetworkSpec(widths, slope=slope, linear_output=linear_output),
                       root.derive(INIT))
    train, _ = synthetic_classification(batch, widths[0], widths[-1], 3.0, root.derive(INPUTS),
                                        n_test=0)
    return net, train.inputs, train.targets
