"""Weight-update rules: backprop, NP, INP, ANP, plus decorrelation and Adam.

Every rule consumes batched forward traces and returns the batch-mean
:class:`UpdateSet`.  The update of a single sample is the same call with a
batch of one.  Updates are *descent directions*: the optimizer subtracts them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .network import (ForwardTrace, Network, NoiseKind, NoiseTarget, as_batch, forward,
                      output_gradient, per_sample_loss, sample_noise)
from .numerics import DTYPE, DegenerateInputError, InvalidParameterError, RngStream

# Squared norms below this are treated as zero; the sample is skipped.
DEGENERATE_SQNORM = 1e-30


@dataclass(frozen=True)
class UpdateSet:
    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(np.asarray(w, dtype=DTYPE) for w in self.layers))

    @classmethod
    def zeros_like(cls, net: Network) -> "UpdateSet":
        return cls(tuple(np.zeros_like(w) for w in net.weights))

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __add__(self, other: "UpdateSet") -> "UpdateSet":
        return UpdateSet(tuple(a + b for a, b in zip(self.layers, other.layers)))

    def __sub__(self, other: "UpdateSet") -> "UpdateSet":
        return UpdateSet(tuple(a - b for a, b in zip(self.layers, other.layers)))

    def __mul__(self, c: float) -> "UpdateSet":
        return UpdateSet(tuple(c * a for a in self.layers))

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> "UpdateSet":
        return UpdateSet(tuple(a / c for a in self.layers))

    def __neg__(self) -> "UpdateSet":
        return self * -1.0

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.layers])

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in self.layers)

    @staticmethod
    def mean(updates: Sequence["UpdateSet"]) -> "UpdateSet":
        if not updates:
            raise InvalidParameterError("cannot average an empty list of updates")
        total = updates[0]
        for u in updates[1:]:
            total = total + u
        return total / len(updates)


def _outer_mean(signal: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Batch mean of the per-row outer products ``signal_b inputs_b^T``."""
    return signal.T @ inputs / signal.shape[0]


def _as_rows(dL, batch: int) -> np.ndarray:
    d = np.atleast_1d(np.asarray(dL, dtype=DTYPE))
    if d.shape != (batch,):
        raise InvalidParameterError(f"loss differential has shape {d.shape}, expected ({batch},)")
    return d


def backprop(net: Network, trace: ForwardTrace, target: np.ndarray, loss: str) -> list[np.ndarray]:
    """Per-row gradients g_l = dL/da_l for l = 1..L on a clean trace."""
    g = output_gradient(loss, net, trace, target)
    grads = [g]
    for l in range(net.depth, 1, -1):
        dx = g @ net.weights[l - 1]
        if net.spec.decorrelate:
            dx = dx @ net.decorrelators[l - 1]
        g = dx * net.activation_grad(trace.pre[l - 2], l - 1)
        grads.append(g)
    return grads[::-1]


def bp_update(net: Network, trace: ForwardTrace, target: np.ndarray, loss: str = "cce") -> UpdateSet:
    if trace.noise is not None:
        raise InvalidParameterError("backprop needs a clean trace")
    grads = backprop(net, trace, target, loss)
    return UpdateSet(tuple(_outer_mean(g, xs) for g, xs in zip(grads, trace.inputs)))


def loss_differential(loss: str, perturbed: ForwardTrace, reference: ForwardTrace,
                      target: np.ndarray) -> np.ndarray:
    """Per-row L(perturbed output) - L(reference output)."""
    return (per_sample_loss(loss, perturbed.output, target)
            - per_sample_loss(loss, reference.output, target))


def np_from_noise(noise: Sequence[np.ndarray], dL: np.ndarray, inputs: Sequence[np.ndarray],
                  variance: float) -> UpdateSet:
    d = _as_rows(dL, inputs[0].shape[0])
    coef = d / variance
    return UpdateSet(tuple(_outer_mean(coef[:, None] * eps, xs) for eps, xs in zip(noise, inputs)))


def np_update(clean: ForwardTrace, noisy: ForwardTrace, dL, variance: Optional[float] = None) -> UpdateSet:
    """Node perturbation: correlate the loss change with the injected noise."""
    if noisy.noise is None or noisy.noise.target.kind is not NoiseKind.ALL_LAYERS:
        raise InvalidParameterError("NP needs a noisy trace driven by an ALL_LAYERS bundle")
    if variance is None:
        variance = noisy.noise.variance
    noise = [np.broadcast_to(v, a.shape) for v, a in zip(noisy.noise.vectors, noisy.pre)]
    return np_from_noise(noise, dL, clean.inputs, variance)


def _normalized_coef(scale: float, dL: np.ndarray, sqnorm: np.ndarray) -> np.ndarray:
    ok = sqnorm >= DEGENERATE_SQNORM
    if not ok.any():
        raise DegenerateInputError("perturbation norm is zero for every sample")
    coef = np.zeros_like(sqnorm)
    coef[ok] = scale * dL[ok] / sqnorm[ok]
    return coef


def anp_from_differences(delta_a: Sequence[np.ndarray], dL, inputs: Sequence[np.ndarray],
                         n_units: float) -> UpdateSet:
    d = _as_rows(dL, inputs[0].shape[0])
    sqnorm = sum((da ** 2).sum(axis=1) for da in delta_a)
    coef = _normalized_coef(n_units, d, sqnorm)
    return UpdateSet(tuple(_outer_mean(coef[:, None] * da, xs) for da, xs in zip(delta_a, inputs)))


def unit_count(widths: Sequence[int], n_mode: str = "noisy-units") -> int:
    """Unit count used to scale ANP updates.

    ``noisy-units`` counts layers 1..L (the ones receiving noise);
    ``all-units`` also counts the input layer.
    """
    if n_mode == "noisy-units":
        return int(sum(widths[1:]))
    if n_mode == "all-units":
        return int(sum(widths))
    raise InvalidParameterError(f"unknown n_mode {n_mode!r}")


def anp_update(clean: ForwardTrace, noisy: ForwardTrace, dL, n_mode: str = "noisy-units") -> UpdateSet:
    """Activity-based node perturbation; uses only the two traces, never the noise."""
    delta_a = [b - a for a, b in zip(clean.pre, noisy.pre)]
    return anp_from_differences(delta_a, dL, clean.inputs, unit_count(clean.widths, n_mode))


def inp_layer_update(clean: ForwardTrace, noisy: ForwardTrace, dL, layer: int) -> np.ndarray:
    """Weight update for ``layer`` from a pass perturbed at that layer only.

    The direction is the measured activity change of the perturbed layer,
    which equals the injected ``v_l`` because no upstream layer was perturbed.
    """
    da = noisy.pre[layer - 1] - clean.pre[layer - 1]
    d = _as_rows(dL, da.shape[0])
    coef = _normalized_coef(da.shape[1], d, (da ** 2).sum(axis=1))
    return _outer_mean(coef[:, None] * da, clean.inputs[layer - 1])


def inp_update(net: Network, x0: np.ndarray, target: np.ndarray, variance: float,
               stream: RngStream, loss: str = "cce",
               clean: Optional[ForwardTrace] = None) -> UpdateSet:
    """Iterative node perturbation: one clean pass plus one pass per layer."""
    x = as_batch(x0)
    if clean is None:
        clean = forward(net, x)
    layers = []
    for l in range(1, net.depth + 1):
        bundle = sample_noise(net, NoiseTarget.single_layer(l), variance, stream.derive(l),
                              batch=x.shape[0])
        noisy = forward(net, x, bundle)
        dL = loss_differential(loss, noisy, clean, target)
        layers.append(inp_layer_update(clean, noisy, dL, l))
    return UpdateSet(tuple(layers))


def double_noisy_differences(pass1: ForwardTrace, pass2: ForwardTrace, loss: str,
                             target: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Activity and loss differences between two noisy passes; ``pass2`` is the reference."""
    if pass1.noise is None or pass2.noise is None:
        raise InvalidParameterError("both passes must be noisy")
    if all(np.array_equal(a, b) for a, b in zip(pass1.noise.vectors, pass2.noise.vectors)):
        raise DegenerateInputError("the two noisy passes used identical noise")
    delta_a = [a1 - a2 for a1, a2 in zip(pass1.pre, pass2.pre)]
    dL = loss_differential(loss, pass1, pass2, target)
    return delta_a, dL


def resample_update(source: Callable[[int], UpdateSet], k: int) -> UpdateSet:
    """Mean of ``k`` updates; ``source(i)`` must draw fresh noise for each ``i``."""
    if k < 1:
        raise InvalidParameterError(f"resample count must be >= 1, got {k}")
    return UpdateSet.mean([source(i) for i in range(k)])


def decorrelation_step(R: np.ndarray, x_star: np.ndarray, alpha: float) -> np.ndarray:
    """One decorrelation update, averaged over the rows of ``x_star``.

    The off-diagonal second moment of the decorrelated input drives R; the
    diagonal is removed so only cross-correlations are penalised.
    """
    xs = as_batch(x_star)
    if R.shape != (xs.shape[1], xs.shape[1]):
        raise InvalidParameterError(f"R has shape {R.shape}, input width is {xs.shape[1]}")
    corr = xs.T @ xs / xs.shape[0]
    corr = corr - np.diag(np.diag(corr))
    return R - alpha * (corr @ R)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    @classmethod
    def for_network(cls, net: Network) -> "AdamState":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(w) for w in net.weights])


def adam_step(state: AdamState, updates: UpdateSet, lr: float, net: Network) -> None:
    """Apply one bias-corrected Adam step to ``net.weights`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, g in enumerate(updates.layers):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        net.weights[i] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


class RuleKind(str, enum.Enum):
    BP = "bp"
    NP = "np"
    INP = "inp"
    ANP = "anp"


@dataclass(frozen=True)
class RuleConfig:
    kind: RuleKind = RuleKind.NP
    decorrelate: bool = False
    variance: float = 1e-6
    resamples: int = 1
    double_noisy: bool = False
    lr: float = 1e-3
    decor_lr: float = 1e-3
    n_mode: str = "noisy-units"

    def __post_init__(self):
        object.__setattr__(self, "kind", RuleKind(self.kind))
        if not self.variance > 0:
            raise InvalidParameterError("sigma2 must be positive")
        if self.resamples < 1:
            raise InvalidParameterError("noise-samples (K) must be >= 1")
        if self.double_noisy and self.kind not in (RuleKind.NP, RuleKind.ANP):
            raise InvalidParameterError(
                f"double-noisy mode only applies to np and anp, not {self.kind.value}")
        if self.lr < 0 or self.decor_lr < 0:
            raise InvalidParameterError("learning rates must be non-negative")
        unit_count((1, 1), self.n_mode)

    @property
    def label(self) -> str:
        name = self.kind.value.upper()
        return ("D" + name if self.decorrelate else name) + ("-2noisy" if self.double_noisy else "")


def forward_passes_per_sample(rule: RuleConfig, depth: int) -> int:
    """Forward passes one sample costs under ``rule`` (clean pass included)."""
    k = rule.resamples
    if rule.kind is RuleKind.BP:
        return 1
    if rule.double_noisy:
        return 2 * k
    if rule.kind is RuleKind.INP:
        return 1 + depth * k
    return 1 + k


@dataclass
class BatchUpdate:
    update: UpdateSet
    reference: ForwardTrace
    forward_passes: int


def rule_update(net: Network, rule: RuleConfig, x: np.ndarray, target: np.ndarray,
                loss: str, stream: RngStream) -> BatchUpdate:
    """Batch-mean update of ``rule`` for one mini-batch.

    ``stream`` addresses this batch; noise draw ``k`` uses ``stream.derive(k)``.
    The returned reference trace supplies the decorrelated inputs for the
    decorrelation step.
    """
    x = as_batch(x)
    B = x.shape[0]
    passes = forward_passes_per_sample(rule, net.depth) * B
    everywhere = NoiseTarget.all_layers()

    if rule.double_noisy:
        first_reference = []

        def one(k):
            s = stream.derive(k)
            p1 = forward(net, x, sample_noise(net, everywhere, rule.variance, s.derive(1), B))
            p2 = forward(net, x, sample_noise(net, everywhere, rule.variance, s.derive(2), B))
            if not first_reference:
                first_reference.append(p2)
            delta_a, dL = double_noisy_differences(p1, p2, loss, target)
            if rule.kind is RuleKind.ANP:
                return anp_from_differences(delta_a, dL, p2.inputs,
                                            unit_count(net.widths, rule.n_mode))
            return np_from_noise(p1.noise.vectors, dL, p2.inputs, rule.variance)

        update = resample_update(one, rule.resamples)
        return BatchUpdate(update, first_reference[0], passes)

    clean = forward(net, x)
    if rule.kind is RuleKind.BP:
        return BatchUpdate(bp_update(net, clean, target, loss), clean, passes)

    if rule.kind is RuleKind.INP:
        def one(k):
            return inp_update(net, x, target, rule.variance, stream.derive(k), loss, clean=clean)
    else:
        def one(k):
            noisy = forward(net, x, sample_noise(net, everywhere, rule.variance, stream.derive(k), B))
            dL = loss_differential(loss, noisy, clean, target)
            if rule.kind is RuleKind.ANP:
                return anp_update(clean, noisy, dL, rule.n_mode)
            return np_update(clean, noisy, dL, rule.variance)

    return BatchUpdate(resample_update(one, rule.resamples), clean, passes)


def decorrelate_network(net: Network, reference: ForwardTrace, alpha: float) -> None:
    """Update every R_l (l = 0..L-1) with the decorrelated input it produced."""
    for l in range(net.depth):
        net.decorrelators[l] = decorrelation_step(net.decorrelators[l], reference.inputs[l], alpha)
