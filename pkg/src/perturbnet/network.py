"""Bias-free fully-connected network with optional per-layer input decorrelation.

All activations are stored batch-major: an array of shape ``(B, N_l)`` holds
one row per sample.  A single sample is simply a batch of one; 1-D inputs are
promoted to a ``(1, N)`` batch.

Layers are numbered as in the usual notation: weights ``W_1..W_L`` act on the
decorrelated inputs ``x*_0..x*_{L-1}``, and the decorrelation matrices are
``R_0..R_{L-1}``.  Python lists are 0-based, so ``net.weights[l - 1]`` is
``W_l`` and ``net.decorrelators[l]`` is ``R_l``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import DTYPE, InvalidParameterError, RngStream, gaussian


@dataclass(frozen=True)
class NetworkSpec:
    widths: tuple[int, ...]
    slope: float = 0.01
    decorrelate: bool = False
    linear_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise InvalidParameterError("need at least one weight layer (two widths)")
        if any(w < 1 for w in self.widths):
            raise InvalidParameterError(f"all widths must be >= 1, got {self.widths}")
        if not 0 <= self.slope < 1:
            raise InvalidParameterError(f"leaky-ReLU slope must lie in [0, 1), got {self.slope}")

    @property
    def depth(self) -> int:
        """Number of weight layers L."""
        return len(self.widths) - 1


class Network:
    def __init__(self, spec: NetworkSpec, weights: Sequence[np.ndarray],
                 decorrelators: Optional[Sequence[np.ndarray]] = None):
        self.spec = spec
        self.weights = [np.array(w, dtype=DTYPE) for w in weights]
        if decorrelators is None:
            decorrelators = [np.eye(n, dtype=DTYPE) for n in spec.widths[:-1]]
        self.decorrelators = [np.array(r, dtype=DTYPE) for r in decorrelators]
        self._check_shapes()

    def _check_shapes(self):
        w = self.spec.widths
        if len(self.weights) != self.spec.depth or len(self.decorrelators) != self.spec.depth:
            raise InvalidParameterError("parameter count does not match spec depth")
        for l in range(1, self.spec.depth + 1):
            if self.weights[l - 1].shape != (w[l], w[l - 1]):
                raise InvalidParameterError(
                    f"W_{l} has shape {self.weights[l - 1].shape}, expected {(w[l], w[l - 1])}")
            if self.decorrelators[l - 1].shape != (w[l - 1], w[l - 1]):
                raise InvalidParameterError(f"R_{l - 1} has wrong shape")

    @property
    def widths(self) -> tuple[int, ...]:
        return self.spec.widths

    @property
    def depth(self) -> int:
        return self.spec.depth

    def copy(self) -> "Network":
        return Network(self.spec, [w.copy() for w in self.weights],
                       [r.copy() for r in self.decorrelators])

    def activation(self, a: np.ndarray, layer: int) -> np.ndarray:
        if layer == self.depth and self.spec.linear_output:
            return a
        return np.where(a >= 0, a, self.spec.slope * a)

    def activation_grad(self, a: np.ndarray, layer: int) -> np.ndarray:
        if layer == self.depth and self.spec.linear_output:
            return np.ones_like(a)
        return np.where(a >= 0, 1.0, self.spec.slope)


def init_network(spec: NetworkSpec, stream: RngStream) -> Network:
    """Glorot-uniform weights, identity decorrelation matrices."""
    weights = []
    for l in range(1, spec.depth + 1):
        fan_in, fan_out = spec.widths[l - 1], spec.widths[l]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        rng = stream.derive(l).generator()
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    return Network(spec, weights)


class NoiseKind(enum.Enum):
    ALL_LAYERS = "all_layers"
    SINGLE_LAYER = "single_layer"
    SINGLE_UNIT = "single_unit"


@dataclass(frozen=True)
class NoiseTarget:
    kind: NoiseKind
    layer: Optional[int] = None
    unit: Optional[int] = None

    @classmethod
    def all_layers(cls) -> "NoiseTarget":
        return cls(NoiseKind.ALL_LAYERS)

    @classmethod
    def single_layer(cls, layer: int) -> "NoiseTarget":
        return cls(NoiseKind.SINGLE_LAYER, layer)

    @classmethod
    def single_unit(cls, layer: int, unit: int) -> "NoiseTarget":
        return cls(NoiseKind.SINGLE_UNIT, layer, unit)


@dataclass(frozen=True)
class NoiseBundle:
    """Per-layer pre-activation perturbations, one ``(B, N_l)`` array per layer."""

    vectors: tuple[np.ndarray, ...]
    target: NoiseTarget
    variance: float

    @property
    def batch_size(self) -> int:
        return self.vectors[0].shape[0]


def sample_noise(net: Network, target: NoiseTarget, variance: float, stream: RngStream,
                 batch: int = 1) -> NoiseBundle:
    """Draw a noise bundle for ``batch`` samples.

    Layer ``l`` draws from ``stream.derive(l)``.  A single-unit bundle places a
    deterministic step of size ``sqrt(variance)`` on the chosen unit.
    """
    if not variance > 0:
        raise InvalidParameterError(f"noise variance must be positive, got {variance}")
    L = net.depth
    widths = net.widths
    if target.kind is not NoiseKind.ALL_LAYERS:
        if target.layer is None or not 1 <= target.layer <= L:
            raise InvalidParameterError(f"noise layer must be in 1..{L}, got {target.layer}")
    if target.kind is NoiseKind.SINGLE_UNIT:
        if target.unit is None or not 0 <= target.unit < widths[target.layer]:
            raise InvalidParameterError(f"unit index {target.unit} out of range for layer {target.layer}")

    vectors = []
    for l in range(1, L + 1):
        shape = (batch, widths[l])
        if target.kind is NoiseKind.ALL_LAYERS or (
                target.kind is NoiseKind.SINGLE_LAYER and l == target.layer):
            vectors.append(gaussian(shape, variance, stream.derive(l)))
        else:
            v = np.zeros(shape, dtype=DTYPE)
            if target.kind is NoiseKind.SINGLE_UNIT and l == target.layer:
                v[:, target.unit] = np.sqrt(variance)
            vectors.append(v)
    return NoiseBundle(tuple(vectors), target, float(variance))


@dataclass
class ForwardTrace:
    """Activations of one (batched) forward pass.

    ``inputs[l - 1]`` is the decorrelated input ``x*_{l-1}`` of weight layer
    ``l``, ``pre[l - 1]`` its pre-activation ``a_l`` (noise included) and
    ``post[l - 1]`` the output ``x_l``.
    """

    x0: np.ndarray
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    noise: Optional[NoiseBundle] = None

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]

    @property
    def batch_size(self) -> int:
        return self.x0.shape[0]

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.x0.shape[1],) + tuple(a.shape[1] for a in self.pre)


def as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 1:
        return x[None, :]
    if x.ndim != 2:
        raise InvalidParameterError(f"expected a vector or a batch matrix, got ndim={x.ndim}")
    return x


def forward(net: Network, x0: np.ndarray, noise: Optional[NoiseBundle] = None) -> ForwardTrace:
    x = as_batch(x0)
    if x.shape[1] != net.widths[0]:
        raise InvalidParameterError(f"input width {x.shape[1]} != N_0 = {net.widths[0]}")
    if noise is not None:
        if len(noise.vectors) != net.depth:
            raise InvalidParameterError("noise bundle depth does not match network")
        for l, v in enumerate(noise.vectors, start=1):
            if v.shape[1] != net.widths[l] or v.shape[0] not in (1, x.shape[0]):
                raise InvalidParameterError(f"noise for layer {l} has shape {v.shape}")

    inputs, pre, post = [], [], []
    h = x
    for l in range(1, net.depth + 1):
        xs = h @ net.decorrelators[l - 1].T if net.spec.decorrelate else h
        a = xs @ net.weights[l - 1].T
        if noise is not None:
            a = a + noise.vectors[l - 1]
        h = net.activation(a, l)
        inputs.append(xs)
        pre.append(a)
        post.append(h)
    return ForwardTrace(x, inputs, pre, post, noise)


def _pair(output: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    vector = np.ndim(output) == 1
    out = as_batch(output)
    tgt = as_batch(target)
    if out.shape != tgt.shape:
        if tgt.shape[0] == 1 and tgt.shape[1] == out.shape[1]:
            tgt = np.broadcast_to(tgt, out.shape)
        else:
            raise InvalidParameterError(f"output shape {out.shape} != target shape {tgt.shape}")
    return out, tgt, vector


def _is_one_hot(t: np.ndarray) -> bool:
    return bool(np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_cce(output: np.ndarray, target: np.ndarray):
    """Softmax cross-entropy of logits against a one-hot target.

    Returns a float for 1-D arguments and one loss per row otherwise.
    """
    out, tgt, vector = _pair(output, target)
    if not _is_one_hot(tgt):
        raise InvalidParameterError("CCE target must be one-hot")
    losses = -(tgt * log_softmax(out)).sum(axis=1)
    return float(losses[0]) if vector else losses


def loss_mse(output: np.ndarray, target: np.ndarray):
    """Sum of squared errors over output units (per row for batches)."""
    out, tgt, vector = _pair(output, target)
    losses = ((out - tgt) ** 2).sum(axis=1)
    return float(losses[0]) if vector else losses


LOSSES = {"cce": loss_cce, "mse": loss_mse}


def loss_fn(kind: str):
    try:
        return LOSSES[kind]
    except KeyError:
        raise InvalidParameterError(f"unknown loss {kind!r}; expected one of {sorted(LOSSES)}")


def per_sample_loss(kind: str, output: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Loss of each row as a 1-D array (batch-shaped even for a single sample)."""
    return np.atleast_1d(loss_fn(kind)(as_batch(output), as_batch(target)))


def output_gradient(kind: str, net: Network, trace: ForwardTrace, target: np.ndarray) -> np.ndarray:
    """dL/da_L for each row of a clean trace."""
    out = trace.output
    tgt = np.broadcast_to(as_batch(target), out.shape)
    if kind == "cce":
        dx = np.exp(log_softmax(out)) - tgt
        return dx * net.activation_grad(trace.pre[-1], net.depth)
    if kind == "mse":
        return 2.0 * (out - tgt) * net.activation_grad(trace.pre[-1], net.depth)
    raise InvalidParameterError(f"unknown loss {kind!r}")

