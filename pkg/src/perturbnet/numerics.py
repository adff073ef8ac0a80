"""Dense float64 helpers and path-addressed Gaussian random streams.

Every random draw in the package comes from an :class:`RngStream`, an
immutable ``(seed, path)`` address.  Turning an address into a generator is a
pure function, so a stream for ``(epoch=3, batch=7, layer=2)`` yields the
same numbers no matter which other streams were used before it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

DTYPE = np.float64

# Purpose tags used as the first element of a stream path.
INIT = 0
DATA = 1
SHUFFLE = 2
NOISE = 3
ORACLE = 4
INPUTS = 5


class PerturbNetError(Exception):
    """Base class for errors raised by this package."""


class InvalidParameterError(PerturbNetError, ValueError):
    """A parameter or array shape is outside its allowed domain."""


class DegenerateInputError(PerturbNetError, ArithmeticError):
    """An operation would divide by a (numerically) zero norm."""


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream addressed by a root seed and a tag path."""

    seed: int
    path: tuple[int, ...] = ()

    def derive(self, *tags: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(t) for t in tags))

    def generator(self) -> np.random.Generator:
        # Philox is counter based; SeedSequence hashes (seed, path) into its key.
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))


def derive_stream(parent: RngStream, tag: int) -> RngStream:
    return parent.derive(tag)


def gaussian(n: Union[int, Sequence[int]], variance: float, stream: RngStream) -> np.ndarray:
    """Draw ``n`` i.i.d. samples from N(0, variance).

    ``n`` may be a shape tuple.  The draws are ``sqrt(variance)`` times a
    standard-normal sample, so two calls on the same stream with different
    variances give parallel vectors.
    """
    if not variance > 0:
        raise InvalidParameterError(f"variance must be positive, got {variance}")
    z = stream.generator().standard_normal(n)
    return np.sqrt(variance) * z


def flatten(parts: Union[np.ndarray, Iterable[np.ndarray]]) -> np.ndarray:
    if isinstance(parts, np.ndarray):
        return parts.ravel()
    if hasattr(parts, "layers"):
        parts = parts.layers
    return np.concatenate([np.asarray(p, dtype=DTYPE).ravel() for p in parts])


def angle_degrees(a, b) -> float:
    """Angle between two arrays or update sets after flattening, in degrees."""
    u = flatten(a)
    v = flatten(b)
    if u.shape != v.shape:
        raise InvalidParameterError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("angle undefined for a zero-norm argument")
    cos = float(np.dot(u, v) / (nu * nv))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def check_finite(*arrays: np.ndarray) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)
