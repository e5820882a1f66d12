"""Parameter spaces, box-uniform priors and the randomness contract."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


@dataclass(frozen=True)
class RngState:
    """Handle for a reproducible random stream.

    ``(seed, stream)`` fully determines the draws. Child streams are derived
    with :meth:`child`, which extends the spawn key, so siblings are
    statistically independent.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        if isinstance(self.stream, int):
            object.__setattr__(self, "stream", (self.stream,))

    def child(self, *keys: int) -> "RngState":
        return RngState(self.seed, self.stream + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(ss))


RngLike = Union[RngState, np.random.Generator, int]


def as_generator(rng: RngLike) -> np.random.Generator:
    """Turn an ``RngState``, integer seed or existing generator into a generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngState):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngState(int(rng)).generator()
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


@dataclass(frozen=True)
class BoxPrior:
    """Uniform prior on an axis-aligned box ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray
    names: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.ndim != 1 or lower.shape != upper.shape or lower.size == 0:
            raise ValueError("lower and upper must be 1-d vectors of equal, nonzero length")
        if not np.all(lower < upper):
            raise ValueError("every lower bound must be strictly below its upper bound")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"theta{j}" for j in range(lower.size)))
        elif len(self.names) != lower.size:
            raise ValueError("names must match the prior dimension")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.upper - self.lower)))

    def contains(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)

    def sample(self, n: int, rng: RngLike) -> np.ndarray:
        return prior_sample(self, n, rng)

    def logpdf(self, theta: np.ndarray) -> np.ndarray | float:
        return prior_logpdf(self, theta)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_bounds(cls, bounds: Sequence[Sequence[float]]) -> "BoxPrior":
        arr = np.asarray(bounds, dtype=float)
        return cls(arr[:, 0], arr[:, 1])


def prior_sample(prior: BoxPrior, n: int, rng: RngLike) -> np.ndarray:
    """Draw ``n`` rows uniformly from the box."""
    if n < 1:
        raise ValueError("n must be at least 1")
    gen = as_generator(rng)
    width = np.where(np.isfinite(prior.upper - prior.lower), prior.upper - prior.lower, np.nan)
    if np.any(np.isnan(width)):
        raise ValueError("cannot sample from an unbounded box")
    return prior.lower + width * gen.random((n, prior.dim))


def prior_logpdf(prior: BoxPrior, theta: np.ndarray) -> np.ndarray | float:
    """Log-density of the box prior; ``-inf`` outside the support.

    Accepts a single vector (returns a float) or a matrix of rows.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != prior.dim:
        raise ValueError(f"expected {prior.dim} parameters, got {theta.shape[-1]}")
    inside = prior.contains(theta)
    out = np.where(inside, -prior.log_volume, -np.inf)
    if theta.ndim == 1:
        return float(out)
    return out
