"""Simulators and summary statistics.

Two models are provided: the sparse vector autoregression (SVAR) benchmark and
a conjugate Gaussian toy whose posterior is known in closed form.  Both expose
the same small interface (:class:`Simulator`) consumed by the samplers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from pnpe.core import BoxPrior, RngLike, as_generator

# True parameters of the 6- and 20-dimensional SVAR experiments.
SVAR6_TRUE_THETA = (0.579, -0.143, 0.836, 0.745, -0.660, -0.254, 0.1)
SVAR20_TRUE_THETA = (
    -0.2764, -0.7765, 0.8231, -0.1972, -0.2254, 0.6334, 0.4495,
    0.4465, -0.8961, 0.0647, -0.1791, 0.0795, -0.5464, -0.9354,
    -0.4639, -0.7851, -0.6833, -0.1408, 0.7032, 0.8321, 0.1000,
)

SVAR_DIAGONAL = -0.1


class SimulationError(RuntimeError):
    """A simulator call failed; ``theta`` holds the offending parameters."""

    def __init__(self, message: str, theta=None):
        super().__init__(message)
        self.theta = None if theta is None else np.asarray(theta, dtype=float)


class Simulator:
    """Common interface: parameters in, summary statistics out."""

    name = "simulator"
    prior: BoxPrior

    @property
    def theta_dim(self) -> int:
        return self.prior.dim

    @property
    def summary_dim(self) -> int:
        raise NotImplementedError

    def simulate(self, theta, rng: RngLike) -> np.ndarray:
        raise NotImplementedError

    def summarize(self, data: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def simulate_summaries(self, thetas: np.ndarray, rng: RngLike) -> np.ndarray:
        """Simulate once per row of ``thetas`` and return an ``(n, m)`` summary matrix."""
        gen = as_generator(rng)
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        out = np.empty((thetas.shape[0], self.summary_dim))
        for i, theta in enumerate(thetas):
            out[i] = self.summarize(self.simulate(theta, gen))
        return out

    def describe(self) -> dict:
        return {"name": self.name}


# ---------------------------------------------------------------------------
# SVAR
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SvarConfig:
    k: int = 6
    T: int = 1000
    true_theta: Optional[tuple] = None

    def __post_init__(self):
        if self.k < 2 or self.k % 2:
            raise ValueError("k must be even and at least 2")
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if self.true_theta is not None:
            theta = tuple(float(v) for v in self.true_theta)
            if len(theta) != self.k + 1:
                raise ValueError(f"true_theta must have {self.k + 1} entries")
            object.__setattr__(self, "true_theta", theta)

    @classmethod
    def reference(cls, k: int = 6, T: int = 1000) -> "SvarConfig":
        theta = {6: SVAR6_TRUE_THETA, 20: SVAR20_TRUE_THETA}.get(k)
        if theta is None:
            raise ValueError("reference parameters exist only for k=6 and k=20")
        return cls(k=k, T=T, true_theta=theta)


def coupling_slots(k: int) -> list[tuple[int, int]]:
    """Matrix positions of the couplings, in parameter order.

    Parameter ``2j`` sits at ``(2j, 2j+1)`` and ``2j+1`` at ``(2j+1, 2j)``.
    """
    slots = []
    for j in range(k // 2):
        slots.append((2 * j, 2 * j + 1))
        slots.append((2 * j + 1, 2 * j))
    return slots


def build_transition_matrix(theta, k: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if k % 2 or k < 2:
        raise ValueError("k must be even and at least 2")
    if theta.shape != (k + 1,):
        raise ValueError(f"theta must have {k + 1} entries, got shape {theta.shape}")
    X = np.zeros((k, k))
    np.fill_diagonal(X, SVAR_DIAGONAL)
    for p, (i, j) in enumerate(coupling_slots(k)):
        X[i, j] = theta[p]
    return X


def read_couplings(X: np.ndarray) -> np.ndarray:
    """Inverse of the coupling placement: recover the k couplings from ``X``."""
    k = X.shape[0]
    return np.array([X[i, j] for i, j in coupling_slots(k)])


def _svar_recurrence(couplings: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Run ``y_t = X y_{t-1} + noise_t`` from ``y_0 = 0``.

    ``couplings`` has shape ``(..., k)`` and ``noise`` ``(..., T, k)``.  The
    block structure is exploited directly; each output coordinate is the
    same two-term sum a dense row product would produce, in the same order.
    """
    up = couplings[..., 0::2]  # entry (2j, 2j+1)
    down = couplings[..., 1::2]  # entry (2j+1, 2j)
    T = noise.shape[-2]
    y = np.empty_like(noise)
    y[..., 0, :] = noise[..., 0, :]
    for t in range(1, T):
        prev = y[..., t - 1, :]
        even = prev[..., 0::2]
        odd = prev[..., 1::2]
        y[..., t, 0::2] = (SVAR_DIAGONAL * even + up * odd) + noise[..., t, 0::2]
        y[..., t, 1::2] = (down * even + SVAR_DIAGONAL * odd) + noise[..., t, 1::2]
    return y


def svar_simulate(theta, cfg: SvarConfig, rng: RngLike) -> np.ndarray:
    """Simulate a ``T x k`` series; noise is ``sigma * standard_normal((T, k))``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (cfg.k + 1,):
        raise ValueError(f"theta must have {cfg.k + 1} entries")
    sigma = theta[cfg.k]
    if not sigma > 0:
        raise SimulationError("noise scale sigma must be positive", theta)
    gen = as_generator(rng)
    noise = sigma * gen.standard_normal((cfg.T, cfg.k))
    return _svar_recurrence(theta[: cfg.k], noise)


def svar_summaries(series: np.ndarray) -> np.ndarray:
    """Lag-1 cross autocovariances, one per coupling, then the pooled sample sd.

    Accepts a single ``(T, k)`` series or a stack ``(n, T, k)``.
    """
    series = np.asarray(series, dtype=float)
    T, k = series.shape[-2:]
    if T < 2:
        raise ValueError("need at least two time steps")
    rows = np.array([i for i, _ in coupling_slots(k)])
    cols = np.array([j for _, j in coupling_slots(k)])
    lag = np.einsum("...ti,...ti->...i", series[..., 1:, rows], series[..., :-1, cols]) / T
    flat = series.reshape(series.shape[:-2] + (T * k,))
    sd = np.std(flat, axis=-1, ddof=1)
    return np.concatenate([lag, sd[..., None]], axis=-1)


class SvarModel(Simulator):
    name = "svar"

    def __init__(self, cfg: SvarConfig, chunk: int = 256):
        self.cfg = cfg
        self.chunk = chunk
        lower = np.r_[-np.ones(cfg.k), 0.0]
        upper = np.ones(cfg.k + 1)
        names = tuple(f"x{i}{j}" for i, j in coupling_slots(cfg.k)) + ("sigma",)
        self.prior = BoxPrior(lower, upper, names=names)

    @property
    def summary_dim(self) -> int:
        return self.cfg.k + 1

    def simulate(self, theta, rng: RngLike) -> np.ndarray:
        return svar_simulate(theta, self.cfg, rng)

    def summarize(self, data: np.ndarray) -> np.ndarray:
        return svar_summaries(data)

    def simulate_summaries(self, thetas: np.ndarray, rng: RngLike) -> np.ndarray:
        gen = as_generator(rng)
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        k, T = self.cfg.k, self.cfg.T
        # rows with a non-positive noise scale cannot be simulated; they come back as NaN
        ok = thetas[:, k] > 0
        good = thetas[ok]
        res = np.empty((good.shape[0], k + 1))
        for start in range(0, good.shape[0], self.chunk):
            block = good[start : start + self.chunk]
            noise = gen.standard_normal((block.shape[0], T, k)) * block[:, k, None, None]
            res[start : start + block.shape[0]] = svar_summaries(_svar_recurrence(block[:, :k], noise))
        out = np.full((thetas.shape[0], k + 1), np.nan)
        out[ok] = res
        return out

    def describe(self) -> dict:
        return {"name": self.name, "k": self.cfg.k, "T": self.cfg.T}


# ---------------------------------------------------------------------------
# Conjugate Gaussian toy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussToyConfig:
    """Sample mean of ``n_obs`` draws from ``Normal(theta, noise_var)``.

    ``prior_mean``/``prior_var`` define the conjugate Normal prior used by
    :func:`gauss_toy_posterior`.  The samplers need a box prior, given by
    ``box``; :func:`gauss_toy_box_posterior` is the matching oracle.
    """

    n_obs: int = 10
    prior_mean: float = 0.0
    prior_var: float = 1.0
    noise_var: float = 1.0
    box: tuple = (-3.0, 3.0)
    true_theta: Optional[tuple] = (0.5,)

    def __post_init__(self):
        if self.n_obs < 1:
            raise ValueError("n_obs must be at least 1")
        if not self.prior_var > 0:
            raise ValueError("prior_var must be positive")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")
        if self.true_theta is not None:
            object.__setattr__(self, "true_theta", tuple(float(v) for v in np.atleast_1d(self.true_theta)))


def gauss_toy_simulate(theta, cfg: GaussToyConfig, rng: RngLike) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (1,):
        raise ValueError("the Gaussian toy takes a scalar parameter")
    gen = as_generator(rng)
    draws = theta[0] + math.sqrt(cfg.noise_var) * gen.standard_normal(cfg.n_obs)
    return np.array([draws.mean()])


def gauss_toy_posterior(cfg: GaussToyConfig, observed_mean: float) -> tuple[float, float]:
    """Normal-Normal conjugate update; returns ``(mean, variance)``."""
    precision = 1.0 / cfg.prior_var + cfg.n_obs / cfg.noise_var
    var = 1.0 / precision
    mean = var * (cfg.prior_mean / cfg.prior_var + cfg.n_obs * observed_mean / cfg.noise_var)
    return mean, var


def gauss_toy_box_posterior(cfg: GaussToyConfig, observed_mean: float) -> tuple[float, float]:
    """Posterior under the uniform ``box`` prior: a truncated Normal."""
    lo, hi = cfg.box
    sd = math.sqrt(cfg.noise_var / cfg.n_obs)
    dist = stats.truncnorm((lo - observed_mean) / sd, (hi - observed_mean) / sd, loc=observed_mean, scale=sd)
    return float(dist.mean()), float(dist.var())


class GaussToyModel(Simulator):
    name = "gauss_toy"

    def __init__(self, cfg: GaussToyConfig = GaussToyConfig()):
        self.cfg = cfg
        self.prior = BoxPrior([cfg.box[0]], [cfg.box[1]], names=("mu",))

    @property
    def summary_dim(self) -> int:
        return 1

    def simulate(self, theta, rng: RngLike) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        gen = as_generator(rng)
        return theta[0] + math.sqrt(self.cfg.noise_var) * gen.standard_normal(self.cfg.n_obs)

    def summarize(self, data: np.ndarray) -> np.ndarray:
        return np.array([np.mean(data)])

    def simulate_summaries(self, thetas: np.ndarray, rng: RngLike) -> np.ndarray:
        gen = as_generator(rng)
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        draws = gen.standard_normal((thetas.shape[0], self.cfg.n_obs))
        return thetas[:, :1] + math.sqrt(self.cfg.noise_var) * draws.mean(axis=1, keepdims=True)

    def analytic_posterior(self, observed_summary) -> tuple[float, float]:
        return gauss_toy_box_posterior(self.cfg, float(np.ravel(observed_summary)[0]))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "n_obs": self.cfg.n_obs,
            "noise_var": self.cfg.noise_var,
            "box": list(self.cfg.box),
        }


@dataclass
class ObservedData:
    data: np.ndarray
    summary: np.ndarray
    theta: Optional[np.ndarray] = None
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)


def generate_observed(model: Simulator, theta, rng: RngLike, seed: Optional[int] = None) -> ObservedData:
    theta = np.asarray(theta, dtype=float)
    data = model.simulate(theta, rng)
    return ObservedData(data=np.asarray(data), summary=model.summarize(data), theta=theta, seed=seed)
