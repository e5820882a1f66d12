"""Adaptive SMC ABC with resample-move steps and an adaptive tolerance schedule.

Each iteration drops the worst ``floor(a N)`` particles, takes the next
tolerance from the surviving set, resamples replacements from the survivors
and rejuvenates them with MCMC ABC moves.  The number of moves per particle
follows the estimated acceptance rate so that a particle is left unmoved
with probability about ``c``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from pnpe.core import BoxPrior, RngLike, as_generator, prior_logpdf
from pnpe.models import SimulationError, Simulator

logger = logging.getLogger(__name__)


def discrepancy(s, s_obs, scale=None) -> np.ndarray | float:
    """Scaled Euclidean distance between summaries.

    ``s`` may be a single vector or a matrix of rows.
    """
    s = np.asarray(s, dtype=float)
    s_obs = np.asarray(s_obs, dtype=float)
    if s.shape[-1] != s_obs.shape[-1]:
        raise ValueError(f"summary length mismatch: {s.shape[-1]} vs {s_obs.shape[-1]}")
    scale = np.ones(s_obs.shape[-1]) if scale is None else np.asarray(scale, dtype=float)
    d = np.sqrt(np.sum(((s - s_obs) / scale) ** 2, axis=-1))
    return float(d) if d.ndim == 0 else d


def mad_scale(summaries: np.ndarray) -> np.ndarray:
    """Per-column median absolute deviation; columns with zero MAD get scale 1."""
    med = np.median(summaries, axis=0)
    mad = np.median(np.abs(summaries - med), axis=0)
    return np.where(mad > 0, mad, 1.0)


@dataclass
class SmcConfig:
    n_particles: int = 1000
    drop_fraction: float = 0.5
    move_tuning: float = 0.01
    target_epsilon: Optional[float] = None
    min_acceptance: Optional[float] = 0.1
    initial_trial_moves: int = 10
    max_moves: int = 500
    max_iterations: int = 200
    scale: Optional[tuple] = None  # fixed discrepancy scale; MAD of initial summaries if None
    transform: str = "none"  # random-walk coordinates: "none" (raw box) or "logit" (unbounded)

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if not 0 < self.drop_fraction < 1:
            raise ValueError("drop_fraction must lie in (0, 1)")
        if math.floor(self.drop_fraction * self.n_particles) < 1:
            raise ValueError("drop_fraction * n_particles must be at least 1")
        if not 0 < self.move_tuning < 1:
            raise ValueError("move_tuning must lie in (0, 1)")
        if self.target_epsilon is None and self.min_acceptance is None:
            raise ValueError("at least one stopping rule must be enabled")
        if self.min_acceptance is not None and not 0 < self.min_acceptance < 1:
            raise ValueError("min_acceptance must lie in (0, 1)")
        if self.transform not in ("logit", "none"):
            raise ValueError("transform must be 'logit' or 'none'")

    @property
    def n_drop(self) -> int:
        return math.floor(self.drop_fraction * self.n_particles)


@dataclass
class IterationRecord:
    iteration: int
    epsilon: float
    trial_moves: int
    trial_acceptance: float
    moves: int
    acceptance: float
    sims: int
    max_rho: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ParticleSet:
    """Particles sorted ascending by discrepancy, plus run bookkeeping."""

    theta: np.ndarray
    rho: np.ndarray
    summaries: np.ndarray
    scale: np.ndarray
    epsilon: float
    total_sims: int
    history: list = field(default_factory=list)
    converged: bool = True

    @property
    def n(self) -> int:
        return self.rho.shape[0]

    def copy(self) -> "ParticleSet":
        return replace(
            self,
            theta=self.theta.copy(),
            rho=self.rho.copy(),
            summaries=self.summaries.copy(),
            history=list(self.history),
        )

    def sort(self) -> "ParticleSet":
        order = np.argsort(self.rho, kind="stable")
        self.theta = self.theta[order]
        self.rho = self.rho[order]
        self.summaries = self.summaries[order]
        return self

    def to_dict(self) -> dict:
        return {
            "particles": [{"theta": t.tolist(), "rho": float(r)} for t, r in zip(self.theta, self.rho)],
            "history": [h.to_dict() for h in self.history],
            "epsilon": float(self.epsilon),
            "total_sims": int(self.total_sims),
            "scale": self.scale.tolist(),
            "converged": self.converged,
        }


def _simulate(model: Simulator, thetas: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    try:
        out = model.simulate_summaries(thetas, rng)
    except SimulationError:
        raise
    except Exception as exc:  # attach the batch for diagnosis
        raise SimulationError(f"simulator failed: {exc}", thetas[0] if len(thetas) == 1 else None) from exc
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        raise SimulationError("simulator returned non-finite summaries", thetas[np.argmax(bad)])
    return out


def initialize(prior: BoxPrior, model: Simulator, s_obs, cfg: SmcConfig, rng: RngLike) -> ParticleSet:
    """Draw ``N`` particles from the prior, simulate each once and sort by discrepancy."""
    gen = as_generator(rng)
    s_obs = np.asarray(s_obs, dtype=float)
    theta = prior.sample(cfg.n_particles, gen)
    summaries = _simulate(model, theta, gen)
    scale = mad_scale(summaries) if cfg.scale is None else np.asarray(cfg.scale, dtype=float)
    rho = discrepancy(summaries, s_obs, scale)
    ps = ParticleSet(theta, rho, summaries, scale, epsilon=0.0, total_sims=cfg.n_particles)
    ps.sort()
    ps.epsilon = float(ps.rho[-1])
    return ps


class BoxReparam:
    """Coordinates in which the random walk runs.

    With ``logit=True`` every bounded coordinate is mapped to the real line by
    ``u = logit((theta - lower) / (upper - lower))``; the prior density in
    ``u`` picks up the Jacobian of the inverse map.  With ``logit=False`` the
    walk runs on ``theta`` itself and leaving the box has density zero.
    """

    def __init__(self, prior: BoxPrior, logit: bool = True):
        self.prior = prior
        finite = np.isfinite(prior.lower) & np.isfinite(prior.upper)
        self.mask = finite if logit else np.zeros(prior.dim, dtype=bool)
        self.width = np.where(self.mask, prior.upper - prior.lower, 1.0)

    def to_u(self, theta: np.ndarray) -> np.ndarray:
        p = (theta - self.prior.lower) / self.width
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.log(p) - np.log1p(-p)
        return np.where(self.mask, u, theta)

    def to_theta(self, u: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            theta = self.prior.lower + self.width * (1.0 / (1.0 + np.exp(-u)))
        return np.where(self.mask, theta, u)

    def logpdf(self, u: np.ndarray) -> np.ndarray:
        theta = self.to_theta(u)
        inside = np.all((theta > self.prior.lower) & (theta < self.prior.upper) | ~self.mask, axis=-1)
        base = np.where(inside, prior_logpdf(self.prior, np.where(self.mask, np.clip(theta, self.prior.lower, self.prior.upper), theta)), -np.inf)
        # log |d theta / d u| = log width + log s(u) + log(1 - s(u))
        jac = np.log(self.width) - np.logaddexp(0.0, -u) - np.logaddexp(0.0, u)
        return base + np.sum(np.where(self.mask, jac, 0.0), axis=-1)


def _cholesky(cov: np.ndarray) -> np.ndarray:
    cov = np.atleast_2d(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-8 * float(np.mean(np.diag(cov)))
    if not jitter > 0:
        jitter = 1e-8
    eye = np.eye(cov.shape[0])
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10
    raise np.linalg.LinAlgError("proposal covariance could not be regularised")


@dataclass
class SweepResult:
    particles: ParticleSet
    accepted: int
    accept_prob_sum: float
    sims: int
    steps: int


def mcmc_move_sweep(
    ps: ParticleSet,
    idx: np.ndarray,
    epsilon: float,
    proposal_cov: np.ndarray,
    n_steps: int,
    prior: BoxPrior,
    model: Simulator,
    s_obs,
    rng: RngLike,
    reparam: Optional[BoxReparam] = None,
) -> SweepResult:
    """Apply ``n_steps`` MCMC ABC moves to each particle in ``idx``.

    The Gaussian random walk runs in the coordinates of ``reparam`` (raw
    parameters when omitted), with ``proposal_cov`` expressed in those
    coordinates.  Proposals with zero prior density have acceptance
    probability zero and are not simulated.  Particles move in lockstep so
    each step is one batched simulator call.
    """
    gen = as_generator(rng)
    s_obs = np.asarray(s_obs, dtype=float)
    reparam = reparam or BoxReparam(prior, logit=False)
    ps = ps.copy()
    idx = np.asarray(idx, dtype=int)
    chol = _cholesky(proposal_cov)
    accepted = 0
    prob_sum = 0.0
    sims = 0
    for _ in range(n_steps):
        current = reparam.to_u(ps.theta[idx])
        step = current + gen.standard_normal(current.shape) @ chol.T
        proposal = reparam.to_theta(step)
        log_ratio = reparam.logpdf(step) - reparam.logpdf(current)
        inside = np.isfinite(log_ratio)
        rho_new = np.full(idx.size, np.inf)
        summ_new = np.zeros((idx.size, ps.summaries.shape[1]))
        if np.any(inside):
            summ_new[inside] = _simulate(model, proposal[inside], gen)
            rho_new[inside] = discrepancy(summ_new[inside], s_obs, ps.scale)
            sims += int(inside.sum())
        with np.errstate(over="ignore", invalid="ignore"):
            prob = np.where(inside & (rho_new < epsilon), np.minimum(1.0, np.exp(np.where(inside, log_ratio, 0.0))), 0.0)
        u = gen.random(idx.size)
        accept = u < prob
        prob_sum += float(prob.sum())
        accepted += int(accept.sum())
        moved = idx[accept]
        ps.theta[moved] = proposal[accept]
        ps.rho[moved] = rho_new[accept]
        ps.summaries[moved] = summ_new[accept]
    ps.total_sims += sims
    return SweepResult(ps, accepted, prob_sum, sims, n_steps)


def adapt_num_moves(p_acc: float, c: float, max_moves: int = 500) -> int:
    """Moves needed so a particle stays put with probability about ``c``."""
    if not 0 <= p_acc <= 1 or math.isnan(p_acc):
        raise ValueError("acceptance estimate must lie in [0, 1]")
    if p_acc >= 1:
        return 1
    if p_acc <= 0:
        return max_moves
    # the 1e-9 guard keeps exact-integer ratios (e.g. p=0.99, c=0.01) from rounding up
    r = math.ceil(math.log(c) / math.log1p(-p_acc) - 1e-9)
    return int(min(max(r, 1), max_moves))


def smc_abc_run(prior: BoxPrior, model: Simulator, s_obs, cfg: SmcConfig, rng: RngLike) -> ParticleSet:
    """Run the adaptive SMC ABC sampler until a stopping rule fires.

    Stops when the largest discrepancy drops to ``target_epsilon`` or when
    the acceptance rate of an iteration's move steps falls below
    ``min_acceptance``.  Hitting ``max_iterations`` returns the current
    state with ``converged = False``.
    """
    gen = as_generator(rng)
    s_obs = np.asarray(s_obs, dtype=float)
    ps = initialize(prior, model, s_obs, cfg, gen)
    N, n_drop = cfg.n_particles, cfg.n_drop
    n_keep = N - n_drop
    trial = cfg.initial_trial_moves
    reparam = BoxReparam(prior, logit=cfg.transform == "logit")
    moved_idx = np.arange(n_keep, N)

    if cfg.target_epsilon is not None and ps.epsilon <= cfg.target_epsilon:
        return ps

    for t in range(1, cfg.max_iterations + 1):
        eps = float(ps.rho[n_keep - 1])
        cov = np.atleast_2d(np.cov(reparam.to_u(ps.theta[:n_keep]), rowvar=False))
        pick = gen.integers(0, n_keep, size=n_drop)
        ps.theta[n_keep:] = ps.theta[pick]
        ps.rho[n_keep:] = ps.rho[pick]
        ps.summaries[n_keep:] = ps.summaries[pick]

        sims_before = ps.total_sims
        res = mcmc_move_sweep(ps, moved_idx, eps, cov, trial, prior, model, s_obs, gen, reparam)
        ps = res.particles
        trial_rate = res.accept_prob_sum / (trial * n_drop) if trial > 0 else float("nan")
        moves = adapt_num_moves(trial_rate, cfg.move_tuning, cfg.max_moves) if trial > 0 else cfg.max_moves
        if cfg.max_moves == 0:
            moves = 0
        extra = max(moves - trial, 0)
        prob_sum = res.accept_prob_sum
        if extra:
            res = mcmc_move_sweep(ps, moved_idx, eps, cov, extra, prior, model, s_obs, gen, reparam)
            ps = res.particles
            prob_sum += res.accept_prob_sum
        steps = trial + extra
        rate = prob_sum / (steps * n_drop) if steps else float("nan")

        ps.sort()
        ps.epsilon = float(ps.rho[-1])
        ps.history.append(
            IterationRecord(
                iteration=t,
                epsilon=eps,
                trial_moves=trial,
                trial_acceptance=trial_rate,
                moves=steps,
                acceptance=rate,
                sims=ps.total_sims - sims_before,
                max_rho=ps.epsilon,
            )
        )
        logger.info("smc iter %d eps=%.4g acc=%.3f R=%d sims=%d", t, eps, rate, steps, ps.total_sims)
        trial = math.ceil(moves / 2)

        if cfg.target_epsilon is not None and ps.epsilon <= cfg.target_epsilon:
            return ps
        if cfg.min_acceptance is not None and rate < cfg.min_acceptance:
            return ps
    ps.converged = False
    logger.warning("smc abc hit the iteration cap (%d) before stopping", cfg.max_iterations)
    return ps
